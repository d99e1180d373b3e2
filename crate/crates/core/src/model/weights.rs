//! Reference model parameters and their on-disk layout.
//!
//! A model directory holds `config.json`, `manifest.json` and `weights.bin`.
//! `weights.bin` is every tensor as little-endian f32, concatenated in the
//! order listed by the manifest; each manifest entry records name, shape and
//! byte offset. Matrices are stored `[in, out]` row-major, so a row vector
//! times the matrix is the forward map.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, PositionalEncoding};
use crate::error::{Error, Result};
use crate::files::{read_file, to_json, write_file};

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub ln1_weight: Vec<f32>,
    pub ln1_bias: Vec<f32>,
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub ln2_weight: Vec<f32>,
    pub ln2_bias: Vec<f32>,
    pub w_in: Vec<f32>,
    pub b_in: Vec<f32>,
    pub w_out: Vec<f32>,
    pub b_out: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub token_embedding: Vec<f32>,
    /// Present iff the config asks for learned positions.
    pub position_embedding: Option<Vec<f32>>,
    pub layers: Vec<LayerWeights>,
    pub lnf_weight: Vec<f32>,
    pub lnf_bias: Vec<f32>,
    pub unembedding: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    byte_order: String,
    tensors: Vec<TensorEntry>,
}

impl Weights {
    /// All-zero parameters with unit layer-norm gains.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let f = config.d_ff;
        let layer = LayerWeights {
            ln1_weight: vec![1.0; d],
            ln1_bias: vec![0.0; d],
            wq: vec![0.0; d * d],
            wk: vec![0.0; d * d],
            wv: vec![0.0; d * d],
            wo: vec![0.0; d * d],
            ln2_weight: vec![1.0; d],
            ln2_bias: vec![0.0; d],
            w_in: vec![0.0; d * f],
            b_in: vec![0.0; f],
            w_out: vec![0.0; f * d],
            b_out: vec![0.0; d],
        };
        Self {
            token_embedding: vec![0.0; config.vocab_size * d],
            position_embedding: match config.positional_encoding {
                PositionalEncoding::Learned => Some(vec![0.0; config.max_seq_len * d]),
                PositionalEncoding::Sinusoidal => None,
            },
            layers: vec![layer; config.n_layers],
            lnf_weight: vec![1.0; d],
            lnf_bias: vec![0.0; d],
            unembedding: vec![0.0; d * config.vocab_size],
        }
    }

    /// Tensors in serialization order with their expected shapes.
    pub fn tensors(&self, config: &ModelConfig) -> Vec<(String, Vec<usize>, &[f32])> {
        let d = config.d_model;
        let f = config.d_ff;
        let mut out: Vec<(String, Vec<usize>, &[f32])> = vec![(
            "token_embedding".into(),
            vec![config.vocab_size, d],
            &self.token_embedding,
        )];
        if let Some(pos) = &self.position_embedding {
            out.push((
                "position_embedding".into(),
                vec![config.max_seq_len, d],
                pos,
            ));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.push((p("ln1.weight"), vec![d], &l.ln1_weight));
            out.push((p("ln1.bias"), vec![d], &l.ln1_bias));
            out.push((p("attn.wq"), vec![d, d], &l.wq));
            out.push((p("attn.wk"), vec![d, d], &l.wk));
            out.push((p("attn.wv"), vec![d, d], &l.wv));
            out.push((p("attn.wo"), vec![d, d], &l.wo));
            out.push((p("ln2.weight"), vec![d], &l.ln2_weight));
            out.push((p("ln2.bias"), vec![d], &l.ln2_bias));
            out.push((p("mlp.w_in"), vec![d, f], &l.w_in));
            out.push((p("mlp.b_in"), vec![f], &l.b_in));
            out.push((p("mlp.w_out"), vec![f, d], &l.w_out));
            out.push((p("mlp.b_out"), vec![d], &l.b_out));
        }
        out.push(("ln_f.weight".into(), vec![d], &self.lnf_weight));
        out.push(("ln_f.bias".into(), vec![d], &self.lnf_bias));
        out.push((
            "unembedding".into(),
            vec![d, config.vocab_size],
            &self.unembedding,
        ));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out = vec![&mut self.token_embedding];
        if let Some(pos) = self.position_embedding.as_mut() {
            out.push(pos);
        }
        for l in self.layers.iter_mut() {
            out.extend([
                &mut l.ln1_weight,
                &mut l.ln1_bias,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ln2_weight,
                &mut l.ln2_bias,
                &mut l.w_in,
                &mut l.b_in,
                &mut l.w_out,
                &mut l.b_out,
            ]);
        }
        out.extend([
            &mut self.lnf_weight,
            &mut self.lnf_bias,
            &mut self.unembedding,
        ]);
        out
    }

    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        for (name, shape, data) in self.tensors(config) {
            let expected: usize = shape.iter().product();
            if data.len() != expected {
                return Err(Error::Shape(format!(
                    "tensor {name} has {} elements, expected {expected} for shape {shape:?}",
                    data.len()
                )));
            }
        }
        if self.layers.len() != config.n_layers {
            return Err(Error::Shape(format!(
                "{} layers present, config says {}",
                self.layers.len(),
                config.n_layers
            )));
        }
        if self.position_embedding.is_some()
            != (config.positional_encoding == PositionalEncoding::Learned)
        {
            return Err(Error::Shape(
                "position embedding presence does not match positional_encoding".into(),
            ));
        }
        Ok(())
    }

    pub fn save(&self, config: &ModelConfig, dir: &Path) -> Result<()> {
        config.validate()?;
        self.check_shapes(config)?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

        let mut bytes = Vec::new();
        let mut entries = Vec::new();
        for (name, shape, data) in self.tensors(config) {
            entries.push(TensorEntry {
                name,
                shape,
                offset: bytes.len() as u64,
            });
            bytes.reserve(data.len() * 4);
            for x in data {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        let manifest = Manifest {
            dtype: "f32".into(),
            byte_order: "little".into(),
            tensors: entries,
        };
        write_file(&dir.join(CONFIG_FILE), &to_json(config)?)?;
        write_file(&dir.join(MANIFEST_FILE), &to_json(&manifest)?)?;
        write_file(&dir.join(WEIGHTS_FILE), &bytes)
    }

    pub fn load(dir: &Path) -> Result<(ModelConfig, Self)> {
        let config_path = dir.join(CONFIG_FILE);
        let config: ModelConfig = serde_json::from_slice(&read_file(&config_path)?)
            .map_err(|e| Error::malformed(&config_path, e.to_string()))?;
        config.validate()?;

        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest: Manifest = serde_json::from_slice(&read_file(&manifest_path)?)
            .map_err(|e| Error::malformed(&manifest_path, e.to_string()))?;
        if manifest.dtype != "f32" || manifest.byte_order != "little" {
            return Err(Error::malformed(
                &manifest_path,
                format!(
                    "unsupported encoding {} / {}",
                    manifest.dtype, manifest.byte_order
                ),
            ));
        }

        let weights_path = dir.join(WEIGHTS_FILE);
        let bytes = read_file(&weights_path)?;
        let mut weights = Weights::zeros(&config);
        let expected: Vec<(String, Vec<usize>)> = weights
            .tensors(&config)
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        if expected.len() != manifest.tensors.len() {
            return Err(Error::malformed(
                &manifest_path,
                format!(
                    "{} tensors listed, architecture needs {}",
                    manifest.tensors.len(),
                    expected.len()
                ),
            ));
        }
        let mut total = 0u64;
        for ((name, shape), (entry, slot)) in expected
            .iter()
            .zip(manifest.tensors.iter().zip(weights.tensors_mut()))
        {
            if &entry.name != name || &entry.shape != shape {
                return Err(Error::malformed(
                    &manifest_path,
                    format!(
                        "expected tensor {name} {shape:?}, found {} {:?}",
                        entry.name, entry.shape
                    ),
                ));
            }
            let start = entry.offset as usize;
            let end = start + slot.len() * 4;
            if end > bytes.len() {
                return Err(Error::malformed(
                    &weights_path,
                    format!("tensor {name} runs past end of file"),
                ));
            }
            for (dst, chunk) in slot.iter_mut().zip(bytes[start..end].chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
            }
            total += (end - start) as u64;
        }
        if total != bytes.len() as u64 {
            return Err(Error::malformed(
                &weights_path,
                format!(
                    "{} bytes present, manifest accounts for {total}",
                    bytes.len()
                ),
            ));
        }
        Ok((config, weights))
    }
}
