//! The anchored heads plus the hyperparameters generation runs with.
//!
//! On disk a bundle is a directory holding `manifest.json` and `vectors.bin`.
//! `vectors.bin` concatenates each listed head's parameters as little-endian
//! f32 in manifest order: θ for a probe, the positive then the negative
//! prototype for the prototype method.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::classifier::{
    DirectionNormalization, HeadClassifier, Method, ProbeClassifier, PrototypeClassifier,
};
use super::{DEFAULT_LAMBDA, DEFAULT_TAU};
use crate::error::{Error, Result};
use crate::files::{read_file, read_json, write_file, write_json};
use crate::model::{HeadId, ModelConfig, SteeringEntry, SteeringSpec};

pub const BUNDLE_MANIFEST_FILE: &str = "manifest.json";
pub const VECTORS_FILE: &str = "vectors.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub alpha: f64,
    pub beta: f64,
    pub s: usize,
    #[serde(default)]
    pub direction_normalization: DirectionNormalization,
    pub lambda: f64,
    pub tau: f64,
}

impl Hyperparams {
    pub fn defaults_for(method: Method) -> Self {
        let (alpha, beta) = match method {
            Method::Probe => (60.0, 0.45),
            Method::Prototype => (40.0, 0.5),
        };
        Self {
            alpha,
            beta,
            s: 10,
            direction_normalization: DirectionNormalization::Unit,
            lambda: DEFAULT_LAMBDA,
            tau: DEFAULT_TAU,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!(
                "beta must lie in [0, 1], got {}",
                self.beta
            )));
        }
        if self.s == 0 {
            return Err(Error::Config("s must be at least 1".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SteeringBundle {
    pub method: Method,
    pub heads: Vec<HeadClassifier>,
    pub hyperparams: Hyperparams,
    pub split_seed: u64,
    pub model_fingerprint: String,
    directions: Vec<Vec<f32>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeadEntry {
    layer: usize,
    head: usize,
    validation_accuracy: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    degenerate: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    method: Method,
    k: usize,
    d_head: usize,
    hyperparams: Hyperparams,
    heads: Vec<HeadEntry>,
    split_seed: u64,
    model_fingerprint: String,
}

impl SteeringBundle {
    pub fn new(
        method: Method,
        heads: Vec<HeadClassifier>,
        hyperparams: Hyperparams,
        split_seed: u64,
        model_fingerprint: String,
    ) -> Result<Self> {
        hyperparams.validate()?;
        let d_head = heads
            .first()
            .map(HeadClassifier::d_head)
            .ok_or_else(|| Error::Precondition("a bundle needs at least one head".into()))?;
        for (i, c) in heads.iter().enumerate() {
            if c.method() != method {
                return Err(Error::Precondition(format!(
                    "{} classifier in a {method:?} bundle",
                    c.head()
                )));
            }
            if c.d_head() != d_head {
                return Err(Error::Shape(format!("{} has a different d_head", c.head())));
            }
            if heads[..i].iter().any(|o| o.head() == c.head()) {
                return Err(Error::Precondition(format!("{} listed twice", c.head())));
            }
        }
        let directions = heads
            .iter()
            .map(|c| {
                if c.is_degenerate() {
                    Ok(vec![0.0; d_head])
                } else {
                    c.steering_direction(hyperparams.direction_normalization)
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            method,
            heads,
            hyperparams,
            split_seed,
            model_fingerprint,
            directions,
        })
    }

    pub fn k(&self) -> usize {
        self.heads.len()
    }

    pub fn d_head(&self) -> usize {
        self.heads[0].d_head()
    }

    pub fn head_ids(&self) -> Vec<HeadId> {
        self.heads.iter().map(HeadClassifier::head).collect()
    }

    /// Steering direction per listed head, after normalization.
    pub fn directions(&self) -> &[Vec<f32>] {
        &self.directions
    }

    /// Every listed head steered along its direction at `strength`.
    pub fn steering(&self, strength: f32) -> Result<SteeringSpec> {
        SteeringSpec::new(
            self.heads
                .iter()
                .zip(&self.directions)
                .map(|(c, d)| SteeringEntry {
                    head: c.head(),
                    direction: d.clone(),
                    strength,
                })
                .collect(),
        )
    }

    pub fn with_hyperparams(&self, hyperparams: Hyperparams) -> Result<Self> {
        Self::new(
            self.method,
            self.heads.clone(),
            hyperparams,
            self.split_seed,
            self.model_fingerprint.clone(),
        )
    }

    pub fn check_model(&self, config: &ModelConfig) -> Result<()> {
        let fp = config.fingerprint();
        if fp != self.model_fingerprint {
            return Err(Error::FingerprintMismatch {
                bundle: self.model_fingerprint.clone(),
                backend: fp,
            });
        }
        for c in &self.heads {
            config.check_head(c.head())?;
        }
        if self.d_head() != config.d_head {
            return Err(Error::Shape(format!(
                "bundle d_head {} does not match model d_head {}",
                self.d_head(),
                config.d_head
            )));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            method: self.method,
            k: self.k(),
            d_head: self.d_head(),
            hyperparams: self.hyperparams.clone(),
            heads: self
                .heads
                .iter()
                .map(|c| HeadEntry {
                    layer: c.head().layer,
                    head: c.head().head,
                    validation_accuracy: c.validation_accuracy(),
                    degenerate: c.is_degenerate(),
                })
                .collect(),
            split_seed: self.split_seed,
            model_fingerprint: self.model_fingerprint.clone(),
        };
        let mut bytes = Vec::new();
        for c in &self.heads {
            for x in c.parameters() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        write_json(&dir.join(BUNDLE_MANIFEST_FILE), &manifest)?;
        write_file(&dir.join(VECTORS_FILE), &bytes)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(BUNDLE_MANIFEST_FILE);
        let m: Manifest = read_json(&manifest_path)?;
        if m.k != m.heads.len() {
            return Err(Error::malformed(
                &manifest_path,
                format!("k = {} but {} heads listed", m.k, m.heads.len()),
            ));
        }
        let vectors_path = dir.join(VECTORS_FILE);
        let bytes = read_file(&vectors_path)?;
        let per_head = match m.method {
            Method::Probe => m.d_head,
            Method::Prototype => 2 * m.d_head,
        };
        if bytes.len() != m.k * per_head * 4 {
            return Err(Error::malformed(
                &vectors_path,
                format!(
                    "expected {} bytes for {} heads, found {}",
                    m.k * per_head * 4,
                    m.k,
                    bytes.len()
                ),
            ));
        }
        let floats: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let heads = m
            .heads
            .iter()
            .zip(floats.chunks_exact(per_head))
            .map(|(e, params)| {
                let head = HeadId::new(e.layer, e.head);
                match m.method {
                    Method::Probe => HeadClassifier::Probe(ProbeClassifier {
                        head,
                        theta: params.to_vec(),
                        validation_accuracy: e.validation_accuracy,
                        degenerate: e.degenerate,
                    }),
                    Method::Prototype => HeadClassifier::Prototype(PrototypeClassifier {
                        head,
                        proto_pos: params[..m.d_head].to_vec(),
                        proto_neg: params[m.d_head..].to_vec(),
                        temperature: m.hyperparams.tau,
                        validation_accuracy: e.validation_accuracy,
                        degenerate: e.degenerate,
                    }),
                }
            })
            .collect();
        Self::new(
            m.method,
            heads,
            m.hyperparams,
            m.split_seed,
            m.model_fingerprint,
        )
        .map_err(|e| Error::malformed(&manifest_path, e.to_string()))
    }
}
