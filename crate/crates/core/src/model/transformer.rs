//! Single-sequence f32 reference transformer.
//!
//! Pre-layer-norm blocks: `x += MHSA(LN1(x))`, `x += MLP(LN2(x))`, then a
//! final layer norm and the unembedding. All reductions run left to right
//! in a fixed order on one thread, so identical inputs produce identical bits.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use super::{
    check_prompt, Backend, HeadId, KvCache, ModelConfig, PositionalEncoding, Session, SteeringSpec,
    StepOutput, TokenId, Weights,
};
use crate::error::{Error, Result};

const LN_EPS: f32 = 1e-5;

/// Immutable model: config plus weights. Share it behind an `Arc`.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    weights: Weights,
    positions: Vec<f32>,
}

/// Per-layer internals of one forward pass, for inspection in tests and tools.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardTrace {
    /// Concatenated head outputs before steering, one row per layer.
    pub head_outputs_raw: Vec<Vec<f32>>,
    /// Concatenated head outputs as fed to `W_O` (steering included).
    pub head_outputs: Vec<Vec<f32>>,
    /// MHSA output `concat(...) W_O` per layer.
    pub attention_outputs: Vec<Vec<f32>>,
}

impl Model {
    pub fn new(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        weights.check_shapes(&config)?;
        let positions = match (&config.positional_encoding, &weights.position_embedding) {
            (PositionalEncoding::Learned, Some(table)) => table.clone(),
            (PositionalEncoding::Sinusoidal, None) => {
                sinusoidal_table(config.max_seq_len, config.d_model)
            }
            _ => unreachable!("checked by check_shapes"),
        };
        Ok(Self {
            config,
            weights,
            positions,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (config, weights) = Weights::load(dir)?;
        Self::new(config, weights)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(
            self.config.n_layers,
            self.config.d_model,
            self.config.max_seq_len,
        )
    }

    /// Run `token` at position `cache.len()`, appending its keys and values.
    pub fn forward(
        &self,
        cache: &mut KvCache,
        token: TokenId,
        steering: &SteeringSpec,
        taps: &[HeadId],
        mut trace: Option<&mut ForwardTrace>,
    ) -> Result<StepOutput> {
        let cfg = &self.config;
        let pos = cache.len();
        if pos + 1 > cfg.max_seq_len {
            return Err(Error::SequenceOverflow {
                needed: pos + 1,
                max: cfg.max_seq_len,
            });
        }
        if token as usize >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange {
                token,
                vocab_size: cfg.vocab_size,
            });
        }
        steering.validate(cfg)?;
        for &h in taps {
            cfg.check_head(h)?;
        }

        let d = cfg.d_model;
        let dh = cfg.d_head;
        let w = &self.weights;

        let mut x: Vec<f32> = w.token_embedding[token as usize * d..(token as usize + 1) * d]
            .iter()
            .zip(&self.positions[pos * d..(pos + 1) * d])
            .map(|(t, p)| t + p)
            .collect();

        let mut head_activations = BTreeMap::new();
        let scale = 1.0 / (dh as f32).sqrt();
        let mut a = vec![0.0f32; d];
        let mut q = vec![0.0f32; d];
        let mut k = vec![0.0f32; d];
        let mut v = vec![0.0f32; d];
        let mut z = vec![0.0f32; d];
        let mut attn = vec![0.0f32; d];
        let mut hidden = vec![0.0f32; cfg.d_ff];
        let mut mlp = vec![0.0f32; d];
        let mut scores = Vec::with_capacity(pos + 1);

        for (li, layer) in w.layers.iter().enumerate() {
            layer_norm(&x, &layer.ln1_weight, &layer.ln1_bias, &mut a);
            matvec(&a, &layer.wq, &mut q);
            matvec(&a, &layer.wk, &mut k);
            matvec(&a, &layer.wv, &mut v);
            cache.push(li, &k, &v);
            let (keys, values) = cache.layer(li);
            let n = pos + 1;

            for h in 0..cfg.n_heads {
                let off = h * dh;
                let qh = &q[off..off + dh];
                scores.clear();
                for t in 0..n {
                    let kt = &keys[t * d + off..t * d + off + dh];
                    scores.push(dot(qh, kt) * scale);
                }
                softmax_in_place(&mut scores);
                let zh = &mut z[off..off + dh];
                zh.fill(0.0);
                for (t, &p) in scores.iter().enumerate() {
                    let vt = &values[t * d + off..t * d + off + dh];
                    for (o, &vv) in zh.iter_mut().zip(vt) {
                        *o += p * vv;
                    }
                }
            }

            if let Some(tr) = trace.as_deref_mut() {
                tr.head_outputs_raw.push(z.clone());
            }
            for entry in steering.entries().iter().filter(|e| e.head.layer == li) {
                let off = entry.head.head * dh;
                for (o, &dir) in z[off..off + dh].iter_mut().zip(&entry.direction) {
                    *o += entry.strength * dir;
                }
            }
            for &tap in taps.iter().filter(|t| t.layer == li) {
                let off = tap.head * dh;
                head_activations.insert(tap, z[off..off + dh].to_vec());
            }

            matvec(&z, &layer.wo, &mut attn);
            if let Some(tr) = trace.as_deref_mut() {
                tr.head_outputs.push(z.clone());
                tr.attention_outputs.push(attn.clone());
            }
            for (xi, ai) in x.iter_mut().zip(&attn) {
                *xi += ai;
            }

            layer_norm(&x, &layer.ln2_weight, &layer.ln2_bias, &mut a);
            matvec(&a, &layer.w_in, &mut hidden);
            for (hv, b) in hidden.iter_mut().zip(&layer.b_in) {
                *hv = gelu(*hv + b);
            }
            matvec(&hidden, &layer.w_out, &mut mlp);
            for ((xi, mi), b) in x.iter_mut().zip(&mlp).zip(&layer.b_out) {
                *xi += mi + b;
            }
        }
        cache.commit();

        layer_norm(&x, &w.lnf_weight, &w.lnf_bias, &mut a);
        let mut logits = vec![0.0f32; cfg.vocab_size];
        matvec(&a, &w.unembedding, &mut logits);
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::Degenerate(
                "forward pass produced non-finite logits".into(),
            ));
        }
        Ok(StepOutput {
            logits,
            head_activations,
        })
    }
}

/// `out = x · W` for row-major `W` of shape `[x.len(), out.len()]`.
pub(crate) fn matvec(x: &[f32], w: &[f32], out: &mut [f32]) {
    let n = out.len();
    debug_assert_eq!(w.len(), x.len() * n);
    out.fill(0.0);
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * n..(i + 1) * n];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn softmax_in_place(xs: &mut [f32]) {
    let max = xs.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x));
    let mut sum = 0.0f32;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

fn layer_norm(x: &[f32], weight: &[f32], bias: &[f32], out: &mut [f32]) {
    let n = x.len() as f32;
    let mut mean = 0.0f32;
    for &xi in x {
        mean += xi;
    }
    mean /= n;
    let mut var = 0.0f32;
    for &xi in x {
        let c = xi - mean;
        var += c * c;
    }
    var /= n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for (((o, &xi), &g), &b) in out.iter_mut().zip(x).zip(weight).zip(bias) {
        *o = (xi - mean) * inv * g + b;
    }
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn sinusoidal_table(max_len: usize, d: usize) -> Vec<f32> {
    let mut table = vec![0.0f32; max_len * d];
    for pos in 0..max_len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
            table[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() } as f32;
        }
    }
    table
}

/// In-process backend over shared weights.
#[derive(Clone, Debug)]
pub struct LocalBackend {
    model: Arc<Model>,
}

impl LocalBackend {
    pub fn new(model: Arc<Model>) -> Self {
        Self { model }
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }
}

impl From<Model> for LocalBackend {
    fn from(model: Model) -> Self {
        Self::new(Arc::new(model))
    }
}

#[derive(Clone, Debug)]
pub struct LocalSession {
    model: Arc<Model>,
    cache: KvCache,
    tokens: Vec<TokenId>,
    taps: Vec<HeadId>,
}

impl LocalSession {
    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    pub fn taps(&self) -> &[HeadId] {
        &self.taps
    }

    /// [`Session::step`] that also records per-layer internals.
    pub fn step_traced(
        &mut self,
        token: TokenId,
        steering: &SteeringSpec,
    ) -> Result<(StepOutput, ForwardTrace)> {
        let mut trace = ForwardTrace::default();
        let out = self.model.forward(
            &mut self.cache,
            token,
            steering,
            &self.taps,
            Some(&mut trace),
        )?;
        self.tokens.push(token);
        Ok((out, trace))
    }
}

impl Session for LocalSession {
    fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    fn step(&mut self, token: TokenId, steering: &SteeringSpec) -> Result<StepOutput> {
        let out = self
            .model
            .forward(&mut self.cache, token, steering, &self.taps, None)?;
        self.tokens.push(token);
        Ok(out)
    }

    fn truncate(&mut self, len: usize) -> Result<()> {
        if len > self.tokens.len() {
            return Err(Error::Precondition(format!(
                "cannot truncate to {len}, only {} positions cached",
                self.tokens.len()
            )));
        }
        self.cache.truncate(len);
        self.tokens.truncate(len);
        Ok(())
    }
}

impl Backend for LocalBackend {
    type Session = LocalSession;

    fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    fn prime(&self, prompt: &[TokenId], taps: &[HeadId]) -> Result<(LocalSession, StepOutput)> {
        check_prompt(&self.model.config, prompt)?;
        for &h in taps {
            self.model.config.check_head(h)?;
        }
        let mut taps = taps.to_vec();
        taps.sort();
        taps.dedup();
        let mut session = LocalSession {
            model: Arc::clone(&self.model),
            cache: self.model.new_cache(),
            tokens: Vec::with_capacity(self.model.config.max_seq_len),
            taps,
        };
        let none = SteeringSpec::none();
        let mut last = None;
        for &t in prompt {
            last = Some(session.step(t, &none)?);
        }
        Ok((session, last.expect("prompt is non-empty")))
    }
}
