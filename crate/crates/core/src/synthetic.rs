//! Planted-direction toy transformer and labeled behavior datasets.
//!
//! The residual stream is split into orthogonal zero-mean subspaces: a handful
//! of planted feature directions, a token-noise subspace and a position-noise
//! subspace. Every token embedding and every position embedding has a fixed
//! norm, so the first layer norm is a known constant scale.
//!
//! One head in layer 0 (the designated head) implements the behavior:
//!
//! * its query is constant apart from a component that grows with position;
//! * mode tokens (`<pos>`/`<neg>`) carry a large key matched to the constant
//!   query, so attention from every position concentrates on position 0;
//! * the value of a mode token is `±mode_value · mode_direction`;
//! * drift tokens carry a key matched to the growing query component and a
//!   value of `-drift_value · mode_direction`, so their attention share rises
//!   with position and eventually flips the head's projection negative;
//! * `W_O` routes the head's projection on `mode_direction` into a readout
//!   feature that the unembedding turns into an A-vs-B logit margin.
//!
//! A-tokens win when the projection exceeds `behavior_threshold`; a probe
//! through the origin only sees the flip once the projection reaches zero,
//! which gives mid-generation deviations that are detected a few tokens late.
//!
//! Every other head and both MLPs get small seeded random weights that read
//! and write only the noise subspaces. Mode tokens share one noise vector and
//! all A/B tokens share another, so nothing outside the designated head can
//! tell the modes apart.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::McItem;
use crate::error::{Error, Result};
use crate::model::{
    argmax, GenerationSession, HeadId, LocalBackend, Model, ModelConfig, PositionalEncoding,
    SteeringSpec, TokenId, Weights,
};
use crate::vocab::{Vocab, UNK};

pub const EOS: &str = "<eos>";
pub const MODE_POS: &str = "<pos>";
pub const MODE_NEG: &str = "<neg>";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

const DESIRED_WORDS: [&str; 8] = [
    "true", "yes", "right", "correct", "sure", "valid", "real", "fact",
];
const DEVIANT_WORDS: [&str; 8] = [
    "false", "no", "wrong", "myth", "fake", "bogus", "lie", "error",
];
const PLANTED_DIMS: usize = 8;

/// Default desk-scale architecture.
pub fn default_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 4,
        d_model: 64,
        d_head: 16,
        d_ff: 128,
        vocab_size: 64,
        max_seq_len: 128,
        positional_encoding: PositionalEncoding::Learned,
    }
}

/// Knobs of the planted construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedParams {
    /// Attention logit of the mode token from every query position.
    pub mode_score: f32,
    pub mode_value: f32,
    pub drift_value: f32,
    /// Growth of the drift attention logit per radian of the position ramp.
    pub drift_slope: f32,
    /// Absolute positions at which each drift token's attention logit equals
    /// `mode_score`. One drift token is created per entry.
    pub drift_positions: Vec<usize>,
    pub readout_gain: f32,
    /// Head projection below which deviant tokens outscore desired ones.
    pub behavior_threshold: f32,
    pub base_logit: f32,
    pub readout_noise: f32,
    pub distractor_scale: f32,
    pub mlp_scale: f32,
}

impl Default for PlantedParams {
    fn default() -> Self {
        Self {
            mode_score: 5.0,
            mode_value: 1.0,
            drift_value: 1.5,
            drift_slope: 20.0,
            drift_positions: vec![18, 22, 26, 30],
            readout_gain: 5.0,
            behavior_threshold: 0.3,
            base_logit: 2.0,
            readout_noise: 0.05,
            distractor_scale: 0.3,
            mlp_scale: 0.1,
        }
    }
}

/// Token-id layout of the synthetic vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabPartition {
    pub desired: Vec<TokenId>,
    pub deviant: Vec<TokenId>,
    pub neutral: Vec<TokenId>,
    pub mode_pos: TokenId,
    pub mode_neg: TokenId,
    pub drift: Vec<TokenId>,
    pub eos: TokenId,
    pub unk: TokenId,
}

impl VocabPartition {
    pub fn is_desired(&self, t: TokenId) -> bool {
        self.desired.contains(&t)
    }

    pub fn is_deviant(&self, t: TokenId) -> bool {
        self.deviant.contains(&t)
    }

    /// Fraction of `tokens` drawn from the desired set; 0 for an empty slice.
    pub fn desired_fraction(&self, tokens: &[TokenId]) -> f64 {
        if tokens.is_empty() {
            return 0.0;
        }
        tokens.iter().filter(|&&t| self.is_desired(t)).count() as f64 / tokens.len() as f64
    }
}

/// Sidecar written next to a synthetic model for test oracles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub designated_head: HeadId,
    pub mode_direction: Vec<f32>,
    pub partition: VocabPartition,
    pub params: PlantedParams,
    pub seed: u64,
}

impl GroundTruth {
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::files::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::files::read_json(path)
    }
}

#[derive(Clone, Debug)]
pub struct PlantedModel {
    pub model: Arc<Model>,
    pub vocab: Vocab,
    pub truth: GroundTruth,
}

impl PlantedModel {
    pub fn backend(&self) -> LocalBackend {
        LocalBackend::new(Arc::clone(&self.model))
    }

    pub fn partition(&self) -> &VocabPartition {
        &self.truth.partition
    }

    pub fn designated_head(&self) -> HeadId {
        self.truth.designated_head
    }

    pub fn mode_direction(&self) -> &[f32] {
        &self.truth.mode_direction
    }

    /// Greedy unsteered rollout of `n` tokens.
    pub fn greedy(&self, prompt: &[TokenId], n: usize) -> Result<Vec<TokenId>> {
        self.rollout(prompt, n, &SteeringSpec::none())
    }

    /// Greedy rollout with `steering` applied from the first generated token.
    pub fn rollout(
        &self,
        prompt: &[TokenId],
        n: usize,
        steering: &SteeringSpec,
    ) -> Result<Vec<TokenId>> {
        let backend = self.backend();
        let mut session = GenerationSession::prime(&backend, prompt, &[])?;
        let mut out = Vec::with_capacity(n);
        let mut logits = session.resteer_last(steering)?.logits.clone();
        for _ in 0..n {
            let t = argmax(&logits);
            out.push(t);
            logits = session.step(t, steering)?.logits.clone();
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.model.weights().save(self.model.config(), dir)?;
        self.vocab.save(&dir.join(crate::vocab::VOCAB_FILE))?;
        self.truth.save(&dir.join(GROUND_TRUTH_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let model = Model::load(dir)?;
        let vocab = Vocab::load(&dir.join(crate::vocab::VOCAB_FILE))?;
        let truth = GroundTruth::load(&dir.join(GROUND_TRUTH_FILE))?;
        Ok(Self {
            model: Arc::new(model),
            vocab,
            truth,
        })
    }
}

fn build_vocab(config: &ModelConfig, n_drift: usize) -> Result<(Vocab, VocabPartition)> {
    let mut words: Vec<String> = vec![UNK.into(), EOS.into(), MODE_POS.into(), MODE_NEG.into()];
    words.extend((0..n_drift).map(|i| format!("<drift{}>", i + 1)));
    let first_desired = words.len();
    words.extend(DESIRED_WORDS.iter().map(|w| w.to_string()));
    let first_deviant = words.len();
    words.extend(DEVIANT_WORDS.iter().map(|w| w.to_string()));
    let first_neutral = words.len();
    if config.vocab_size < first_neutral + 4 {
        return Err(Error::Config(format!(
            "vocab_size {} too small for the planted vocabulary (need at least {})",
            config.vocab_size,
            first_neutral + 4
        )));
    }
    let n_neutral = config.vocab_size - first_neutral;
    words.extend((0..n_neutral).map(|i| format!("w{i}")));
    let vocab = Vocab::new(words)?;
    let ids = |range: std::ops::Range<usize>| range.map(|i| i as TokenId).collect::<Vec<_>>();
    let partition = VocabPartition {
        desired: ids(first_desired..first_deviant),
        deviant: ids(first_deviant..first_neutral),
        neutral: ids(first_neutral..config.vocab_size),
        mode_pos: 2,
        mode_neg: 3,
        drift: ids(4..4 + n_drift),
        eos: 1,
        unk: 0,
    };
    Ok((vocab, partition))
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 is kept away from zero
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `n` orthonormal vectors in R^d, orthogonal to everything in `against`.
fn orthonormal(d: usize, n: usize, against: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        for _ in 0..2 {
            for u in against.iter().chain(out.iter()) {
                let c = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= c * y);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            out.push(v);
        }
    }
    out
}

fn combine(basis: &[Vec<f64>], coeffs: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; basis[0].len()];
    for (b, &c) in basis.iter().zip(coeffs) {
        out.iter_mut().zip(b).for_each(|(o, x)| *o += c * x);
    }
    out
}

fn unit_in(basis: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let coeffs: Vec<f64> = basis.iter().map(|_| gaussian(rng)).collect();
    let v = combine(basis, &coeffs);
    let n = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Add `outer(a, b) * scale` into a row-major `[a.len(), cols]` matrix at column offset `col`.
fn add_outer(w: &mut [f32], cols: usize, col: usize, a: &[f64], b: &[f64], scale: f64) {
    for (i, &ai) in a.iter().enumerate() {
        for (j, &bj) in b.iter().enumerate() {
            w[i * cols + col + j] += (ai * bj * scale) as f32;
        }
    }
}

/// Random map from the span of `inputs` into the span of `outputs`, entries ~ N(0, scale²).
fn add_random_map(
    w: &mut [f32],
    cols: usize,
    inputs: &[Vec<f64>],
    outputs: &[Vec<f64>],
    scale: f64,
    rng: &mut ChaCha8Rng,
) {
    for a in inputs {
        let coeffs: Vec<f64> = outputs.iter().map(|_| gaussian(rng) * scale).collect();
        let target = combine(outputs, &coeffs);
        add_outer(w, cols, 0, a, &target, 1.0);
    }
}

/// Unstructured model with uniform weights scaled by `1/sqrt(fan_in)`.
pub fn random_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut w = Weights::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |v: &mut Vec<f32>, scale: f32| {
        v.iter_mut().for_each(|x| *x = rng.gen_range(-scale..scale));
    };
    let d = (config.d_model as f32).sqrt().recip();
    let f = (config.d_ff as f32).sqrt().recip();
    fill(&mut w.token_embedding, 1.0);
    if let Some(p) = w.position_embedding.as_mut() {
        fill(p, 0.5);
    }
    for l in w.layers.iter_mut() {
        for m in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.w_in] {
            fill(m, d);
        }
        fill(&mut l.w_out, f);
        fill(&mut l.b_in, 0.1);
        fill(&mut l.b_out, 0.1);
    }
    fill(&mut w.unembedding, d);
    Model::new(config.clone(), w)
}

pub fn build_planted_model(config: &ModelConfig, seed: u64) -> Result<PlantedModel> {
    build_planted_model_with(config, seed, &PlantedParams::default())
}

pub fn build_planted_model_with(
    config: &ModelConfig,
    seed: u64,
    params: &PlantedParams,
) -> Result<PlantedModel> {
    config.validate()?;
    if config.n_heads < 2 || config.d_head < 8 {
        return Err(Error::Config(
            "planted model needs n_heads >= 2 and d_head >= 8".into(),
        ));
    }
    if config.d_model < PLANTED_DIMS + 16 {
        return Err(Error::Config(format!(
            "planted model needs d_model >= {}",
            PLANTED_DIMS + 16
        )));
    }
    if config.positional_encoding != PositionalEncoding::Learned {
        return Err(Error::Config(
            "planted model needs learned positions".into(),
        ));
    }
    if params.drift_positions.is_empty() {
        return Err(Error::Config(
            "at least one drift position is required".into(),
        ));
    }
    let (vocab, partition) = build_vocab(config, params.drift_positions.len())?;

    let d = config.d_model;
    let dh = config.d_head;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // residual subspaces, all orthogonal to the all-ones vector
    let ones = vec![vec![1.0 / (d as f64).sqrt(); d]];
    let planted = orthonormal(d, PLANTED_DIMS, &ones, &mut rng);
    let [u_bias, u_mode, u_key0, u_keyd, u_doff, u_tsin, u_tcos, u_read] =
        <[Vec<f64>; PLANTED_DIMS]>::try_from(planted.clone()).expect("eight planted dims");
    let free = d - 1 - PLANTED_DIMS;
    let n_tok_noise = free / 2;
    let mut taken = ones.clone();
    taken.extend(planted.iter().cloned());
    let tok_noise = orthonormal(d, n_tok_noise, &taken, &mut rng);
    taken.extend(tok_noise.iter().cloned());
    let pos_noise = orthonormal(d, free - n_tok_noise, &taken, &mut rng);
    let mut noise = tok_noise.clone();
    noise.extend(pos_noise.iter().cloned());

    // head-space directions of the designated head
    let head_dirs = orthonormal(dh, 3, &[], &mut rng);
    let (mode_dir, q_const, q_time) = (&head_dirs[0], &head_dirs[1], &head_dirs[2]);
    let designated = HeadId::new(0, rng.gen_range(0..config.n_heads));

    // embeddings: fixed norms so layer norm in layer 0 is a constant scale
    const TOKEN_NORM: f64 = 2.0;
    const POS_TIME: f64 = 1.0;
    const POS_NOISE: f64 = 1.0;
    let x_norm_sq = TOKEN_NORM * TOKEN_NORM + POS_TIME * POS_TIME + POS_NOISE * POS_NOISE;
    let kappa = 1.0 / (x_norm_sq / d as f64 + 1e-5).sqrt();
    let kappa2 = kappa * kappa;
    let scale = (dh as f64).sqrt();

    let dphi = std::f64::consts::FRAC_PI_2 / config.max_seq_len as f64;
    let time = |p: usize| (p as f64 * dphi).sin();
    let drift_offsets: Vec<f64> = params
        .drift_positions
        .iter()
        .map(|&p| params.drift_slope as f64 * time(p) - params.mode_score as f64)
        .collect();
    let offset_scale = drift_offsets.iter().fold(1.0f64, |m, o| m.max(o.abs()));

    let mode_noise = unit_in(&tok_noise, &mut rng);
    let answer_noise = unit_in(&tok_noise, &mut rng);
    let mut weights = Weights::zeros(config);
    for t in 0..config.vocab_size as TokenId {
        let mut coeffs = vec![0.0; PLANTED_DIMS];
        coeffs[0] = 1.0;
        let noise_dir = if t == partition.mode_pos || t == partition.mode_neg {
            coeffs[1] = if t == partition.mode_pos { 1.0 } else { -1.0 };
            coeffs[2] = 1.0;
            mode_noise.clone()
        } else if let Some(i) = partition.drift.iter().position(|&x| x == t) {
            coeffs[3] = 1.0;
            coeffs[4] = drift_offsets[i] / offset_scale;
            unit_in(&tok_noise, &mut rng)
        } else if partition.is_desired(t) || partition.is_deviant(t) {
            answer_noise.clone()
        } else {
            unit_in(&tok_noise, &mut rng)
        };
        let planted_sq: f64 = coeffs.iter().map(|c| c * c).sum();
        let noise_len = (TOKEN_NORM * TOKEN_NORM - planted_sq).sqrt();
        let mut row = combine(&planted, &coeffs);
        row.iter_mut()
            .zip(&noise_dir)
            .for_each(|(r, n)| *r += noise_len * n);
        for (dst, v) in weights.token_embedding[t as usize * d..(t as usize + 1) * d]
            .iter_mut()
            .zip(row)
        {
            *dst = v as f32;
        }
    }
    let pos_table = weights
        .position_embedding
        .as_mut()
        .expect("learned positions");
    for p in 0..config.max_seq_len {
        let phase = p as f64 * dphi;
        let n = unit_in(&pos_noise, &mut rng);
        for i in 0..d {
            let v =
                POS_TIME * (phase.sin() * u_tsin[i] + phase.cos() * u_tcos[i]) + POS_NOISE * n[i];
            pos_table[p * d + i] = v as f32;
        }
    }

    // designated head, layer 0. With x' = kappa * x after layer norm, a key
    // row w_k gives score kappa^2 <q_row, w_k> / sqrt(d_head).
    let off = designated.head * dh;
    let dist = params.distractor_scale as f64;
    for (li, layer) in weights.layers.iter_mut().enumerate() {
        for h in 0..config.n_heads {
            let head = HeadId::new(li, h);
            let col = h * dh;
            if head == designated {
                continue;
            }
            // distractor: noise in, noise out
            for a in &noise {
                let qrow: Vec<f64> = (0..dh).map(|_| gaussian(&mut rng) * dist).collect();
                let krow: Vec<f64> = (0..dh).map(|_| gaussian(&mut rng) * dist).collect();
                let vrow: Vec<f64> = (0..dh).map(|_| gaussian(&mut rng) * dist).collect();
                add_outer(&mut layer.wq, d, col, a, &qrow, 1.0);
                add_outer(&mut layer.wk, d, col, a, &krow, 1.0);
                add_outer(&mut layer.wv, d, col, a, &vrow, 1.0);
            }
            for i in 0..dh {
                let mut unit = vec![0.0; dh];
                unit[i] = 1.0;
                let coeffs: Vec<f64> = tok_noise
                    .iter()
                    .map(|_| gaussian(&mut rng) * dist)
                    .collect();
                let target = combine(&tok_noise, &coeffs);
                let row = col + i;
                for (j, tv) in target.iter().enumerate() {
                    layer.wo[row * d + j] += *tv as f32;
                }
            }
        }
        let f = config.d_ff;
        let mlp = params.mlp_scale as f64;
        for a in &noise {
            for j in 0..f {
                let g = gaussian(&mut rng) * mlp;
                for (i, ai) in a.iter().enumerate() {
                    layer.w_in[i * f + j] += (ai * g) as f32;
                }
            }
        }
        for b in layer.b_in.iter_mut() {
            *b = (gaussian(&mut rng) * mlp) as f32;
        }
        let mut w_out = vec![0.0f32; f * d];
        let hidden_basis: Vec<Vec<f64>> = (0..f)
            .map(|j| {
                let mut e = vec![0.0; f];
                e[j] = 1.0;
                e
            })
            .collect();
        add_random_map(&mut w_out, d, &hidden_basis, &tok_noise, mlp, &mut rng);
        layer.w_out = w_out;
    }

    let layer0 = &mut weights.layers[0];
    add_outer(&mut layer0.wq, d, off, &u_bias, q_const, 1.0);
    add_outer(&mut layer0.wq, d, off, &u_tsin, q_time, 1.0);
    add_outer(
        &mut layer0.wk,
        d,
        off,
        &u_key0,
        q_const,
        params.mode_score as f64 * scale / kappa2,
    );
    add_outer(
        &mut layer0.wk,
        d,
        off,
        &u_keyd,
        q_time,
        params.drift_slope as f64 * scale / (kappa2 * POS_TIME),
    );
    add_outer(
        &mut layer0.wk,
        d,
        off,
        &u_doff,
        q_const,
        -offset_scale * scale / kappa2,
    );
    add_outer(
        &mut layer0.wv,
        d,
        off,
        &u_mode,
        mode_dir,
        params.mode_value as f64 / kappa,
    );
    add_outer(
        &mut layer0.wv,
        d,
        off,
        &u_keyd,
        mode_dir,
        -params.drift_value as f64 / kappa,
    );
    // W_O: projection on mode_dir -> readout feature
    for i in 0..dh {
        for j in 0..d {
            layer0.wo[(off + i) * d + j] += (mode_dir[i] * u_read[j]) as f32;
        }
    }

    // unembedding: A/B margin = 2 * gain * (projection - behavior_threshold)
    let gain = params.readout_gain as f64;
    let bias_b = 2.0 * gain * params.behavior_threshold as f64;
    let v = config.vocab_size;
    for t in 0..v as TokenId {
        let (read, bias) = if partition.is_desired(t) {
            (gain, params.base_logit as f64)
        } else if partition.is_deviant(t) {
            (-gain, params.base_logit as f64 + bias_b)
        } else {
            continue;
        };
        let noise_dir = unit_in(&noise, &mut rng);
        for i in 0..d {
            let w =
                read * u_read[i] + bias * u_bias[i] + params.readout_noise as f64 * noise_dir[i];
            weights.unembedding[i * v + t as usize] = w as f32;
        }
    }

    let mode_direction: Vec<f32> = mode_dir.iter().map(|&x| x as f32).collect();
    let model = Model::new(config.clone(), weights)?;
    Ok(PlantedModel {
        model: Arc::new(model),
        vocab,
        truth: GroundTruth {
            designated_head: designated,
            mode_direction,
            partition,
            params: params.clone(),
            seed,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BehaviorRecord {
    pub prompt: Vec<TokenId>,
    pub answer: Vec<TokenId>,
    pub label: u8,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BehaviorDataset {
    pub records: Vec<BehaviorRecord>,
}

impl BehaviorRecord {
    /// Prompt followed by answer, the sequence activations are read from.
    pub fn sequence(&self) -> Vec<TokenId> {
        [self.prompt.as_slice(), self.answer.as_slice()].concat()
    }
}

impl BehaviorDataset {
    /// `(prompt + answer, label)` for the records in `splits`.
    pub fn samples(&self, splits: &[Split]) -> Vec<(Vec<TokenId>, u8)> {
        self.records
            .iter()
            .filter(|r| splits.contains(&r.split))
            .map(|r| (r.sequence(), r.label))
            .collect()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &BehaviorRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }
}

fn neutral_prompt(
    lead: TokenId,
    partition: &VocabPartition,
    len: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<TokenId> {
    let mut prompt = vec![lead];
    prompt.extend((0..len).map(|_| *partition.neutral.choose(rng).expect("neutral tokens")));
    prompt
}

/// Roll the planted model under both modes and label each answer by which
/// token set dominates it. Splits are 60/20/20, stratified by mode.
pub fn generate_behavior_dataset(
    planted: &PlantedModel,
    n_samples: usize,
    seed: u64,
) -> Result<BehaviorDataset> {
    if n_samples < 20 {
        return Err(Error::Precondition(format!(
            "need at least 20 samples, got {n_samples}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let part = planted.partition();
    let n_pos = n_samples.div_ceil(2);
    let mut by_mode: [Vec<BehaviorRecord>; 2] = [Vec::new(), Vec::new()];
    for i in 0..n_samples {
        let positive = i < n_pos;
        let lead = if positive {
            part.mode_pos
        } else {
            part.mode_neg
        };
        let prompt_len = rng.gen_range(1..=6);
        let prompt = neutral_prompt(lead, part, prompt_len, &mut rng);
        let answer_len = rng.gen_range(4..=12);
        let answer = planted.greedy(&prompt, answer_len)?;
        let desired = answer.iter().filter(|&&t| part.is_desired(t)).count();
        let deviant = answer.iter().filter(|&&t| part.is_deviant(t)).count();
        let label = u8::from(desired > deviant);
        by_mode[usize::from(positive)].push(BehaviorRecord {
            prompt,
            answer,
            label,
            split: Split::Train,
        });
    }
    let mut records = Vec::with_capacity(n_samples);
    for group in by_mode.iter_mut() {
        group.shuffle(&mut rng);
        let n = group.len();
        let n_train = n * 3 / 5;
        let n_val = n / 5;
        for (i, mut r) in group.drain(..).enumerate() {
            r.split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Validation
            } else {
                Split::Test
            };
            records.push(r);
        }
    }
    records.sort_by_key(|r| r.split);
    Ok(BehaviorDataset { records })
}

/// Prompts `[<pos>, fillers.., <driftN>, fillers..]` whose effective mode
/// flips partway through generation.
pub fn drift_prompts(planted: &PlantedModel, n: usize, seed: u64) -> Vec<Vec<TokenId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let part = planted.partition();
    (0..n)
        .map(|i| {
            let mut prompt = neutral_prompt(part.mode_pos, part, rng.gen_range(1..=4), &mut rng);
            prompt.push(part.drift[i % part.drift.len()]);
            let tail = rng.gen_range(0..=3);
            prompt.extend((0..tail).map(|_| *part.neutral.choose(&mut rng).expect("neutral")));
            prompt
        })
        .collect()
}

/// Multiple-choice items over the planted vocabulary. Questions alternate
/// between `<pos>` and `<neg>` leads; two desired words are correct and two
/// deviant words are not, in shuffled order.
pub fn synthetic_mc_items(planted: &PlantedModel, n: usize, seed: u64) -> Vec<McItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let part = planted.partition();
    let word = |t: TokenId| planted.vocab.token(t).unwrap_or(UNK).to_string();
    (0..n)
        .map(|i| {
            let lead = if i % 2 == 0 {
                part.mode_pos
            } else {
                part.mode_neg
            };
            let question = neutral_prompt(lead, part, rng.gen_range(1..=4), &mut rng);
            let mut choices: Vec<(TokenId, bool)> = part
                .desired
                .choose_multiple(&mut rng, 2)
                .map(|&t| (t, true))
                .chain(
                    part.deviant
                        .choose_multiple(&mut rng, 2)
                        .map(|&t| (t, false)),
                )
                .collect();
            choices.shuffle(&mut rng);
            let correct: Vec<usize> = (0..choices.len()).filter(|&c| choices[c].1).collect();
            McItem {
                question: planted.vocab.decode(&question),
                choices: choices.iter().map(|&(t, _)| word(t)).collect(),
                best_index: Some(correct[0]),
                correct,
            }
        })
        .collect()
}

/// Distinct token ids in `tokens` that are neither desired nor deviant.
pub fn stray_tokens(partition: &VocabPartition, tokens: &[TokenId]) -> BTreeSet<TokenId> {
    tokens
        .iter()
        .copied()
        .filter(|&t| !partition.is_desired(t) && !partition.is_deviant(t))
        .collect()
}
