//! Decoder-only transformer backend contract.
//!
//! A [`Backend`] hands out [`Session`]s: single-owner token streams over an
//! immutable set of weights. Each step returns next-token logits and the
//! pre-output-projection activations of the heads that were tapped when the
//! session was primed. Steering is an additive per-head offset applied to
//! those activations before `W_O`, so taps always observe the steered value.
//!
//! [`GenerationSession`] layers the prompt/generated bookkeeping on top of a
//! raw session, including rollback to a generated prefix.

mod cache;
mod decode;
mod transformer;
mod weights;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use cache::KvCache;
pub use decode::{argmax, log_softmax, Decoder, DecodingPolicy};
pub use transformer::{ForwardTrace, LocalBackend, LocalSession, Model};
pub use weights::{LayerWeights, TensorEntry, Weights};

pub type TokenId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionalEncoding {
    Learned,
    Sinusoidal,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    /// Hidden width of the feed-forward block.
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub positional_encoding: PositionalEncoding,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        if self.d_head * self.n_heads != self.d_model {
            return Err(Error::Config(format!(
                "d_head ({}) * n_heads ({}) != d_model ({})",
                self.d_head, self.n_heads, self.d_model
            )));
        }
        Ok(())
    }

    pub fn n_total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }

    /// Every head in (layer, head) order.
    pub fn all_heads(&self) -> Vec<HeadId> {
        (0..self.n_layers)
            .flat_map(|layer| (0..self.n_heads).map(move |head| HeadId::new(layer, head)))
            .collect()
    }

    pub fn check_head(&self, head: HeadId) -> Result<()> {
        if head.layer >= self.n_layers || head.head >= self.n_heads {
            return Err(Error::Precondition(format!(
                "head {head} outside a {}x{} model",
                self.n_layers, self.n_heads
            )));
        }
        Ok(())
    }

    /// Stable hash of the architecture, used to pair bundles with models.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..16].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// An attention head, ordered by (layer, head).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub const fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SteeringEntry {
    pub head: HeadId,
    pub direction: Vec<f32>,
    pub strength: f32,
}

/// Additive per-head intervention. A head is steered iff it has an entry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SteeringSpec {
    entries: Vec<SteeringEntry>,
}

impl SteeringSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(entries: Vec<SteeringEntry>) -> Result<Self> {
        for (i, entry) in entries.iter().enumerate() {
            if !entry.strength.is_finite() || entry.strength < 0.0 {
                return Err(Error::Precondition(format!(
                    "steering strength for {} must be finite and non-negative, got {}",
                    entry.head, entry.strength
                )));
            }
            if entries[..i].iter().any(|e| e.head == entry.head) {
                return Err(Error::Precondition(format!(
                    "duplicate steering entry for {}",
                    entry.head
                )));
            }
        }
        Ok(Self { entries })
    }

    /// Same direction set, every strength replaced by `strength`.
    pub fn uniform<'a>(
        directions: impl IntoIterator<Item = (HeadId, &'a [f32])>,
        strength: f32,
    ) -> Result<Self> {
        Self::new(
            directions
                .into_iter()
                .map(|(head, direction)| SteeringEntry {
                    head,
                    direction: direction.to_vec(),
                    strength,
                })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[SteeringEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for entry in &self.entries {
            config.check_head(entry.head)?;
            if entry.direction.len() != config.d_head {
                return Err(Error::Shape(format!(
                    "steering direction for {} has length {}, expected d_head = {}",
                    entry.head,
                    entry.direction.len(),
                    config.d_head
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub logits: Vec<f32>,
    /// Tapped pre-`W_O` head outputs at the current position, after steering.
    pub head_activations: BTreeMap<HeadId, Vec<f32>>,
}

/// A single-owner token stream with a rollback-capable cache.
pub trait Session {
    /// Tokens currently held in the cache, prompt included.
    fn tokens(&self) -> &[TokenId];

    fn committed_len(&self) -> usize {
        self.tokens().len()
    }

    /// Append `token` at the next position and run one forward pass.
    fn step(&mut self, token: TokenId, steering: &SteeringSpec) -> Result<StepOutput>;

    /// Drop cached positions beyond `len`.
    fn truncate(&mut self, len: usize) -> Result<()>;
}

pub trait Backend {
    type Session: Session;

    fn config(&self) -> &ModelConfig;

    fn fingerprint(&self) -> String {
        self.config().fingerprint()
    }

    /// Run the prompt and return the session together with the output at the
    /// last prompt token.
    fn prime(&self, prompt: &[TokenId], taps: &[HeadId]) -> Result<(Self::Session, StepOutput)>;
}

pub(crate) fn check_prompt(config: &ModelConfig, prompt: &[TokenId]) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::Precondition(
            "prompt must contain at least one token".into(),
        ));
    }
    if prompt.len() > config.max_seq_len - 1 {
        return Err(Error::SequenceOverflow {
            needed: prompt.len() + 1,
            max: config.max_seq_len,
        });
    }
    if let Some(&token) = prompt.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::TokenOutOfRange {
            token,
            vocab_size: config.vocab_size,
        });
    }
    Ok(())
}

/// Prompt-aware wrapper around a backend session.
///
/// `last` is the output of the most recent forward pass; it is cleared by
/// [`rollback`](Self::rollback) because the cached logits no longer match the
/// tail of the stream.
pub struct GenerationSession<S: Session> {
    inner: S,
    prompt_len: usize,
    last: Option<StepOutput>,
}

impl<S: Session> GenerationSession<S> {
    pub fn prime<B: Backend<Session = S>>(
        backend: &B,
        prompt: &[TokenId],
        taps: &[HeadId],
    ) -> Result<Self> {
        let (inner, out) = backend.prime(prompt, taps)?;
        Ok(Self {
            inner,
            prompt_len: prompt.len(),
            last: Some(out),
        })
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.inner.tokens()[..self.prompt_len]
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.inner.tokens()[self.prompt_len..]
    }

    /// Generated-token count `j`.
    pub fn generated_count(&self) -> usize {
        self.inner.committed_len() - self.prompt_len
    }

    pub fn committed_len(&self) -> usize {
        self.inner.committed_len()
    }

    pub fn last_output(&self) -> Option<&StepOutput> {
        self.last.as_ref()
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }

    pub fn inner_mut(&mut self) -> &mut S {
        &mut self.inner
    }

    pub fn step(&mut self, token: TokenId, steering: &SteeringSpec) -> Result<&StepOutput> {
        let out = self.inner.step(token, steering)?;
        Ok(self.last.insert(out))
    }

    /// Keep the first `keep_generated` generated tokens and drop the rest.
    pub fn rollback(&mut self, keep_generated: usize) -> Result<()> {
        let j = self.generated_count();
        if keep_generated > j {
            return Err(Error::Precondition(format!(
                "cannot keep {keep_generated} generated tokens, only {j} exist"
            )));
        }
        if keep_generated == j {
            return Ok(());
        }
        self.inner.truncate(self.prompt_len + keep_generated)?;
        self.last = None;
        Ok(())
    }

    /// Recompute the forward pass at the last cached position under
    /// `steering`, so the next decoded token comes from steered logits.
    pub fn resteer_last(&mut self, steering: &SteeringSpec) -> Result<&StepOutput> {
        let len = self.inner.committed_len();
        let token = self.inner.tokens()[len - 1];
        self.inner.truncate(len - 1)?;
        self.step(token, steering)
    }

    pub fn into_inner(self) -> S {
        self.inner
    }
}
