//! Tracked generation with backtracking and steered regeneration.
//!
//! Generated tokens are indexed from 1. Steering "token `m`" means steering
//! the forward pass whose logits decode token `m`, which is the pass over
//! token `m - 1` (the last prompt token when `m = 1`). After a rollback that
//! keeps `keep` tokens, the pass over the last kept token is therefore
//! recomputed with steering before decoding resumes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchoring::SteeringBundle;
use crate::error::{Error, Result};
use crate::model::{
    log_softmax, Backend, Decoder, DecodingPolicy, GenerationSession, HeadId, SteeringSpec,
    StepOutput, TokenId,
};

pub const DEFAULT_MAX_TOKENS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Track, back off `s` tokens on detection, regenerate steered at `p * alpha`.
    Fasb,
    /// As `Fasb`, but regenerate the whole response.
    Btb,
    /// Finish unsteered, judge the final token, regenerate everything if deviant.
    Gcbb,
    /// Steer every token at `alpha`, no gate.
    FixedAll,
    /// As `Fasb` with strength `alpha`.
    NoAdaptive,
    /// As `Fasb` without the rollback; steering starts after the detected token.
    NoBacktrack,
    /// Gate once on the last prompt token.
    QuestionGate,
    None,
}

impl Mode {
    pub const ALL: [Mode; 8] = [
        Mode::Fasb,
        Mode::Btb,
        Mode::Gcbb,
        Mode::FixedAll,
        Mode::NoAdaptive,
        Mode::NoBacktrack,
        Mode::QuestionGate,
        Mode::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Fasb => "fasb",
            Mode::Btb => "btb",
            Mode::Gcbb => "gcbb",
            Mode::FixedAll => "fixed_all",
            Mode::NoAdaptive => "no_adaptive",
            Mode::NoBacktrack => "no_backtrack",
            Mode::QuestionGate => "question_gate",
            Mode::None => "none",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Mode::ALL.iter().map(|m| m.as_str()).collect();
                Error::Config(format!(
                    "unknown mode {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub mode: Mode,
    pub alpha: f64,
    pub beta: f64,
    pub s: usize,
    pub max_tokens: usize,
    #[serde(default)]
    pub stop_tokens: BTreeSet<TokenId>,
    #[serde(default)]
    pub decoding: DecodingPolicy,
}

impl ControllerConfig {
    /// `alpha`, `beta` and `s` from the bundle, greedy decoding, no stop tokens.
    pub fn from_bundle(bundle: &SteeringBundle, mode: Mode) -> Self {
        Self {
            mode,
            alpha: bundle.hyperparams.alpha,
            beta: bundle.hyperparams.beta,
            s: bundle.hyperparams.s,
            max_tokens: DEFAULT_MAX_TOKENS,
            stop_tokens: BTreeSet::new(),
            decoding: DecodingPolicy::Greedy,
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
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be at least 1".into()));
        }
        if let DecodingPolicy::Sample { temperature, .. } = self.decoding {
            if !(temperature.is_finite() && temperature > 0.0) {
                return Err(Error::Config(format!(
                    "temperature must be positive, got {temperature}"
                )));
            }
        }
        Ok(())
    }
}

/// Mean of `1 - p_desired` over the bundle's heads.
pub fn deviation_probability(
    bundle: &SteeringBundle,
    tapped: &BTreeMap<HeadId, Vec<f32>>,
) -> Result<f64> {
    let mut sum = 0.0;
    for c in &bundle.heads {
        let x = tapped
            .get(&c.head())
            .ok_or_else(|| Error::Shape(format!("no activation tapped for {}", c.head())))?;
        sum += 1.0 - c.classify(x)?;
    }
    Ok(sum / bundle.k() as f64)
}

/// `p * alpha` when `p > beta`, else 0.
pub fn intervention_strength(p: f64, alpha: f64, beta: f64) -> f64 {
    if p > beta {
        p * alpha
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trigger {
    /// Generated-token index the decision was made at; 0 means before the
    /// first generated token.
    pub index: usize,
    /// Deviation probability behind the decision, absent when no gate ran.
    pub probability: Option<f64>,
    pub strength: f64,
    /// First generated index produced under steering.
    pub regen_start: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DeviationTrace {
    /// `probabilities[j - 1]` is the deviation after generated token `j`.
    /// Values recorded before a rollback are kept.
    pub probabilities: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_probability: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_probability: Option<f64>,
    pub trigger: Option<Trigger>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    /// Log-probability of each output token under the logits it was decoded from.
    pub log_probs: Vec<f64>,
    pub trace: DeviationTrace,
    /// Generated tokens thrown away by rollback.
    pub regenerated_tokens: usize,
    /// Every token decoded, discarded ones included.
    pub decoded_tokens: usize,
}

/// Chooses the token at each generated index.
pub trait TokenSource {
    /// Token for generated index `index` (1-based), or `None` to stop.
    fn next(&mut self, index: usize, logits: &[f32]) -> Option<TokenId>;
}

impl TokenSource for Decoder {
    fn next(&mut self, _index: usize, logits: &[f32]) -> Option<TokenId> {
        Some(Decoder::next(self, logits))
    }
}

/// Replays a fixed continuation, whatever the logits say.
#[derive(Clone, Debug)]
pub struct ForcedTokens(pub Vec<TokenId>);

impl TokenSource for ForcedTokens {
    fn next(&mut self, index: usize, _logits: &[f32]) -> Option<TokenId> {
        self.0.get(index - 1).copied()
    }
}

struct Run<'a, S: crate::model::Session, T> {
    session: GenerationSession<S>,
    source: &'a mut T,
    config: &'a ControllerConfig,
    bundle: &'a SteeringBundle,
    log_probs: Vec<f64>,
    decoded: usize,
}

impl<S: crate::model::Session, T: TokenSource> Run<'_, S, T> {
    fn last(&self) -> &StepOutput {
        self.session
            .last_output()
            .expect("a forward pass precedes every decode")
    }

    fn stopped(&self) -> bool {
        self.session
            .generated()
            .last()
            .is_some_and(|t| self.config.stop_tokens.contains(t))
    }

    /// Decode one token and run it through the model. `Ok(None)` once the
    /// response is complete.
    fn emit(&mut self, steering: &SteeringSpec) -> Result<Option<usize>> {
        let j = self.session.generated_count();
        if j >= self.config.max_tokens || self.stopped() {
            return Ok(None);
        }
        let logits = &self
            .session
            .last_output()
            .expect("a forward pass precedes every decode")
            .logits;
        let Some(token) = self.source.next(j + 1, logits) else {
            return Ok(None);
        };
        if token as usize >= logits.len() {
            return Err(Error::TokenOutOfRange {
                token,
                vocab_size: logits.len(),
            });
        }
        let lp = log_softmax(logits)[token as usize];
        self.session.step(token, steering)?;
        self.log_probs.truncate(j);
        self.log_probs.push(lp);
        self.decoded += 1;
        Ok(Some(j + 1))
    }

    fn deviation(&self) -> Result<f64> {
        deviation_probability(self.bundle, &self.last().head_activations)
    }

    fn finish(&mut self, steering: &SteeringSpec) -> Result<()> {
        while self.emit(steering)?.is_some() {}
        Ok(())
    }

    fn restart(&mut self, keep: usize, steering: &SteeringSpec) -> Result<()> {
        self.session.rollback(keep)?;
        self.log_probs.truncate(keep);
        self.session.resteer_last(steering)?;
        Ok(())
    }
}

/// Generate with the configured decoding policy.
pub fn generate<B: Backend>(
    backend: &B,
    bundle: &SteeringBundle,
    config: &ControllerConfig,
    prompt: &[TokenId],
) -> Result<Generation> {
    let mut decoder = Decoder::new(config.decoding);
    generate_with(backend, bundle, config, prompt, &mut decoder)
}

pub fn generate_with<B: Backend, T: TokenSource>(
    backend: &B,
    bundle: &SteeringBundle,
    config: &ControllerConfig,
    prompt: &[TokenId],
    source: &mut T,
) -> Result<Generation> {
    config.validate()?;
    bundle.check_model(backend.config())?;
    let fp = backend.fingerprint();
    if fp != bundle.model_fingerprint {
        return Err(Error::FingerprintMismatch {
            bundle: bundle.model_fingerprint.clone(),
            backend: fp,
        });
    }
    let max = backend.config().max_seq_len;
    if prompt.len() + config.max_tokens > max {
        return Err(Error::SequenceOverflow {
            needed: prompt.len() + config.max_tokens,
            max,
        });
    }

    let session = GenerationSession::prime(backend, prompt, &bundle.head_ids())?;
    let mut run = Run {
        session,
        source,
        config,
        bundle,
        log_probs: Vec::new(),
        decoded: 0,
    };
    let mut trace = DeviationTrace::default();
    let mut regenerated = 0;
    let (alpha, beta) = (config.alpha, config.beta);
    let steer = |r: f64| bundle.steering(r as f32);

    match config.mode {
        Mode::None => {
            while run.emit(&SteeringSpec::none())?.is_some() {
                trace.probabilities.push(run.deviation()?);
            }
        }
        Mode::FixedAll => {
            let spec = steer(alpha)?;
            run.session.resteer_last(&spec)?;
            trace.trigger = Some(Trigger {
                index: 0,
                probability: None,
                strength: alpha,
                regen_start: 1,
            });
            while run.emit(&spec)?.is_some() {
                trace.probabilities.push(run.deviation()?);
            }
        }
        Mode::QuestionGate => {
            let q = run.deviation()?;
            trace.question_probability = Some(q);
            let spec = if q > beta {
                let r = intervention_strength(q, alpha, beta);
                trace.trigger = Some(Trigger {
                    index: 0,
                    probability: Some(q),
                    strength: r,
                    regen_start: 1,
                });
                let spec = steer(r)?;
                run.session.resteer_last(&spec)?;
                spec
            } else {
                SteeringSpec::none()
            };
            while run.emit(&spec)?.is_some() {
                trace.probabilities.push(run.deviation()?);
            }
        }
        Mode::Gcbb => {
            run.finish(&SteeringSpec::none())?;
            let p = run.deviation()?;
            trace.final_probability = Some(p);
            if p > beta {
                let j = run.session.generated_count();
                let r = intervention_strength(p, alpha, beta);
                trace.trigger = Some(Trigger {
                    index: j,
                    probability: Some(p),
                    strength: r,
                    regen_start: 1,
                });
                regenerated = j;
                run.restart(0, &steer(r)?)?;
                run.finish(&steer(r)?)?;
            }
        }
        Mode::Fasb | Mode::Btb | Mode::NoAdaptive | Mode::NoBacktrack => {
            while let Some(j) = run.emit(&SteeringSpec::none())? {
                let p = run.deviation()?;
                trace.probabilities.push(p);
                if j < config.s || p <= beta {
                    continue;
                }
                let r = match config.mode {
                    Mode::NoAdaptive => alpha,
                    _ => intervention_strength(p, alpha, beta),
                };
                let keep = match config.mode {
                    Mode::Btb => 0,
                    Mode::NoBacktrack => j,
                    _ => j - config.s,
                };
                trace.trigger = Some(Trigger {
                    index: j,
                    probability: Some(p),
                    strength: r,
                    regen_start: keep + 1,
                });
                regenerated = j - keep;
                let spec = steer(r)?;
                run.restart(keep, &spec)?;
                run.finish(&spec)?;
                break;
            }
        }
    }

    Ok(Generation {
        tokens: run.session.generated().to_vec(),
        log_probs: run.log_probs,
        trace,
        regenerated_tokens: regenerated,
        decoded_tokens: run.decoded,
    })
}

/// `config` for prompt `index` of a batch: a sampling seed is offset by the
/// index so prompts draw independently.
pub fn config_for_prompt(config: &ControllerConfig, index: usize) -> ControllerConfig {
    let mut cfg = config.clone();
    if let DecodingPolicy::Sample { seed, .. } = &mut cfg.decoding {
        *seed = seed.wrapping_add(index as u64);
    }
    cfg
}

/// Independent runs over many prompts, in parallel.
pub fn generate_batch<B: Backend + Sync>(
    backend: &B,
    bundle: &SteeringBundle,
    config: &ControllerConfig,
    prompts: &[Vec<TokenId>],
) -> Result<Vec<Generation>> {
    prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| generate(backend, bundle, &config_for_prompt(config, i), p))
        .collect()
}

/// One line of generation output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub prompt: String,
    pub output: String,
    pub prompt_ids: Vec<TokenId>,
    pub token_ids: Vec<TokenId>,
    pub mode: Mode,
    pub alpha: f64,
    pub beta: f64,
    pub s: usize,
    pub max_tokens: usize,
    pub trace: DeviationTrace,
    pub regenerated_tokens: usize,
    pub decoded_tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<f64>,
}

impl GenerationRecord {
    pub fn new(
        prompt: String,
        output: String,
        prompt_ids: Vec<TokenId>,
        config: &ControllerConfig,
        generation: Generation,
    ) -> Self {
        Self {
            prompt,
            output,
            prompt_ids,
            token_ids: generation.tokens,
            mode: config.mode,
            alpha: config.alpha,
            beta: config.beta,
            s: config.s,
            max_tokens: config.max_tokens,
            trace: generation.trace,
            regenerated_tokens: generation.regenerated_tokens,
            decoded_tokens: generation.decoded_tokens,
            wall_clock_ms: None,
        }
    }
}
