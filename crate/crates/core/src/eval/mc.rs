//! Multiple-choice scoring.
//!
//! A choice's score is the mean per-token log-likelihood of its tokens given
//! the question, decoded by the controller with the choice tokens forced, so
//! steered modes track and intervene exactly as they do in generation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchoring::SteeringBundle;
use crate::controller::{generate_with, ControllerConfig, ForcedTokens, Generation};
use crate::datasets::McItem;
use crate::error::{Error, Result};
use crate::model::{Backend, TokenId};
use crate::vocab::Tokenizer;

pub const SCORING_CONVENTION: &str =
    "mean per-token log-likelihood of the choice given the question";

/// Forced decoding of `choice` after `question`.
pub fn force_choice<B: Backend>(
    backend: &B,
    bundle: &SteeringBundle,
    config: &ControllerConfig,
    question: &[TokenId],
    choice: &[TokenId],
) -> Result<Generation> {
    if choice.is_empty() {
        return Err(Error::Precondition("choice has no tokens".into()));
    }
    let mut cfg = config.clone();
    cfg.max_tokens = choice.len();
    cfg.stop_tokens.clear();
    let generation = generate_with(
        backend,
        bundle,
        &cfg,
        question,
        &mut ForcedTokens(choice.to_vec()),
    )?;
    debug_assert_eq!(generation.tokens, choice);
    Ok(generation)
}

pub fn score_choice<B: Backend>(
    backend: &B,
    bundle: &SteeringBundle,
    config: &ControllerConfig,
    question: &[TokenId],
    choice: &[TokenId],
) -> Result<f64> {
    let g = force_choice(backend, bundle, config, question, choice)?;
    Ok(g.log_probs.iter().sum::<f64>() / g.log_probs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub scores: Vec<f64>,
    pub correct: Vec<usize>,
    pub best_index: Option<usize>,
}

impl ScoredItem {
    fn is_correct(&self, i: usize) -> bool {
        self.correct.contains(&i)
    }
}

pub fn score_item<B: Backend, T: Tokenizer>(
    backend: &B,
    bundle: &SteeringBundle,
    config: &ControllerConfig,
    tokenizer: &T,
    item: &McItem,
) -> Result<ScoredItem> {
    item.validate().map_err(Error::Precondition)?;
    let question = tokenizer.encode(&item.question)?;
    let scores = item
        .choices
        .iter()
        .map(|c| score_choice(backend, bundle, config, &question, &tokenizer.encode(c)?))
        .collect::<Result<_>>()?;
    Ok(ScoredItem {
        scores,
        correct: item.correct.clone(),
        best_index: item.best_index,
    })
}

pub fn score_items<B, T>(
    backend: &B,
    bundle: &SteeringBundle,
    config: &ControllerConfig,
    tokenizer: &T,
    items: &[McItem],
) -> Result<Vec<ScoredItem>>
where
    B: Backend + Sync,
    T: Tokenizer + Sync,
{
    items
        .par_iter()
        .map(|item| score_item(backend, bundle, config, tokenizer, item))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McMetrics {
    /// Absent when some item has no `best_index`.
    pub mc1: Option<f64>,
    pub mc2: f64,
    pub mc3: f64,
}

fn mean(items: &[ScoredItem], f: impl Fn(&ScoredItem) -> f64) -> f64 {
    items.iter().map(f).sum::<f64>() / items.len() as f64
}

fn check(items: &[ScoredItem]) -> Result<()> {
    if items.is_empty() {
        return Err(Error::Precondition("no scored items".into()));
    }
    Ok(())
}

/// Fraction of items whose best answer strictly outscores every other choice.
pub fn mc1(items: &[ScoredItem]) -> Result<f64> {
    check(items)?;
    let mut hits = 0usize;
    for (n, item) in items.iter().enumerate() {
        let b = item
            .best_index
            .ok_or_else(|| Error::Precondition(format!("item {n} has no best_index")))?;
        let best = item.scores[b];
        if item
            .scores
            .iter()
            .enumerate()
            .all(|(i, &s)| i == b || best > s)
        {
            hits += 1;
        }
    }
    Ok(hits as f64 / items.len() as f64)
}

/// Mean normalized probability mass on the correct choices.
pub fn mc2(items: &[ScoredItem]) -> Result<f64> {
    check(items)?;
    Ok(mean(items, |item| {
        let m = item
            .scores
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut correct = 0.0;
        let mut total = 0.0;
        for (i, &s) in item.scores.iter().enumerate() {
            let e = (s - m).exp();
            total += e;
            if item.is_correct(i) {
                correct += e;
            }
        }
        correct / total
    }))
}

/// Mean fraction of correct choices scoring above every incorrect one.
pub fn mc3(items: &[ScoredItem]) -> Result<f64> {
    check(items)?;
    Ok(mean(items, |item| {
        let max_incorrect = item
            .scores
            .iter()
            .enumerate()
            .filter(|(i, _)| !item.is_correct(*i))
            .map(|(_, &s)| s)
            .fold(f64::NEG_INFINITY, f64::max);
        let above = item
            .correct
            .iter()
            .filter(|&&i| item.scores[i] > max_incorrect)
            .count();
        above as f64 / item.correct.len() as f64
    }))
}

pub fn mc_metrics(items: &[ScoredItem]) -> Result<McMetrics> {
    let has_best = items.iter().all(|i| i.best_index.is_some());
    Ok(McMetrics {
        mc1: if has_best { Some(mc1(items)?) } else { None },
        mc2: mc2(items)?,
        mc3: mc3(items)?,
    })
}
