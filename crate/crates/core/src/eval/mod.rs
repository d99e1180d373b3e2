//! Metrics, sweeps and CSV reports.

mod mc;
mod sweep;

pub use mc::{
    force_choice, mc1, mc2, mc3, mc_metrics, score_choice, score_item, score_items, McMetrics,
    ScoredItem, SCORING_CONVENTION,
};
pub use sweep::{sweep, EvalReport, Grid, GridPoint, PointMetrics, ReportRow};

use serde::{Deserialize, Serialize};

use crate::anchoring::SteeringBundle;
use crate::controller::{generate_batch, ControllerConfig, DeviationTrace, Generation};
use crate::datasets::McItem;
use crate::error::{Error, Result};
use crate::model::{Backend, TokenId};
use crate::synthetic::VocabPartition;
use crate::vocab::Tokenizer;

/// Trigger counts by generated-token index: `[0, 10)`, `[10, 20)`, `[20, ..)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerHistogram {
    pub early: usize,
    pub middle: usize,
    pub late: usize,
}

impl TriggerHistogram {
    pub fn total(&self) -> usize {
        self.early + self.middle + self.late
    }

    pub fn add(&mut self, position: usize) {
        match position {
            0..=9 => self.early += 1,
            10..=19 => self.middle += 1,
            _ => self.late += 1,
        }
    }
}

pub fn trigger_position_histogram<'a>(
    traces: impl IntoIterator<Item = &'a DeviationTrace>,
) -> TriggerHistogram {
    let mut h = TriggerHistogram::default();
    for t in traces {
        if let Some(trigger) = &t.trigger {
            h.add(trigger.index);
        }
    }
    h
}

/// Mean trigger index over triggered generations.
pub fn mean_trigger_position<'a>(
    traces: impl IntoIterator<Item = &'a DeviationTrace>,
) -> Option<f64> {
    let idx: Vec<usize> = traces
        .into_iter()
        .filter_map(|t| t.trigger.as_ref().map(|x| x.index))
        .collect();
    (!idx.is_empty()).then(|| idx.iter().sum::<usize>() as f64 / idx.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorMetrics {
    pub n: usize,
    /// Mean fraction of desired tokens among generated tokens.
    pub desired_rate: f64,
    pub trigger_rate: f64,
    pub mean_trigger_position: Option<f64>,
    pub mean_regenerated_tokens: f64,
    pub histogram: TriggerHistogram,
}

pub fn behavior_metrics(generations: &[Generation], partition: &VocabPartition) -> BehaviorMetrics {
    let n = generations.len();
    let denom = n.max(1) as f64;
    let traces = || generations.iter().map(|g| &g.trace);
    let histogram = trigger_position_histogram(traces());
    BehaviorMetrics {
        n,
        desired_rate: generations
            .iter()
            .map(|g| partition.desired_fraction(&g.tokens))
            .sum::<f64>()
            / denom,
        trigger_rate: histogram.total() as f64 / denom,
        mean_trigger_position: mean_trigger_position(traces()),
        mean_regenerated_tokens: generations
            .iter()
            .map(|g| g.regenerated_tokens as f64)
            .sum::<f64>()
            / denom,
        histogram,
    }
}

/// One sweep point: generate on `prompts` (scored against `partition` when
/// given) and score `mc_items`. Either input may be empty, not both.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_point<B, T>(
    backend: &B,
    bundle: &SteeringBundle,
    config: &ControllerConfig,
    tokenizer: &T,
    prompts: &[Vec<TokenId>],
    partition: Option<&VocabPartition>,
    mc_items: &[McItem],
) -> Result<PointMetrics>
where
    B: Backend + Sync,
    T: Tokenizer + Sync,
{
    if prompts.is_empty() && mc_items.is_empty() {
        return Err(Error::Precondition(
            "nothing to evaluate: no prompts and no multiple-choice items".into(),
        ));
    }
    let mut m = PointMetrics::default();
    if !prompts.is_empty() {
        let gens = generate_batch(backend, bundle, config, prompts)?;
        let traces = || gens.iter().map(|g| &g.trace);
        m.histogram = trigger_position_histogram(traces());
        m.trigger_rate = m.histogram.total() as f64 / gens.len() as f64;
        m.mean_trigger_position = mean_trigger_position(traces());
        m.mean_regenerated_tokens = gens
            .iter()
            .map(|g| g.regenerated_tokens as f64)
            .sum::<f64>()
            / gens.len() as f64;
        m.desired_rate = partition.map(|p| behavior_metrics(&gens, p).desired_rate);
    }
    if !mc_items.is_empty() {
        let scored = score_items(backend, bundle, config, tokenizer, mc_items)?;
        let mc = mc_metrics(&scored)?;
        m.mc1 = mc.mc1;
        m.mc2 = Some(mc.mc2);
        m.mc3 = Some(mc.mc3);
    }
    Ok(m)
}
