//! Head anchoring: fit a classifier on every attention head, rank the heads
//! by validation accuracy and keep the best `k` as a [`SteeringBundle`].

mod activations;
mod bundle;
mod classifier;

pub use activations::{extract_activations, ActivationRecord, ActivationSet, MAGIC};
pub use bundle::{Hyperparams, SteeringBundle, BUNDLE_MANIFEST_FILE, VECTORS_FILE};
pub use classifier::{
    build_prototypes, train_probe, DirectionNormalization, HeadClassifier, HeadSamples, Method,
    ProbeClassifier, PrototypeClassifier, PROBE_GRAD_TOL, PROBE_MAX_ITERS,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::HeadId;

pub const DEFAULT_LAMBDA: f64 = 1e-3;
pub const DEFAULT_TAU: f64 = 0.1;
pub const TRAIN_FRACTION: f64 = 0.8;

/// Seeded label-stratified split. Returns sorted (train, validation) indices.
pub fn split_indices(labels: &[u8], seed: u64, train_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let mut n_train = (idx.len() as f64 * train_fraction).round() as usize;
        if idx.len() >= 2 {
            n_train = n_train.clamp(1, idx.len() - 1);
        }
        train.extend_from_slice(&idx[..n_train]);
        val.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn head_samples<'a>(set: &'a ActivationSet, head: HeadId) -> HeadSamples<'a> {
    let mut s = HeadSamples::default();
    for r in set.records() {
        s.push(r.head(head), r.label);
    }
    s
}

/// Fit one classifier per head, in (layer, head) order.
pub fn train_all_heads(
    train: &ActivationSet,
    validation: &ActivationSet,
    method: Method,
    lambda: f64,
    tau: f64,
) -> Result<Vec<HeadClassifier>> {
    if train.shape()[1..] != validation.shape()[1..] {
        return Err(Error::Shape(
            "train and validation activations differ in shape".into(),
        ));
    }
    train
        .heads()
        .into_par_iter()
        .map(|head| {
            let t = head_samples(train, head);
            let v = head_samples(validation, head);
            match method {
                Method::Probe => train_probe(&t, &v, head, lambda).map(HeadClassifier::Probe),
                Method::Prototype => {
                    if t.all_identical() {
                        return Ok(HeadClassifier::Prototype(classifier::degenerate_prototype(
                            &t,
                            &v,
                            head,
                            tau,
                            train.d_head,
                        )));
                    }
                    match build_prototypes(&t, &v, head, tau) {
                        Err(Error::Degenerate(_)) => Ok(HeadClassifier::Prototype(
                            classifier::degenerate_prototype(&t, &v, head, tau, train.d_head),
                        )),
                        other => other.map(HeadClassifier::Prototype),
                    }
                }
            }
        })
        .collect()
}

/// The `k` most accurate heads. Ties go to non-degenerate heads, then to the
/// smaller (layer, head).
pub fn select_heads(classifiers: &[HeadClassifier], k: usize) -> Result<Vec<HeadClassifier>> {
    if k == 0 || k > classifiers.len() {
        return Err(Error::Precondition(format!(
            "k must be in 1..={}, got {k}",
            classifiers.len()
        )));
    }
    let mut ranked: Vec<&HeadClassifier> = classifiers.iter().collect();
    ranked.sort_by(|a, b| {
        b.validation_accuracy()
            .total_cmp(&a.validation_accuracy())
            .then(a.is_degenerate().cmp(&b.is_degenerate()))
            .then(a.head().cmp(&b.head()))
    });
    Ok(ranked.into_iter().take(k).cloned().collect())
}

#[derive(Clone, Debug)]
pub struct AnchorOptions {
    pub method: Method,
    pub k: usize,
    pub split_seed: u64,
    pub hyperparams: Hyperparams,
}

impl AnchorOptions {
    pub fn new(method: Method, k: usize) -> Self {
        Self {
            method,
            k,
            split_seed: 0,
            hyperparams: Hyperparams::defaults_for(method),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AnchorOutcome {
    pub bundle: SteeringBundle,
    /// Every head's classifier in (layer, head) order.
    pub all_heads: Vec<HeadClassifier>,
}

/// Fit, rank and bundle. Without a separate `validation` set the labeled
/// activations are split 80/20 with `options.split_seed`.
pub fn anchor(
    activations: &ActivationSet,
    validation: Option<&ActivationSet>,
    options: &AnchorOptions,
    model_fingerprint: &str,
) -> Result<AnchorOutcome> {
    let [_, l, h, _] = activations.shape();
    if options.k == 0 || options.k > l * h {
        return Err(Error::Precondition(format!(
            "k must be in 1..={}, got {}",
            l * h,
            options.k
        )));
    }
    options.hyperparams.validate()?;
    let split;
    let (train, val) = match validation {
        Some(v) => (activations, v),
        None => {
            let (t, v) = split_indices(activations.labels(), options.split_seed, TRAIN_FRACTION);
            split = (activations.subset(&t), activations.subset(&v));
            (&split.0, &split.1)
        }
    };
    let all_heads = train_all_heads(
        train,
        val,
        options.method,
        options.hyperparams.lambda,
        options.hyperparams.tau,
    )?;
    let heads = select_heads(&all_heads, options.k)?;
    let bundle = SteeringBundle::new(
        options.method,
        heads,
        options.hyperparams.clone(),
        options.split_seed,
        model_fingerprint.to_string(),
    )?;
    Ok(AnchorOutcome { bundle, all_heads })
}
