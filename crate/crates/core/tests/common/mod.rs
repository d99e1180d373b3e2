#![allow(dead_code)]

use std::sync::OnceLock;

use fasb_core::anchoring::{
    anchor, extract_activations, ActivationSet, AnchorOptions, Method, SteeringBundle,
};
use fasb_core::controller::{ControllerConfig, Mode};
use fasb_core::model::{LocalBackend, TokenId};
use fasb_core::synthetic::{
    build_planted_model, default_config, drift_prompts, generate_behavior_dataset, BehaviorDataset,
    PlantedModel, Split,
};

pub const MODEL_SEED: u64 = 7;
pub const DATA_SEED: u64 = 3;
pub const N_SAMPLES: usize = 200;

/// Operating point picked from the alpha/beta sweep on drift prompts.
pub const ALPHA: f64 = 8.0;
pub const BETA: f64 = 0.45;
pub const S: usize = 10;

pub struct Fixture {
    pub planted: PlantedModel,
    pub backend: LocalBackend,
    pub dataset: BehaviorDataset,
    pub activations: ActivationSet,
    pub probe: SteeringBundle,
    pub prototype: SteeringBundle,
}

fn bundle(acts: &ActivationSet, method: Method, fingerprint: &str) -> SteeringBundle {
    let mut opts = AnchorOptions::new(method, 1);
    opts.hyperparams.alpha = ALPHA;
    opts.hyperparams.beta = BETA;
    opts.hyperparams.s = S;
    anchor(acts, None, &opts, fingerprint).unwrap().bundle
}

pub fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let config = default_config();
        let planted = build_planted_model(&config, MODEL_SEED).unwrap();
        let backend = planted.backend();
        let dataset = generate_behavior_dataset(&planted, N_SAMPLES, DATA_SEED).unwrap();
        let samples = dataset.samples(&[Split::Train, Split::Validation]);
        let activations = extract_activations(&backend, &samples).unwrap();
        let fp = config.fingerprint();
        let probe = bundle(&activations, Method::Probe, &fp);
        let prototype = bundle(&activations, Method::Prototype, &fp);
        Fixture {
            planted,
            backend,
            dataset,
            activations,
            probe,
            prototype,
        }
    })
}

pub fn config(mode: Mode) -> ControllerConfig {
    ControllerConfig::from_bundle(&fixture().probe, mode)
}

pub fn drift(n: usize, seed: u64) -> Vec<Vec<TokenId>> {
    drift_prompts(&fixture().planted, n, seed)
}

/// `[<pos>, fillers..]` prompts that never drift.
pub fn steady(n: usize, seed: u64) -> Vec<Vec<TokenId>> {
    use rand::{Rng, SeedableRng};
    let part = fixture().planted.partition();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut p = vec![part.mode_pos];
            for _ in 0..rng.gen_range(1..=5) {
                p.push(part.neutral[rng.gen_range(0..part.neutral.len())]);
            }
            p
        })
        .collect()
}
