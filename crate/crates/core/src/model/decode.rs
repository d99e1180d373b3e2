use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TokenId;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
#[derive(Default)]
pub enum DecodingPolicy {
    #[default]
    Greedy,
    Sample {
        temperature: f32,
        seed: u64,
    },
}

/// Argmax with ties going to the lowest token id.
pub fn argmax(logits: &[f32]) -> TokenId {
    let mut best = 0usize;
    for (i, &x) in logits.iter().enumerate().skip(1) {
        if x > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

pub fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let mut sum = 0.0f64;
    for &x in logits {
        sum += (x as f64 - max).exp();
    }
    let log_z = max + sum.ln();
    logits.iter().map(|&x| x as f64 - log_z).collect()
}

/// Token picker for one generation. Sampling draws from its own seeded
/// stream, which is not rewound on rollback.
#[derive(Clone, Debug)]
pub struct Decoder {
    policy: DecodingPolicy,
    rng: Option<ChaCha8Rng>,
}

impl Decoder {
    pub fn new(policy: DecodingPolicy) -> Self {
        let rng = match policy {
            DecodingPolicy::Greedy => None,
            DecodingPolicy::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        Self { policy, rng }
    }

    pub fn policy(&self) -> DecodingPolicy {
        self.policy
    }

    pub fn next(&mut self, logits: &[f32]) -> TokenId {
        match (self.policy, self.rng.as_mut()) {
            (DecodingPolicy::Sample { temperature, .. }, Some(rng)) if temperature > 0.0 => {
                sample(logits, temperature as f64, rng)
            }
            _ => argmax(logits),
        }
    }
}

fn sample(logits: &[f32], temperature: f64, rng: &mut ChaCha8Rng) -> TokenId {
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let weights: Vec<f64> = logits
        .iter()
        .map(|&x| ((x as f64 - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i as TokenId;
        }
        u -= w;
    }
    // rounding left u just above the last bucket
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0) as TokenId
}
