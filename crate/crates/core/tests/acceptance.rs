//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails or overruns its time limit.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{config, drift, fixture, steady, ALPHA, BETA, MODEL_SEED, S};
use fasb_core::anchoring::{
    anchor, extract_activations, AnchorOptions, DirectionNormalization, HeadClassifier,
    Hyperparams, Method, ProbeClassifier, PrototypeClassifier, SteeringBundle,
};
use fasb_core::controller::{
    deviation_probability, intervention_strength, ControllerConfig, Generation, Mode,
};
use fasb_core::eval::{behavior_metrics, mc1, mc2, mc3, ScoredItem};
use fasb_core::model::{
    Backend, GenerationSession, HeadId, LocalBackend, SteeringEntry, SteeringSpec, TokenId,
};
use fasb_core::synthetic::{
    build_planted_model, default_config, generate_behavior_dataset, random_model, Split,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EQ_TOL: f64 = 1e-9;
const PROBE_ANGLE_MAX_DEG: f64 = 15.0;
const NONE_DESIRED_MAX: f64 = 0.5;
const FASB_DESIRED_MIN: f64 = 0.9;
const DRIFT_PROMPTS: usize = 100;
const DRIFT_SEED: u64 = 100;
const BETA_LADDER: [f64; 4] = [0.3, 0.45, 0.6, 0.8];
const ABLATION_PROMPTS: usize = 20;

type Verdict = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn vec_in(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn equation_conformance() -> Verdict {
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let d = r.gen_range(1..=32);
        let k = r.gen_range(1..=6);
        let heads: Vec<HeadClassifier> = (0..k)
            .map(|i| {
                HeadClassifier::Probe(ProbeClassifier {
                    head: HeadId::new(i, 0),
                    theta: vec_in(&mut r, d, 2.0),
                    validation_accuracy: 1.0,
                    degenerate: false,
                })
            })
            .collect();
        let bundle = SteeringBundle::new(
            Method::Probe,
            heads.clone(),
            Hyperparams::defaults_for(Method::Probe),
            0,
            "fp".into(),
        )
        .map_err(|e| e.to_string())?;
        let xs: Vec<Vec<f32>> = (0..k).map(|_| vec_in(&mut r, d, 3.0)).collect();
        let tapped = heads.iter().map(|h| h.head()).zip(xs.clone()).collect();
        let got = deviation_probability(&bundle, &tapped).map_err(|e| e.to_string())?;

        let mut want = 0.0;
        for (h, x) in heads.iter().zip(&xs) {
            let HeadClassifier::Probe(p) = h else {
                unreachable!()
            };
            let z: f64 = p
                .theta
                .iter()
                .zip(x)
                .map(|(a, b)| *a as f64 * *b as f64)
                .sum();
            want += 1.0 - 1.0 / (1.0 + (-z).exp());
        }
        want /= k as f64;
        worst = worst.max((got - want).abs());

        let alpha = r.gen_range(0.0..100.0);
        let beta = if case % 10 == 0 {
            want
        } else {
            r.gen_range(0.0..1.0)
        };
        let strength = intervention_strength(got, alpha, beta);
        let oracle = if want > beta { want * alpha } else { 0.0 };
        if (got > beta) == (want > beta) {
            worst = worst.max((strength - oracle).abs());
        }

        let pos = vec_in(&mut r, d, 1.0);
        let neg = vec_in(&mut r, d, 1.0);
        let tau = r.gen_range(0.05..1.0);
        let proto = PrototypeClassifier {
            head: HeadId::new(0, 0),
            proto_pos: pos.clone(),
            proto_neg: neg.clone(),
            temperature: tau,
            validation_accuracy: 1.0,
            degenerate: false,
        };
        let x = &xs[0];
        let cos = |a: &[f32], b: &[f32]| {
            let dot: f64 = a.iter().zip(b).map(|(p, q)| *p as f64 * *q as f64).sum();
            let na: f64 = a.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let (ep, en) = ((cos(x, &pos) / tau).exp(), (cos(x, &neg) / tau).exp());
        let got = proto.probability(x).map_err(|e| e.to_string())?;
        worst = worst.max((got - ep / (ep + en)).abs());
    }
    ensure(
        worst <= EQ_TOL,
        format!("1000 cases, max abs error {worst:.3e} (tol {EQ_TOL:e})"),
    )
}

fn steering_delta_closed_form() -> Verdict {
    let cfg = default_config();
    let (d, dh) = (cfg.d_model, cfg.d_head);
    let mut r = rng(2);
    let mut worst_ratio = 0.0f64;
    let mut worst_abs = 0.0f64;
    for case in 0..100u64 {
        let model = std::sync::Arc::new(random_model(&cfg, case).map_err(|e| e.to_string())?);
        let backend = LocalBackend::new(model.clone());
        let head = HeadId::new(r.gen_range(0..cfg.n_layers), r.gen_range(0..cfg.n_heads));
        let dir = vec_in(&mut r, dh, 1.0);
        let strength = r.gen_range(0.1f32..20.0);
        let spec = SteeringSpec::new(vec![SteeringEntry {
            head,
            direction: dir.clone(),
            strength,
        }])
        .map_err(|e| e.to_string())?;
        let prompt: Vec<TokenId> = (0..r.gen_range(2..8))
            .map(|_| r.gen_range(0..cfg.vocab_size as TokenId))
            .collect();
        let (last, prefix) = prompt.split_last().unwrap();
        let run = |s: &SteeringSpec| {
            let (mut session, _) = backend.prime(prefix, &[]).unwrap();
            session.step_traced(*last, s).unwrap().1
        };
        let plain = run(&SteeringSpec::none());
        let steered = run(&spec);
        for l in 0..head.layer {
            if plain.attention_outputs[l] != steered.attention_outputs[l] {
                return Err(format!(
                    "case {case}: layer {l} changed below the steered layer"
                ));
            }
        }
        let wo = &model.weights().layers[head.layer].wo;
        let zu = &plain.head_outputs[head.layer];
        let zs = &steered.head_outputs[head.layer];
        let off = head.head * dh;
        for j in 0..d {
            let expected: f64 = (0..dh)
                .map(|i| strength as f64 * dir[i] as f64 * wo[(off + i) * d + j] as f64)
                .sum();
            let got = steered.attention_outputs[head.layer][j] as f64
                - plain.attention_outputs[head.layer][j] as f64;
            // f32 rounding budget of the two matvecs and the in-place addition
            let budget: f64 = 2.0
                * (d + 2) as f64
                * f32::EPSILON as f64
                * (0..d)
                    .map(|i| (zs[i].abs() as f64 + zu[i].abs() as f64) * wo[i * d + j].abs() as f64)
                    .sum::<f64>();
            let err = (got - expected).abs();
            worst_abs = worst_abs.max(err);
            worst_ratio = worst_ratio.max(err / budget.max(f64::MIN_POSITIVE));
        }
    }
    ensure(
        worst_ratio <= 1.0,
        format!(
            "100 heads/directions, max abs error {worst_abs:.3e}, max error / f32 rounding bound {worst_ratio:.3}"
        ),
    )
}

fn rollback_equivalence() -> Verdict {
    let cfg = default_config();
    let mut r = rng(3);
    let backends: Vec<LocalBackend> = (0..10)
        .map(|s| LocalBackend::new(std::sync::Arc::new(random_model(&cfg, 100 + s).unwrap())))
        .chain([fixture().backend.clone()])
        .collect();
    let taps = cfg.all_heads();
    for case in 0..200 {
        let b = &backends[case % backends.len()];
        let prompt: Vec<TokenId> = (0..r.gen_range(1..10))
            .map(|_| r.gen_range(0..cfg.vocab_size as TokenId))
            .collect();
        let extra: Vec<TokenId> = (0..r.gen_range(1..20))
            .map(|_| r.gen_range(0..cfg.vocab_size as TokenId))
            .collect();
        let steering = if case % 2 == 0 {
            SteeringSpec::none()
        } else {
            fixture().probe.steering(r.gen_range(0.0..10.0)).unwrap()
        };
        let keep = r.gen_range(0..extra.len());
        let mut s = GenerationSession::prime(b, &prompt, &taps).map_err(|e| e.to_string())?;
        for &t in &extra {
            s.step(t, &steering).map_err(|e| e.to_string())?;
        }
        s.rollback(keep).map_err(|e| e.to_string())?;
        let again = s
            .step(extra[keep], &steering)
            .map_err(|e| e.to_string())?
            .clone();

        let mut fresh = GenerationSession::prime(b, &prompt, &taps).map_err(|e| e.to_string())?;
        for &t in &extra[..=keep] {
            fresh.step(t, &steering).map_err(|e| e.to_string())?;
        }
        let want = fresh.last_output().unwrap();
        if again.logits != want.logits || again.head_activations != want.head_activations {
            return Err(format!(
                "case {case}: rollback output differs from a fresh prime"
            ));
        }
    }
    Ok("200 cases bit-identical (logits and tapped activations)".into())
}

fn probe_recovery() -> Verdict {
    let cfg = default_config();
    let planted = build_planted_model(&cfg, MODEL_SEED).map_err(|e| e.to_string())?;
    let backend = planted.backend();
    let data = generate_behavior_dataset(&planted, common::N_SAMPLES, common::DATA_SEED)
        .map_err(|e| e.to_string())?;
    let acts = extract_activations(&backend, &data.samples(&[Split::Train, Split::Validation]))
        .map_err(|e| e.to_string())?;
    let out = anchor(
        &acts,
        None,
        &AnchorOptions::new(Method::Probe, 1),
        &cfg.fingerprint(),
    )
    .map_err(|e| e.to_string())?;
    let designated = planted.designated_head();
    let chosen = out.bundle.heads[0].head();
    let acc = out
        .all_heads
        .iter()
        .find(|c| c.head() == designated)
        .map(|c| c.validation_accuracy())
        .unwrap_or(0.0);
    let theta = out.bundle.heads[0]
        .steering_direction(DirectionNormalization::Unit)
        .map_err(|e| e.to_string())?;
    let m = planted.mode_direction();
    let dot: f64 = theta
        .iter()
        .zip(m)
        .map(|(a, b)| *a as f64 * *b as f64)
        .sum();
    let nm: f64 = m.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
    let angle = (dot / nm).clamp(-1.0, 1.0).acos().to_degrees();
    ensure(
        chosen == designated && acc == 1.0 && angle < PROBE_ANGLE_MAX_DEG,
        format!(
            "designated {designated}, top-1 {chosen}, validation accuracy {acc}, angle {angle:.3} deg (max {PROBE_ANGLE_MAX_DEG})"
        ),
    )
}

fn run_all(cfg: &ControllerConfig, prompts: &[Vec<TokenId>]) -> Vec<Generation> {
    let f = fixture();
    fasb_core::controller::generate_batch(&f.backend, &f.probe, cfg, prompts).unwrap()
}

fn end_to_end_efficacy() -> Verdict {
    let f = fixture();
    let prompts = drift(DRIFT_PROMPTS, DRIFT_SEED);
    let rate = |mode| {
        behavior_metrics(&run_all(&config(mode), &prompts), f.planted.partition()).desired_rate
    };
    let (none, fasb, no_bt) = (rate(Mode::None), rate(Mode::Fasb), rate(Mode::NoBacktrack));
    ensure(
        none <= NONE_DESIRED_MAX && fasb >= FASB_DESIRED_MIN && none < no_bt && no_bt < fasb,
        format!(
            "alpha {ALPHA} beta {BETA} s {S}: desired fraction none {none:.3} (<= {NONE_DESIRED_MAX}), no_backtrack {no_bt:.3}, fasb {fasb:.3} (>= {FASB_DESIRED_MIN})"
        ),
    )
}

fn ablation_contracts() -> Verdict {
    let f = fixture();
    let prompts = drift(ABLATION_PROMPTS, 200);
    let mixed: Vec<_> = prompts
        .iter()
        .cloned()
        .chain(steady(ABLATION_PROMPTS, 200))
        .collect();
    let none = run_all(&config(Mode::None), &mixed);

    let mut off = config(Mode::Fasb);
    off.beta = 1.0;
    let silent = run_all(&off, &mixed);
    for (a, b) in none.iter().zip(&silent) {
        if a.tokens != b.tokens || a.log_probs != b.log_probs || b.trace.trigger.is_some() {
            return Err("fasb with beta = 1 differs from none".into());
        }
    }

    let fixed_strength = run_all(&config(Mode::NoAdaptive), &prompts);
    for g in &fixed_strength {
        match &g.trace.trigger {
            Some(t) if t.strength == ALPHA => {}
            other => {
                return Err(format!(
                    "no_adaptive trigger {other:?}, expected r = {ALPHA}"
                ))
            }
        }
    }

    let spec = f.probe.steering(ALPHA as f32).unwrap();
    let fixed_all = run_all(&config(Mode::FixedAll), &mixed);
    for (p, g) in mixed.iter().zip(&fixed_all) {
        let t = g
            .trace
            .trigger
            .as_ref()
            .ok_or("fixed_all without a trigger")?;
        let steered = f.planted.rollout(p, g.tokens.len(), &spec).unwrap();
        if t.regen_start != 1 || t.strength != ALPHA || steered != g.tokens {
            return Err("fixed_all does not steer from the first generated token".into());
        }
    }

    let gcbb = run_all(&config(Mode::Gcbb), &mixed);
    let mut fired = 0;
    for (base, g) in none.iter().zip(&gcbb) {
        let p = g
            .trace
            .final_probability
            .ok_or("gcbb without a final probability")?;
        let regenerated = g.trace.trigger.is_some() && g.regenerated_tokens == base.tokens.len();
        if regenerated != (p > BETA) || (!regenerated && g.tokens != base.tokens) {
            return Err(format!(
                "gcbb regenerated = {regenerated} with final p = {p}"
            ));
        }
        fired += usize::from(regenerated);
    }
    Ok(format!(
        "beta=1 fasb == none on {n}, no_adaptive r = alpha on {d}, fixed_all from token 1 on {n}, gcbb regenerated {fired}/{n} exactly when final p > beta",
        n = mixed.len(),
        d = prompts.len()
    ))
}

fn trigger_histogram_shift() -> Verdict {
    let prompts = drift(DRIFT_PROMPTS, DRIFT_SEED);
    let mut means = Vec::new();
    let mut detail = Vec::new();
    for beta in BETA_LADDER {
        let mut cfg = config(Mode::Fasb);
        cfg.beta = beta;
        let m = behavior_metrics(&run_all(&cfg, &prompts), fixture().planted.partition());
        let mean = m.mean_trigger_position.unwrap_or(f64::NAN);
        detail.push(format!(
            "beta {beta}: mean {mean:.2} [{}/{}/{}]",
            m.histogram.early, m.histogram.middle, m.histogram.late
        ));
        means.push(mean);
    }
    ensure(means.windows(2).all(|w| w[0] < w[1]), detail.join(", "))
}

fn brute_mc(items: &[ScoredItem]) -> (f64, f64, f64) {
    let n = items.len() as f64;
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for item in items {
        let best = item.best_index.unwrap();
        let mut wins = true;
        for j in 0..item.scores.len() {
            if j != best && item.scores[best] <= item.scores[j] {
                wins = false;
            }
        }
        a += if wins { 1.0 } else { 0.0 };

        let mut top = f64::NEG_INFINITY;
        for &s in &item.scores {
            if s > top {
                top = s;
            }
        }
        let (mut num, mut den) = (0.0, 0.0);
        for (j, &s) in item.scores.iter().enumerate() {
            let e = (s - top).exp();
            den += e;
            if item.correct.contains(&j) {
                num += e;
            }
        }
        b += num / den;

        let mut above = 0usize;
        for &ci in &item.correct {
            let mut beats_all = true;
            for j in 0..item.scores.len() {
                if !item.correct.contains(&j) && item.scores[ci] <= item.scores[j] {
                    beats_all = false;
                }
            }
            above += usize::from(beats_all);
        }
        c += above as f64 / item.correct.len() as f64;
    }
    (a / n, b / n, c / n)
}

fn mc_oracle() -> Verdict {
    let mut r = rng(8);
    for set in 0..50 {
        let items: Vec<ScoredItem> = (0..r.gen_range(1..30))
            .map(|_| {
                let n = r.gen_range(2..8);
                let scores = (0..n)
                    .map(|_| {
                        if r.gen_bool(0.3) {
                            r.gen_range(-8..8) as f64 / 2.0
                        } else {
                            r.gen_range(-10.0..2.0)
                        }
                    })
                    .collect();
                let mut correct: Vec<usize> = (0..n).filter(|_| r.gen_bool(0.5)).collect();
                if correct.is_empty() {
                    correct.push(r.gen_range(0..n));
                }
                if correct.len() == n {
                    correct.remove(r.gen_range(0..n));
                }
                let best_index = Some(correct[r.gen_range(0..correct.len())]);
                ScoredItem {
                    scores,
                    correct,
                    best_index,
                }
            })
            .collect();
        let got = (
            mc1(&items).map_err(|e| e.to_string())?,
            mc2(&items).map_err(|e| e.to_string())?,
            mc3(&items).map_err(|e| e.to_string())?,
        );
        let want = brute_mc(&items);
        if got != want {
            return Err(format!(
                "set {set}: harness {got:?} vs brute force {want:?}"
            ));
        }
    }
    Ok("50 randomized item sets, MC1/MC2/MC3 identical".into())
}

fn main() {
    let criteria: [(&str, u64, fn() -> Verdict); 8] = [
        ("equation conformance", 1, equation_conformance),
        ("steering delta closed form", 5, steering_delta_closed_form),
        ("rollback equivalence", 10, rollback_equivalence),
        ("probe recovery", 30, probe_recovery),
        ("end-to-end steering efficacy", 60, end_to_end_efficacy),
        ("ablation-mode contracts", 30, ablation_contracts),
        ("trigger-position histogram", 60, trigger_histogram_shift),
        ("MC metric oracle", 1, mc_oracle),
    ];
    let setup = Instant::now();
    fixture();
    println!("shared fixture built in {:.2?}", setup.elapsed());

    let mut failed = 0;
    for (name, limit, run) in criteria {
        let limit = Duration::from_secs(limit);
        let start = Instant::now();
        let verdict =
            catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".to_string()));
        let elapsed = start.elapsed();
        let (ok, detail) = match verdict {
            Ok(d) if elapsed <= limit => (true, d),
            Ok(d) => (false, format!("{d}; over the {limit:?} limit")),
            Err(d) => (false, d),
        };
        failed += usize::from(!ok);
        println!(
            "{} {name}: {detail} ({elapsed:.2?} / {limit:?})",
            if ok { "PASS" } else { "FAIL" }
        );
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
