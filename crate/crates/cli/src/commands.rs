use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use fasb_core::anchoring::{
    anchor as anchor_heads, extract_activations, ActivationSet, AnchorOptions,
    DirectionNormalization, Method, SteeringBundle,
};
use fasb_core::bridge::BridgeServer;
use fasb_core::controller::{config_for_prompt, generate_with, ControllerConfig, GenerationRecord};
use fasb_core::datasets::{read_mc, read_qa, write_jsonl, McItem, QaRecord};
use fasb_core::eval::{evaluate_point, sweep as run_sweep, Grid, GridPoint, SCORING_CONVENTION};
use fasb_core::model::{Backend, Decoder, DecodingPolicy, ModelConfig, TokenId};
use fasb_core::synthetic::{
    build_planted_model, default_config, drift_prompts, generate_behavior_dataset,
    synthetic_mc_items, Split,
};
use fasb_core::vocab::Tokenizer;
use rayon::prelude::*;
use serde_json::json;

use crate::backend::{load_model, Target};
use crate::manifest::Recorder;
use crate::{
    AnchorArgs, DecodeArgs, EvalArgs, EvalInputs, ExtractArgs, GenerateArgs, ServeArgs, SweepArgs,
    SynthArgs,
};

pub const PROMPTS_FILE: &str = "prompts.txt";
pub const MC_FILE: &str = "mc.jsonl";

fn split_file(split: Split) -> &'static str {
    match split {
        Split::Train => "train.jsonl",
        Split::Validation => "validation.jsonl",
        Split::Test => "test.jsonl",
    }
}

pub fn synth(a: SynthArgs, args: Vec<String>) -> Result<()> {
    let mut rec = Recorder::new("synth", args);
    let config: ModelConfig = match &a.config {
        Some(p) => {
            rec.input(p);
            let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", p.display()))?
        }
        None => default_config(),
    };
    let (data_seed, prompt_seed, mc_seed) = (
        a.seed.wrapping_add(1),
        a.seed.wrapping_add(2),
        a.seed.wrapping_add(3),
    );
    rec.seed("seed", a.seed);
    std::fs::create_dir_all(&a.out)
        .with_context(|| format!("creating output directory {}", a.out.display()))?;

    let planted = build_planted_model(&config, a.seed)?;
    planted.save(&a.out)?;
    let data = generate_behavior_dataset(&planted, a.n_samples, data_seed)?;
    let mut outputs = vec![a.out.clone()];
    for split in [Split::Train, Split::Validation, Split::Test] {
        let rows: Vec<QaRecord> = data
            .split(split)
            .map(|r| QaRecord {
                question: planted.vocab.decode(&r.prompt),
                answer: planted.vocab.decode(&r.answer),
                label: r.label,
            })
            .collect();
        let path = a.out.join(split_file(split));
        write_jsonl(&path, &rows)?;
        outputs.push(path);
    }
    let prompts: Vec<String> = drift_prompts(&planted, a.n_prompts, prompt_seed)
        .iter()
        .map(|p| planted.vocab.decode(p) + "\n")
        .collect();
    let path = a.out.join(PROMPTS_FILE);
    std::fs::write(&path, prompts.concat())
        .with_context(|| format!("writing {}", path.display()))?;
    outputs.push(path);
    let path = a.out.join(MC_FILE);
    write_jsonl(&path, &synthetic_mc_items(&planted, a.n_mc, mc_seed))?;
    outputs.push(path);

    rec.config = json!({
        "model": config,
        "n_samples": a.n_samples,
        "n_prompts": a.n_prompts,
        "n_mc": a.n_mc,
        "data_seed": data_seed,
        "prompt_seed": prompt_seed,
        "mc_seed": mc_seed,
        "designated_head": planted.designated_head(),
    });
    println!(
        "planted model in {} (designated head {})",
        a.out.display(),
        planted.designated_head()
    );
    rec.finish(&a.out, outputs)
}

pub fn extract(a: ExtractArgs, args: Vec<String>) -> Result<()> {
    let mut rec = Recorder::new("extract", args);
    rec.input(&a.model);
    let (backend, vocab) = load_model(&a.model)?;
    let mut samples: Vec<(Vec<TokenId>, u8)> = Vec::new();
    for path in &a.data {
        rec.input(path);
        for r in read_qa(path)? {
            let mut ids = vocab.encode(&r.question);
            ids.extend(vocab.encode(&r.answer));
            samples.push((ids, r.label));
        }
    }
    ensure!(!samples.is_empty(), "no QA records in the given files");
    let acts = extract_activations(&backend, &samples)?;
    acts.save(&a.out)?;
    ensure!(
        ActivationSet::load(&a.out)? == acts,
        "activations at {} did not read back identically",
        a.out.display()
    );
    rec.config = json!({
        "model_fingerprint": backend.fingerprint(),
        "records": samples.len(),
        "shape": acts.shape(),
    });
    println!("{} records -> {}", samples.len(), a.out.display());
    rec.finish(&a.out, vec![a.out.clone()])
}

fn parse_method(s: &str) -> Result<Method> {
    match s {
        "probe" => Ok(Method::Probe),
        "prototype" => Ok(Method::Prototype),
        other => bail!("unknown method {other:?}; expected probe or prototype"),
    }
}

pub fn anchor(a: AnchorArgs, args: Vec<String>) -> Result<()> {
    let mut rec = Recorder::new("anchor", args);
    let method = parse_method(&a.method)?;
    ensure!(a.k >= 1, "--k must be at least 1, got {}", a.k);
    rec.seed("split_seed", a.split_seed);
    rec.input(&a.activations);
    rec.input(&a.model);
    let (backend, _) = load_model(&a.model)?;
    let cfg = backend.config();
    let acts = ActivationSet::load(&a.activations)?;
    let validation = match &a.validation {
        Some(p) => {
            rec.input(p);
            Some(ActivationSet::load(p)?)
        }
        None => None,
    };
    for set in std::iter::once(&acts).chain(validation.as_ref()) {
        let [_, l, h, d] = set.shape();
        ensure!(
            (l, h, d) == (cfg.n_layers, cfg.n_heads, cfg.d_head),
            "activations are {l}x{h}x{d} but the model has {}x{}x{}",
            cfg.n_layers,
            cfg.n_heads,
            cfg.d_head
        );
    }

    let mut opts = AnchorOptions::new(method, a.k);
    opts.split_seed = a.split_seed;
    let hp = &mut opts.hyperparams;
    hp.alpha = a.alpha.unwrap_or(hp.alpha);
    hp.beta = a.beta.unwrap_or(hp.beta);
    hp.s = a.s.unwrap_or(hp.s);
    hp.lambda = a.lambda.unwrap_or(hp.lambda);
    hp.tau = a.tau.unwrap_or(hp.tau);
    if a.raw_directions {
        hp.direction_normalization = DirectionNormalization::Raw;
    }
    let out = anchor_heads(&acts, validation.as_ref(), &opts, &backend.fingerprint())?;
    out.bundle.save(&a.out)?;
    ensure!(
        SteeringBundle::load(&a.out)? == out.bundle,
        "bundle at {} did not read back identically",
        a.out.display()
    );

    let accuracies: Vec<_> = out
        .all_heads
        .iter()
        .map(|c| json!({ "head": c.head(), "validation_accuracy": c.validation_accuracy() }))
        .collect();
    rec.config = json!({
        "method": method,
        "k": a.k,
        "hyperparams": opts.hyperparams,
        "model_fingerprint": backend.fingerprint(),
        "head_accuracies": accuracies,
    });
    let top: Vec<String> = out
        .bundle
        .heads
        .iter()
        .take(5)
        .map(|c| format!("{} ({:.3})", c.head(), c.validation_accuracy()))
        .collect();
    println!("anchored {} heads; top: {}", out.bundle.k(), top.join(", "));
    rec.finish(&a.out, vec![a.out.clone()])
}

fn read_prompts(path: &Path) -> Result<Vec<String>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let prompts: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    ensure!(!prompts.is_empty(), "{} has no prompts", path.display());
    Ok(prompts)
}

fn controller_config(
    bundle: &SteeringBundle,
    mode: fasb_core::controller::Mode,
    alpha: Option<f64>,
    beta: Option<f64>,
    s: Option<usize>,
    decode: &DecodeArgs,
    tokenizer: &impl Tokenizer,
) -> Result<ControllerConfig> {
    let mut cfg = ControllerConfig::from_bundle(bundle, mode);
    cfg.alpha = alpha.unwrap_or(cfg.alpha);
    cfg.beta = beta.unwrap_or(cfg.beta);
    cfg.s = s.unwrap_or(cfg.s);
    cfg.max_tokens = decode.max_tokens;
    if let Some(temperature) = decode.temperature {
        cfg.decoding = DecodingPolicy::Sample {
            temperature,
            seed: decode.seed,
        };
    }
    for word in &decode.stop {
        let ids = tokenizer.encode(word)?;
        ensure!(
            ids.len() == 1,
            "stop word {word:?} is {} tokens, expected one",
            ids.len()
        );
        cfg.stop_tokens.insert(ids[0]);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn open_bundle(path: &Path, target: &Target) -> Result<SteeringBundle> {
    let bundle = SteeringBundle::load(path)?;
    bundle.check_model(target.backend.config())?;
    ensure!(
        bundle.model_fingerprint == target.backend.fingerprint(),
        "bundle was anchored on model {} but the backend serves {}",
        bundle.model_fingerprint,
        target.backend.fingerprint()
    );
    Ok(bundle)
}

fn record_target(rec: &mut Recorder, target: &crate::BackendArgs) {
    if let Some(m) = &target.model {
        rec.input(m);
    }
    if let Some(g) = &target.ground_truth {
        rec.input(g);
    }
}

pub fn generate(a: GenerateArgs, args: Vec<String>) -> Result<()> {
    let mut rec = Recorder::new("generate", args);
    rec.seed("seed", a.decode.seed);
    record_target(&mut rec, &a.target);
    rec.input(&a.bundle);
    rec.input(&a.prompts);
    let target = Target::open(&a.target)?;
    let bundle = open_bundle(&a.bundle, &target)?;
    let cfg = controller_config(
        &bundle,
        a.mode,
        a.alpha,
        a.beta,
        a.s,
        &a.decode,
        &target.tokenizer,
    )?;
    let prompts = read_prompts(&a.prompts)?;
    let encoded = prompts
        .iter()
        .map(|p| target.tokenizer.encode(p))
        .collect::<fasb_core::Result<Vec<_>>>()?;

    let records = prompts
        .par_iter()
        .zip(&encoded)
        .enumerate()
        .map(|(i, (text, ids))| {
            let cfg = config_for_prompt(&cfg, i);
            let start = Instant::now();
            let mut decoder = Decoder::new(cfg.decoding);
            let g = generate_with(&target.backend, &bundle, &cfg, ids, &mut decoder)?;
            let elapsed = start.elapsed();
            let output = target.tokenizer.decode(&g.tokens)?;
            let mut r = GenerationRecord::new(text.clone(), output, ids.clone(), &cfg, g);
            if a.timing {
                r.wall_clock_ms = Some(elapsed.as_secs_f64() * 1e3);
            }
            Ok(r)
        })
        .collect::<fasb_core::Result<Vec<_>>>()?;
    write_jsonl(&a.out, &records)?;

    let triggered = records.iter().filter(|r| r.trace.trigger.is_some()).count();
    rec.config = json!({
        "controller": cfg,
        "bundle_fingerprint": bundle.model_fingerprint,
        "backend": a.target.backend,
        "timing": a.timing,
    });
    println!(
        "{} generations ({triggered} triggered) -> {}",
        records.len(),
        a.out.display()
    );
    rec.finish(&a.out, vec![a.out.clone()])
}

fn report(inputs: EvalInputs, grid: Grid, mut rec: Recorder) -> Result<()> {
    rec.seed("seed", inputs.decode.seed);
    record_target(&mut rec, &inputs.target);
    rec.input(&inputs.bundle);
    let target = Target::open(&inputs.target)?;
    let bundle = open_bundle(&inputs.bundle, &target)?;
    let mc: Vec<McItem> = match &inputs.mc {
        Some(p) => {
            rec.input(p);
            read_mc(p)?
        }
        None => Vec::new(),
    };
    let prompts: Vec<Vec<TokenId>> = match &inputs.prompts {
        Some(p) => {
            rec.input(p);
            read_prompts(p)?
                .iter()
                .map(|t| target.tokenizer.encode(t))
                .collect::<fasb_core::Result<_>>()?
        }
        None => Vec::new(),
    };
    ensure!(
        !mc.is_empty() || !prompts.is_empty(),
        "give --mc and/or --prompts"
    );
    // validates decoding and stop words once, before the grid runs
    let base = controller_config(
        &bundle,
        grid.mode[0],
        None,
        None,
        None,
        &inputs.decode,
        &target.tokenizer,
    )?;

    let run = |p: &GridPoint| {
        if p.k > bundle.k() {
            return Err(fasb_core::Error::Precondition(format!(
                "k = {} exceeds the bundle's {} heads",
                p.k,
                bundle.k()
            )));
        }
        let sub = SteeringBundle::new(
            bundle.method,
            bundle.heads[..p.k].to_vec(),
            bundle.hyperparams.clone(),
            bundle.split_seed,
            bundle.model_fingerprint.clone(),
        )?;
        let mut cfg = base.clone();
        cfg.mode = p.mode;
        cfg.alpha = p.alpha;
        cfg.beta = p.beta;
        cfg.s = p.s;
        cfg.validate()?;
        evaluate_point(
            &target.backend,
            &sub,
            &cfg,
            &target.tokenizer,
            &prompts,
            target.partition.as_ref(),
            &mc,
        )
    };
    let header: Vec<(String, String)> = [
        ("model_fingerprint", bundle.model_fingerprint.clone()),
        ("method", format!("{:?}", bundle.method).to_lowercase()),
        ("split_seed", bundle.split_seed.to_string()),
        ("scoring", SCORING_CONVENTION.to_string()),
        ("seed", inputs.decode.seed.to_string()),
        ("decoding", serde_json::to_string(&base.decoding)?),
        ("max_tokens", base.max_tokens.to_string()),
        ("mc_items", mc.len().to_string()),
        ("prompts", prompts.len().to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let result = run_sweep(&grid, header, run)?;
    result.write_csv(&inputs.out)?;
    let failed: Vec<_> = result
        .rows
        .iter()
        .filter_map(|r| r.result.as_ref().err())
        .collect();
    for e in &failed {
        eprintln!("warning: grid point failed: {e}");
    }
    rec.config = json!({ "grid": grid, "controller": base });
    println!(
        "{} rows ({} failed) -> {}",
        result.rows.len(),
        failed.len(),
        inputs.out.display()
    );
    let out: PathBuf = inputs.out.clone();
    rec.finish(&out, vec![out.clone()])
}

pub fn eval(a: EvalArgs, args: Vec<String>) -> Result<()> {
    let bundle = SteeringBundle::load(&a.inputs.bundle)?;
    let hp = &bundle.hyperparams;
    let grid = Grid {
        mode: vec![a.mode],
        k: vec![bundle.k()],
        s: vec![a.s.unwrap_or(hp.s)],
        beta: vec![a.beta.unwrap_or(hp.beta)],
        alpha: vec![a.alpha.unwrap_or(hp.alpha)],
    };
    report(a.inputs, grid, Recorder::new("eval", args))
}

pub fn sweep(a: SweepArgs, args: Vec<String>) -> Result<()> {
    let bundle = SteeringBundle::load(&a.inputs.bundle)?;
    let hp = &bundle.hyperparams;
    let or = |v: Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v };
    let grid = Grid {
        mode: a.modes,
        k: if a.ks.is_empty() {
            vec![bundle.k()]
        } else {
            a.ks
        },
        s: if a.ss.is_empty() { vec![hp.s] } else { a.ss },
        beta: or(a.betas, hp.beta),
        alpha: or(a.alphas, hp.alpha),
    };
    report(a.inputs, grid, Recorder::new("sweep", args))
}

pub fn serve_bridge(a: ServeArgs) -> Result<()> {
    let (backend, vocab) = load_model(&a.model)?;
    let server = BridgeServer::bind(a.bind.as_str(), backend)
        .with_context(|| format!("binding {}", a.bind))?
        .with_tokenizer(vocab);
    println!("serving {} on {}", a.model.display(), server.local_addr()?);
    server.serve()?;
    Ok(())
}
