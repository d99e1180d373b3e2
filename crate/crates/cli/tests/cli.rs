use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use tempfile::TempDir;

fn fasb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fasb"))
        .args(args)
        .output()
        .expect("run fasb")
}

fn ok(args: &[&str]) {
    let out = fasb(args);
    assert!(
        out.status.success(),
        "fasb {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, seed: &str) {
    ok(&[
        "synth",
        "--out",
        p(dir),
        "--seed",
        seed,
        "--n-samples",
        "60",
        "--n-prompts",
        "12",
        "--n-mc",
        "6",
    ]);
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let path = e.unwrap().path();
            let bytes = std::fs::read(&path).unwrap();
            (PathBuf::from(path.file_name().unwrap()), bytes)
        })
        .collect();
    out.sort();
    out
}

/// synth, extract and anchor a k = 1 probe bundle.
fn pipeline(tmp: &TempDir) -> (PathBuf, PathBuf) {
    let model = tmp.path().join("model");
    synth(&model, "7");
    let acts = tmp.path().join("acts.bin");
    ok(&[
        "extract",
        "--model",
        p(&model),
        "--data",
        p(&model.join("train.jsonl")),
        p(&model.join("validation.jsonl")),
        "--out",
        p(&acts),
    ]);
    let bundle = tmp.path().join("bundle");
    ok(&[
        "anchor",
        "--activations",
        p(&acts),
        "--model",
        p(&model),
        "--method",
        "probe",
        "--k",
        "1",
        "--alpha",
        "8",
        "--out",
        p(&bundle),
    ]);
    (model, bundle)
}

fn generate(model: &Path, bundle: &Path, out: &Path, extra: &[&str]) {
    let prompts = model.join("prompts.txt");
    let mut args = vec![
        "generate",
        "--model",
        p(model),
        "--bundle",
        p(bundle),
        "--prompts",
        p(&prompts),
        "--out",
        p(out),
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let tmp = TempDir::new().unwrap();
    let (a, b, c) = (
        tmp.path().join("a"),
        tmp.path().join("b"),
        tmp.path().join("c"),
    );
    synth(&a, "11");
    synth(&b, "11");
    synth(&c, "12");
    let fa = files(&a);
    let names: Vec<_> = fa
        .iter()
        .map(|(n, _)| n.to_str().unwrap().to_string())
        .collect();
    for want in [
        "config.json",
        "weights.bin",
        "vocab.txt",
        "ground_truth.json",
        "train.jsonl",
        "validation.jsonl",
        "test.jsonl",
        "prompts.txt",
        "mc.jsonl",
    ] {
        assert!(names.iter().any(|n| n == want), "missing {want}");
    }
    assert_eq!(fa, files(&b));
    assert_ne!(fa, files(&c));
    assert!(tmp.path().join("a.manifest.json").exists());
}

#[test]
fn unwritable_output_fails_with_a_diagnostic() {
    let tmp = TempDir::new().unwrap();
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let out = fasb(&["synth", "--out", p(&blocker.join("sub"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("creating output directory"));
}

#[test]
fn anchor_rejects_zero_heads() {
    let tmp = TempDir::new().unwrap();
    let (model, _) = pipeline(&tmp);
    let out = fasb(&[
        "anchor",
        "--activations",
        p(&tmp.path().join("acts.bin")),
        "--model",
        p(&model),
        "--k",
        "0",
        "--out",
        p(&tmp.path().join("b0")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--k must be at least 1"));
    assert!(!tmp.path().join("b0").exists());
}

#[test]
fn threshold_one_matches_unsteered_generation_and_replays() {
    let tmp = TempDir::new().unwrap();
    let (model, bundle) = pipeline(&tmp);
    let none = tmp.path().join("none.jsonl");
    let off = tmp.path().join("off.jsonl");
    let fasb_out = tmp.path().join("fasb.jsonl");
    generate(&model, &bundle, &none, &["--mode", "none"]);
    generate(&model, &bundle, &off, &["--mode", "fasb", "--beta", "1.0"]);
    generate(&model, &bundle, &fasb_out, &["--mode", "fasb"]);

    let rows = |path: &Path| -> Vec<serde_json::Value> {
        std::fs::read_to_string(path)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    };
    let (a, b, c) = (rows(&none), rows(&off), rows(&fasb_out));
    assert_eq!(a.len(), 12);
    for ((x, y), z) in a.iter().zip(&b).zip(&c) {
        assert_eq!(x["output"], y["output"]);
        assert_eq!(x["token_ids"], y["token_ids"]);
        assert!(y["trace"]["trigger"].is_null());
        assert!(!z["trace"]["trigger"].is_null());
    }

    let first = std::fs::read(&fasb_out).unwrap();
    std::fs::remove_file(&fasb_out).unwrap();
    let manifest = tmp.path().join("fasb.jsonl.manifest.json");
    ok(&["replay", p(&manifest)]);
    assert_eq!(std::fs::read(&fasb_out).unwrap(), first);
}

#[test]
fn eval_and_sweep_write_reports() {
    let tmp = TempDir::new().unwrap();
    let (model, bundle) = pipeline(&tmp);
    let (mc, prompts) = (model.join("mc.jsonl"), model.join("prompts.txt"));
    let common = [
        "--model",
        p(&model),
        "--bundle",
        p(&bundle),
        "--mc",
        p(&mc),
        "--prompts",
        p(&prompts),
    ];
    let report = tmp.path().join("eval.csv");
    let mut args = vec!["eval", "--mode", "fasb", "--out", p(&report)];
    args.extend_from_slice(&common);
    ok(&args);
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.contains("# scoring: mean per-token log-likelihood"));
    assert!(text
        .lines()
        .last()
        .unwrap()
        .starts_with("fasb,1,10,0.45,8,ok,"));

    let sweep = |name: &str| {
        let out = tmp.path().join(name);
        let mut args = vec![
            "sweep",
            "--modes",
            "none,fasb",
            "--ks",
            "1,2",
            "--betas",
            "0.3,0.6",
            "--out",
            p(&out),
        ];
        args.extend_from_slice(&common);
        ok(&args);
        std::fs::read(out).unwrap()
    };
    let a = sweep("s1.csv");
    assert_eq!(a, sweep("s2.csv"));
    let text = String::from_utf8(a).unwrap();
    let rows: Vec<_> = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .collect();
    assert_eq!(rows.len(), 8);
    assert_eq!(rows.iter().filter(|r| r.contains(",failed,")).count(), 4);
}

#[test]
fn malformed_inputs_are_reported_with_line_numbers() {
    let tmp = TempDir::new().unwrap();
    let model = tmp.path().join("model");
    synth(&model, "7");
    let bad = tmp.path().join("bad.jsonl");
    std::fs::write(
        &bad,
        "{\"question\":\"<pos>\",\"answer\":\"true\",\"label\":1}\n{\"question\":1}\n",
    )
    .unwrap();
    let out = fasb(&[
        "extract",
        "--model",
        p(&model),
        "--data",
        p(&bad),
        "--out",
        p(&tmp.path().join("a.bin")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains(":2"));
}

#[test]
fn bundles_refuse_a_different_model() {
    let tmp = TempDir::new().unwrap();
    let (_, bundle) = pipeline(&tmp);
    let other = tmp.path().join("other");
    let mut cfg: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("model/config.json")).unwrap())
            .unwrap();
    cfg["max_seq_len"] = serde_json::json!(96);
    let cfg_path = tmp.path().join("cfg.json");
    std::fs::write(&cfg_path, serde_json::to_vec(&cfg).unwrap()).unwrap();
    ok(&[
        "synth",
        "--out",
        p(&other),
        "--config",
        p(&cfg_path),
        "--n-samples",
        "40",
        "--n-prompts",
        "4",
        "--n-mc",
        "2",
    ]);
    let out = fasb(&[
        "generate",
        "--model",
        p(&other),
        "--bundle",
        p(&bundle),
        "--prompts",
        p(&other.join("prompts.txt")),
        "--out",
        p(&tmp.path().join("g.jsonl")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bundle was built for model"), "{err}");
}

#[test]
fn generation_over_the_bridge_matches_local() {
    let tmp = TempDir::new().unwrap();
    let (model, bundle) = pipeline(&tmp);
    let mut server = Command::new(env!("CARGO_BIN_EXE_fasb"))
        .args([
            "serve-bridge",
            "--model",
            p(&model),
            "--bind",
            "127.0.0.1:0",
        ])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let addr = line.trim().rsplit(' ').next().unwrap().to_string();

    let local = tmp.path().join("local.jsonl");
    let remote = tmp.path().join("remote.jsonl");
    generate(&model, &bundle, &local, &["--mode", "fasb"]);
    ok(&[
        "generate",
        "--backend",
        "bridge",
        "--bridge-addr",
        &addr,
        "--bundle",
        p(&bundle),
        "--prompts",
        p(&model.join("prompts.txt")),
        "--mode",
        "fasb",
        "--out",
        p(&remote),
    ]);
    server.kill().unwrap();
    server.wait().unwrap();
    assert_eq!(
        std::fs::read(&local).unwrap(),
        std::fs::read(&remote).unwrap()
    );
}
