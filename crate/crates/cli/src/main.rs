//! `fasb`: synthesize a planted model, extract head activations, anchor
//! steering heads, generate with tracking and backtracking, score and sweep.

mod backend;
mod commands;
mod manifest;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use fasb_core::controller::Mode;

#[derive(Parser, Debug)]
#[command(
    name = "fasb",
    version,
    about = "Flexible activation steering with backtracking"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the planted model and its datasets.
    Synth(SynthArgs),
    /// Record last-token head activations for labeled QA records.
    Extract(ExtractArgs),
    /// Rank heads by probe accuracy and write a steering bundle.
    Anchor(AnchorArgs),
    /// Generate responses with the chosen steering mode.
    Generate(GenerateArgs),
    /// Score one configuration and write a one-row report.
    Eval(EvalArgs),
    /// Score a grid of configurations and write a CSV report.
    Sweep(SweepArgs),
    /// Serve the local model over the bridge protocol.
    ServeBridge(ServeArgs),
    /// Re-run the command recorded in a run manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Model config JSON; defaults to the built-in synthetic config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub n_samples: usize,
    #[arg(long, default_value_t = 100)]
    pub n_prompts: usize,
    #[arg(long, default_value_t = 50)]
    pub n_mc: usize,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// QA JSON-lines files, concatenated in order.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AnchorArgs {
    #[arg(long)]
    pub activations: PathBuf,
    /// Held-out activations; without it the input is split 80/20.
    #[arg(long)]
    pub validation: Option<PathBuf>,
    /// Model directory whose fingerprint the bundle is bound to.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "probe")]
    pub method: String,
    #[arg(long, default_value_t = 24)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub s: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Keep raw classifier directions instead of unit vectors.
    #[arg(long)]
    pub raw_directions: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct BackendArgs {
    /// `local` or `bridge`.
    #[arg(long, default_value = "local")]
    pub backend: String,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub bridge_addr: Option<String>,
    /// Vocabulary partition used to score desired-token rates.
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct DecodeArgs {
    #[arg(long, default_value_t = 50)]
    pub max_tokens: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sample at this temperature instead of decoding greedily.
    #[arg(long)]
    pub temperature: Option<f32>,
    /// Words that end generation; each must be a single token.
    #[arg(long)]
    pub stop: Vec<String>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub target: BackendArgs,
    #[arg(long)]
    pub bundle: PathBuf,
    /// One prompt per line.
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "fasb")]
    pub mode: Mode,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub s: Option<usize>,
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Record per-prompt wall-clock time (makes output non-reproducible).
    #[arg(long)]
    pub timing: bool,
}

#[derive(Args, Debug)]
pub struct EvalInputs {
    #[command(flatten)]
    pub target: BackendArgs,
    #[arg(long)]
    pub bundle: PathBuf,
    /// Multiple-choice JSON-lines file.
    #[arg(long)]
    pub mc: Option<PathBuf>,
    /// Generation prompts, one per line.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub inputs: EvalInputs,
    #[arg(long, default_value = "fasb")]
    pub mode: Mode,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub s: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub inputs: EvalInputs,
    #[arg(long, value_delimiter = ',', default_value = "fasb")]
    pub modes: Vec<Mode>,
    /// Head counts; each takes the top-k heads of the bundle.
    #[arg(long, value_delimiter = ',')]
    pub ks: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub ss: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub betas: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub alphas: Vec<f64>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub bind: String,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

fn dispatch(cli: Cli, args: Vec<String>) -> Result<()> {
    match cli.command {
        Command::Synth(a) => commands::synth(a, args),
        Command::Extract(a) => commands::extract(a, args),
        Command::Anchor(a) => commands::anchor(a, args),
        Command::Generate(a) => commands::generate(a, args),
        Command::Eval(a) => commands::eval(a, args),
        Command::Sweep(a) => commands::sweep(a, args),
        Command::ServeBridge(a) => commands::serve_bridge(a),
        Command::Replay(a) => {
            let m = manifest::load(&a.manifest)?;
            let argv = std::iter::once("fasb".to_string()).chain(m.args.iter().cloned());
            let cli = Cli::try_parse_from(argv)?;
            if matches!(cli.command, Command::Replay(_)) {
                anyhow::bail!("a manifest cannot replay another replay");
            }
            dispatch(cli, m.args)
        }
    }
}

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    dispatch(Cli::parse(), args)
}
