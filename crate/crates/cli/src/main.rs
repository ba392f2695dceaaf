//! `tsa`: verification suites, toy training, sampling and cost sweeps.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage error, 3 runtime
//! divergence.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Verification(String),
    Diverged(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Verification(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Diverged(_) => 3,
        }
    }
}

impl From<tristream::error::Error> for CliError {
    fn from(e: tristream::error::Error) -> Self {
        use tristream::error::Error;
        match e {
            Error::TrainingDiverged { .. } | Error::SamplerDiverged { .. } => CliError::Diverged(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "tsa", version, about = "Tri-stream attention toolkit")]
struct Cli {
    /// Flat key=value config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare cache-on and cache-off sampling.
    VerifyCache(VerifyArgs),
    /// Analytic cost sweep.
    Cost(CostArgs),
    /// Train adapters and embedders on the toy task.
    Train(TrainArgs),
    /// Sample from a checkpoint.
    Sample(SampleArgs),
    /// Instrumented MAC counts against the analytic model.
    Bench(BenchArgs),
}

#[derive(Args, Default)]
struct Common {
    /// a, b, c, d or concat.
    #[arg(long)]
    variant: Option<String>,
    /// Image tokens (a square); comma lists in cost and bench.
    #[arg(long)]
    n: Option<String>,
    /// Text tokens.
    #[arg(long)]
    l: Option<String>,
    /// Denoising steps.
    #[arg(long = "t-steps")]
    t_steps: Option<String>,
    /// Model width.
    #[arg(long)]
    d: Option<String>,
    #[arg(long)]
    depth: Option<String>,
    #[arg(long)]
    heads: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Output directory (default: $TSA_OUT_DIR, else ./tsa-out).
    #[arg(long)]
    out: Option<String>,
    /// csv or json.
    #[arg(long)]
    format: Option<String>,
}

const COMMON_KEYS: [&str; 10] = ["variant", "n", "l", "t-steps", "d", "depth", "heads", "seed", "out", "format"];

impl Common {
    fn flags(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("variant", self.variant.clone()),
            ("n", self.n.clone()),
            ("l", self.l.clone()),
            ("t-steps", self.t_steps.clone()),
            ("d", self.d.clone()),
            ("depth", self.depth.clone()),
            ("heads", self.heads.clone()),
            ("seed", self.seed.clone()),
            ("out", self.out.clone()),
            ("format", self.format.clone()),
        ]
    }
}

fn bool_flag(b: bool) -> Option<String> {
    b.then(|| "true".to_string())
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// f32, f64 or both.
    #[arg(long)]
    precision: Option<String>,
    /// Perturb the cached block-0 entry before reuse (negative control).
    #[arg(long)]
    corrupt: bool,
    /// Run without mask tokens and compare against variant a.
    #[arg(long = "empty-mask")]
    empty_mask: bool,
    /// Checkpoint directory; random weights when absent.
    #[arg(long)]
    checkpoint: Option<String>,
}

#[derive(Args)]
struct CostArgs {
    #[command(flatten)]
    common: Common,
    /// Also write an SVG of cumulative overhead per variant.
    #[arg(long)]
    plot: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory of NNNN.mask.csv / NNNN.text pairs; synthetic when absent.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    /// Condition dropout probability.
    #[arg(long)]
    dropout: Option<String>,
    /// zero or empty.
    #[arg(long)]
    null: Option<String>,
    /// Gradient norm cap, or "none".
    #[arg(long)]
    clip: Option<String>,
    #[arg(long = "checkpoint-every")]
    checkpoint_every: Option<String>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<String>,
    /// Label grid CSV.
    #[arg(long)]
    mask: Option<String>,
    /// Whitespace-separated token ids.
    #[arg(long)]
    text: Option<String>,
    /// Sample with the mask condition dropped.
    #[arg(long = "no-mask")]
    no_mask: bool,
    /// Sample with the text condition dropped.
    #[arg(long = "no-text")]
    no_text: bool,
    /// f32 or f64.
    #[arg(long)]
    precision: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
}

fn keys(extra: &[&'static str]) -> Vec<&'static str> {
    COMMON_KEYS.iter().chain(extra).copied().collect()
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = cli.config.as_deref();
    match cli.command {
        Command::VerifyCache(a) => {
            let mut flags = a.common.flags();
            flags.extend([
                ("precision", a.precision),
                ("corrupt", bool_flag(a.corrupt)),
                ("empty-mask", bool_flag(a.empty_mask)),
                ("checkpoint", a.checkpoint),
            ]);
            let cfg = RunConfig::resolve(file, &keys(&["precision", "corrupt", "empty-mask", "checkpoint"]), flags)?;
            commands::verify_cache(&cfg)
        }
        Command::Cost(a) => {
            let mut flags = a.common.flags();
            flags.push(("plot", bool_flag(a.plot)));
            let cfg = RunConfig::resolve(file, &keys(&["plot"]), flags)?;
            commands::cost(&cfg)
        }
        Command::Train(a) => {
            let mut flags = a.common.flags();
            flags.extend([
                ("data", a.data),
                ("steps", a.steps),
                ("batch", a.batch),
                ("lr", a.lr),
                ("dropout", a.dropout),
                ("null", a.null),
                ("clip", a.clip),
                ("checkpoint-every", a.checkpoint_every),
            ]);
            let cfg = RunConfig::resolve(
                file,
                &keys(&["data", "steps", "batch", "lr", "dropout", "null", "clip", "checkpoint-every"]),
                flags,
            )?;
            commands::train(&cfg)
        }
        Command::Sample(a) => {
            let mut flags = a.common.flags();
            flags.extend([
                ("checkpoint", a.checkpoint),
                ("mask", a.mask),
                ("text", a.text),
                ("no-mask", bool_flag(a.no_mask)),
                ("no-text", bool_flag(a.no_text)),
                ("precision", a.precision),
            ]);
            let cfg = RunConfig::resolve(
                file,
                &keys(&["checkpoint", "mask", "text", "no-mask", "no-text", "precision"]),
                flags,
            )?;
            commands::sample(&cfg)
        }
        Command::Bench(a) => {
            let cfg = RunConfig::resolve(file, &keys(&[]), a.common.flags())?;
            commands::bench(&cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = match &e {
                CliError::Usage(m) => format!("usage error: {m}"),
                CliError::Verification(m) => format!("verification failed: {m}"),
                CliError::Diverged(m) => format!("diverged: {m}"),
            };
            eprintln!("tsa: {msg}");
            ExitCode::from(e.code())
        }
    }
}
