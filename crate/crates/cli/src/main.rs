//! `trodo`: calibrate, scan, build and evaluate model zoos.
//!
//! Exit codes: 0 success or Clean verdict, 3 Trojaned verdict, 1 usage
//! error (bad flag, malformed config, missing file), 2 runtime error.

mod commands;
mod config;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use trodo_core::benchmark::protocol::EvalMode;

/// Bad input from the user; exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "trodo", version, about = "Trojan scanner for image classifiers")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed (falls back to TRODO_SEED, then the config file, then 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for training and scanning.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// What to print on stdout.
    #[arg(long, global = true, value_enum, default_value_t = ReportFormat::Text)]
    pub report: ReportFormat,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Json,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Trodo,
    TrodoZero,
}

impl From<ModeArg> for EvalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Trodo => EvalMode::Trodo,
            ModeArg::TrodoZero => EvalMode::TrodoZero,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit ε and τ on a clean surrogate; writes calibration.json.
    Calibrate(CalibrateArgs),
    /// Scan one model; writes report.json and prints a summary line.
    Scan(ScanArgs),
    /// Build or evaluate a model zoo.
    #[command(subcommand)]
    Zoo(ZooCommand),
    /// Run the invariant checks.
    Selftest,
}

/// Overrides shared by the commands that run the attack.
#[derive(Debug, Clone, Default, Args)]
pub struct AttackArgs {
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Absolute boundary confidence level γ.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// γ as the surrogate's clean OOD confidence plus this margin.
    #[arg(long, conflicts_with = "gamma")]
    pub gamma_margin: Option<f64>,
    /// PGD steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Attack radius; skips the ε search.
    #[arg(long)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Clean surrogate model (.trodo).
    #[arg(long)]
    pub surrogate: Option<PathBuf>,
    /// Benign samples or validation set (.trodod).
    #[arg(long)]
    pub sources: Option<PathBuf>,
    #[command(flatten)]
    pub attack: AttackArgs,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    /// Model to scan (.trodo).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// calibration.json from `trodo calibrate`.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    /// Benign samples or validation set (.trodod).
    #[arg(long)]
    pub sources: Option<PathBuf>,
    /// OOD samples crafted for the scan.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[command(flatten)]
    pub attack: AttackArgs,
}

#[derive(Debug, Subcommand)]
pub enum ZooCommand {
    /// Train the surrogate and every zoo model.
    Build(ZooBuildArgs),
    /// Calibrate on the zoo surrogate and score every admitted model.
    Eval(ZooEvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 16×16 images, small CNN; minutes on one core.
    Desk,
    /// 32×32 images, MLP 256-128.
    Full,
}

#[derive(Debug, Args)]
pub struct ZooBuildArgs {
    /// Used when the config file has no `zoo` section.
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    /// Adversarial training (PGD-10, ℓ∞ 2/255) for every model.
    #[arg(long)]
    pub adversarial: bool,
    #[arg(long)]
    pub n_clean: Option<usize>,
    #[arg(long)]
    pub n_trojaned: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ZooEvalArgs {
    /// manifest.json written by `trodo zoo build`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub attack: AttackArgs,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            if let Some(u) = e.downcast_ref::<UsageError>() {
                eprintln!("error: {u}");
                ExitCode::from(1)
            } else {
                eprintln!("error: {e:#}");
                ExitCode::from(2)
            }
        }
    }
}
