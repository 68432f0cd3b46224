//! `pcis`: fit → synthesize → verify → simulate, with byte-stable JSON outputs.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug)]
pub enum CliError {
    /// Infeasible synthesis or a certificate that fails its checks.
    Failure(String),
    /// Bad flags, unreadable files, malformed documents.
    Usage(String),
}

impl From<pcis_core::Error> for CliError {
    fn from(e: pcis_core::Error) -> Self {
        match e {
            pcis_core::Error::Infeasible(_) => CliError::Failure(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "pcis",
    version,
    about = "Probabilistic invariant sets for GP state-space models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Store wall-clock times in outputs (makes them differ between runs).
    #[arg(long, global = true)]
    record_timing: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a GP state-space model to transition data.
    Fit(FitArgs),
    /// Compute a PCI set and gain for a fitted model.
    Synthesize(SynthesizeArgs),
    /// Re-check a PCI certificate against a model.
    Verify(VerifyArgs),
    /// Monte Carlo containment statistics of a PCI set.
    Simulate(SimulateArgs),
    /// Seeded end-to-end run on the synthetic planar quadrotor.
    DemoQuadrotor(DemoArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiRuleArg {
    Guaranteed,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DynamicsArg {
    /// Independent draws from the model's posterior predictive.
    Posterior,
    /// The built-in planar quadrotor plus Gaussian noise.
    Quadrotor,
}

#[derive(Args, Serialize)]
pub struct FitArgs {
    /// CSV with columns x1..xn,u1..um,xp1..xpn (or k,x..,u.. with --trajectory).
    #[arg(long)]
    pub data: PathBuf,
    /// Read consecutive rows of one trajectory instead of transitions.
    #[arg(long)]
    pub trajectory: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,
    /// One lengthscale per regressor.
    #[arg(long)]
    pub ard: bool,
    #[arg(long, default_value_t = 100)]
    pub max_iterations: u64,
    #[arg(long, value_enum, default_value_t = PhiRuleArg::Guaranteed)]
    pub phi_rule: PhiRuleArg,
}

#[derive(Args, Serialize)]
pub struct SynthesizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub constraints: PathBuf,
    #[arg(long, default_value_t = 1e-3)]
    pub delta: f64,
    /// Number of contraction factors tried in (0, 1).
    #[arg(long, default_value_t = 20)]
    pub eta_grid: usize,
    #[arg(long, default_value_t = 0.5)]
    pub p_init: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct VerifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub pci: PathBuf,
    /// Overrides the constraints stored in the PCI file.
    #[arg(long)]
    pub constraints: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct SimulateArgs {
    /// Required for posterior dynamics.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub pci: PathBuf,
    /// Overrides the constraints stored in the PCI file.
    #[arg(long)]
    pub constraints: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = DynamicsArg::Posterior)]
    pub dynamics: DynamicsArg,
    #[arg(long, default_value_t = 0.005)]
    pub drag: f64,
    #[arg(long)]
    pub saturation: Option<f64>,
    #[arg(long, default_value_t = 1e-3)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 100)]
    pub horizon: usize,
    #[arg(long, default_value_t = 1000)]
    pub rollouts: usize,
    /// Fixed initial state, comma separated; default is uniform over the PCI set.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also dump trajectories of the first --csv-rollouts rollouts.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub csv_rollouts: usize,
}

#[derive(Args, Serialize)]
pub struct DemoArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub transitions: usize,
    #[arg(long, default_value_t = 10_000)]
    pub rollouts: usize,
    #[arg(long, default_value_t = 100)]
    pub horizon: usize,
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,
}

/// Flags shared by every subcommand.
pub struct Context {
    pub seed: u64,
    pub jobs: Option<usize>,
    pub record_timing: bool,
    start: Instant,
}

impl Context {
    pub fn stamp(&self, manifest: &mut manifest::RunManifest) {
        if self.record_timing {
            manifest.wall_clock_seconds = Some(self.start.elapsed().as_secs_f64());
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = Context {
        seed: cli.seed,
        jobs: cli.jobs,
        record_timing: cli.record_timing,
        start: Instant::now(),
    };
    if ctx.jobs == Some(0) {
        eprintln!("error: --jobs must be at least 1");
        return ExitCode::from(2);
    }
    let result = match &cli.command {
        Command::Fit(a) => commands::fit(&ctx, a),
        Command::Synthesize(a) => commands::synthesize(&ctx, a),
        Command::Verify(a) => commands::verify(&ctx, a),
        Command::Simulate(a) => commands::simulate(&ctx, a),
        Command::DemoQuadrotor(a) => commands::demo(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Failure(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
