use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use energy_calib::consumption_models::ModelKind;
use energy_calib::evaluation::MetricMode;
use energy_calib::trajectory_store::VehicleMode;

#[derive(Debug, Parser)]
#[command(
    name = "energy-calib",
    version,
    about = "Calibrate and cross-check microscopic vehicle energy models"
)]
pub struct Cli {
    /// JSON config file; flags override its fields.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Output directory, created if missing.
    #[arg(long, global = true, env = "ENERGY_CALIB_OUT", value_name = "DIR")]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with known ground truth.
    Synth(SynthArgs),
    /// Ingest raw runs, resample, compute energies and clean.
    Process(ProcessArgs),
    /// Fit consumption models and report adjusted R².
    Fit(FitArgs),
    /// Score a stored model against samples.
    Eval(EvalArgs),
    /// Group cross-application matrices for ACC and HV data.
    Crossval(CrossvalArgs),
    /// Collect earlier outputs into a markdown report.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Dataset seed; every per-run seed derives from it.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Runs per vehicle mode.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub runs: Option<u32>,

    /// Ticks per run.
    #[arg(long, value_parser = clap::value_parser!(u64).range(3..))]
    pub run_length: Option<u64>,

    /// Noise sigma as a fraction of mean |J|, ACC runs.
    #[arg(long)]
    pub noise_acc: Option<f64>,

    /// Noise sigma as a fraction of mean |J|, HV runs.
    #[arg(long)]
    pub noise_hv: Option<f64>,

    /// Generate HV runs from the ACC truth and noise level.
    #[arg(long)]
    pub null_control: bool,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["manifest", "inputs"])))]
pub struct ProcessArgs {
    /// Dataset manifest listing CSV files and their modes.
    #[arg(long)]
    pub manifest: Option<PathBuf>,

    /// CSV files in the raw record schema.
    #[arg(value_name = "CSV")]
    pub inputs: Vec<PathBuf>,

    /// Resampling tick in seconds.
    #[arg(long)]
    pub dt: Option<f64>,

    /// Drop samples slower than this (m/s).
    #[arg(long)]
    pub min_speed: Option<f64>,

    /// Drop zero-acceleration samples with less total energy than this (J).
    #[arg(long)]
    pub energy_floor: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    /// Iteration budget of the AA-Micro solver.
    #[arg(long)]
    pub max_iters: Option<usize>,

    /// Stop once an accepted step improves SSE by less than this fraction.
    #[arg(long)]
    pub rel_tol: Option<f64>,

    /// Initial damping of the AA-Micro solver.
    #[arg(long)]
    pub damping_init: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModelChoice {
    All,
    #[value(alias = "vt_micro", alias = "vt-micro")]
    Vtmicro,
    Arrb,
    #[value(alias = "aa_micro", alias = "aa-micro")]
    Aamicro,
}

impl ModelChoice {
    pub fn kinds(self) -> Vec<ModelKind> {
        match self {
            ModelChoice::All => ModelKind::ALL.to_vec(),
            ModelChoice::Vtmicro => vec![ModelKind::VtMicro],
            ModelChoice::Arrb => vec![ModelKind::Arrb],
            ModelChoice::Aamicro => vec![ModelKind::AaMicro],
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Cleaned samples CSV from `process`.
    #[arg(long)]
    pub samples: PathBuf,

    #[arg(long, value_enum, default_value_t = ModelChoice::All)]
    pub model: ModelChoice,

    /// Restrict to one vehicle mode; default fits every mode present.
    #[arg(long)]
    pub mode: Option<VehicleMode>,

    /// Fraction of samples used for training, in (0, 1).
    #[arg(long)]
    pub train_ratio: Option<f64>,

    /// Seed of the shuffled train/test split.
    #[arg(long)]
    pub split_seed: Option<u64>,

    /// Train on the first part in (mode, run, tick) order instead of a
    /// seeded shuffle.
    #[arg(long)]
    pub sequential: bool,

    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Cleaned samples CSV from `process`.
    #[arg(long)]
    pub samples: PathBuf,

    /// Model coefficients JSON written by `fit`.
    #[arg(long)]
    pub model_file: PathBuf,

    #[arg(long)]
    pub mode: Option<VehicleMode>,

    /// Metric formulas: conventional or paper-literal.
    #[arg(long)]
    pub metric: Option<MetricMode>,

    /// Histogram bins for residual densities.
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CrossvalArgs {
    /// Cleaned samples CSV from `process`.
    #[arg(long)]
    pub samples: PathBuf,

    /// Three run groups, e.g. "1,4,7;2,5,8;3,6,9".
    #[arg(long)]
    pub groups: Option<String>,

    /// Metric formulas: conventional or paper-literal.
    #[arg(long)]
    pub metric: Option<MetricMode>,

    /// Histogram bins for residual densities.
    #[arg(long)]
    pub bins: Option<usize>,

    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory holding earlier outputs; defaults to the output directory.
    #[arg(long)]
    pub dir: Option<PathBuf>,
}
