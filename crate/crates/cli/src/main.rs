use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use jointflow::odesolve::Method;

mod commands;
mod config;
mod manifest;
mod pairs;

/// Joint flow matching experiments at desk scale.
#[derive(Debug, Parser)]
#[command(name = "jointflow", version)]
pub struct Cli {
    /// Sectioned TOML configuration; defaults apply to anything left out.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract and invert features of a WAV file and report the reconstruction error.
    Roundtrip {
        input: PathBuf,
    },
    /// Estimate a noise profile from a directory of clean/degraded pairs.
    Calibrate(CalibrateArgs),
    /// Train a tiled flow model on a directory of clean/degraded pairs.
    Train(TrainArgs),
    /// Enhance a degraded WAV file with a trained model.
    Enhance(EnhanceArgs),
    /// Write the field of a 2-D toy problem on a regular grid as CSV.
    Fieldviz(FieldvizArgs),
    /// Endpoint spread of toy-problem samples across step counts, as CSV.
    Dispersion(DispersionArgs),
    /// Objective metrics of estimates against references.
    Metrics(MetricsArgs),
    /// Generate synthetic clean/degraded pairs.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    pub pairs: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    /// One value per frequency row instead of a single scalar.
    #[arg(long)]
    pub per_frequency: bool,
    #[arg(long, default_value_t = jointflow::calibration::DEFAULT_QUANTILE)]
    pub quantile: f64,
    /// Gaussian smoothing bandwidth in rows for per-frequency profiles; 0 disables smoothing.
    #[arg(long, default_value_t = jointflow::calibration::DEFAULT_BANDWIDTH)]
    pub bandwidth: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub pairs: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    /// Noise profile; the configured scalar is used when absent.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    pub input: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub profile: PathBuf,
    #[arg(long, value_enum)]
    pub solver: Option<SolverArg>,
    /// Field evaluations; midpoint needs an even count.
    #[arg(long)]
    pub nfe: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SolverArg {
    Euler,
    Midpoint,
}

impl From<SolverArg> for Method {
    fn from(s: SolverArg) -> Self {
        match s {
            SolverArg::Euler => Method::Euler,
            SolverArg::Midpoint => Method::Midpoint,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProblemArg {
    Single,
    Two,
    Three,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PathArg {
    Joint,
    Constant,
}

#[derive(Debug, Args)]
pub struct FieldvizArgs {
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "single")]
    pub problem: ProblemArg,
    #[arg(long, default_value_t = 0.4)]
    pub sigma: f64,
    #[arg(long, short, default_value_t = 0.5)]
    pub t: f64,
    #[arg(long, value_enum, default_value = "joint")]
    pub path: PathArg,
    #[arg(long, default_value_t = 21)]
    pub resolution: usize,
    /// Half-width of the square grid around the origin.
    #[arg(long, default_value_t = 2.0)]
    pub extent: f64,
    /// Evaluate a trained 2-D model instead of the exact field.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DispersionArgs {
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "single")]
    pub problem: ProblemArg,
    #[arg(long, default_value_t = 0.4)]
    pub sigma: f64,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [2, 5, 10, 25, 50])]
    pub steps: Vec<usize>,
    #[arg(long, value_enum, default_value = "midpoint")]
    pub solver: SolverArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Estimate WAV file or directory.
    #[arg(long)]
    pub estimate: PathBuf,
    /// Reference WAV file or directory; files are matched on the name before the first dot.
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 1.0)]
    pub duration: f64,
    /// `smooth:<frames>`, `quantize:<levels>`, `lowpass:<row>` or `noise:<level>:<lo>:<hi>`.
    #[arg(long, default_value = "smooth:3")]
    pub degrade: String,
    /// Background noise level in dB below full scale.
    #[arg(long, default_value_t = 50.0)]
    pub background_db: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
