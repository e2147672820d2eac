//! `mvparts`: synthesize datasets, train models, run single- or multi-view
//! inference and score the results.

mod commands;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mvparts::pipeline::EstimatorChoice;
use mvparts::synth::CorruptionMode;

pub const LOG_ENV: &str = "MVPARTS_LOG";

#[derive(Debug, Parser)]
#[command(name = "mvparts", version, about = "Multi-view articulated pose estimation")]
pub struct Cli {
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for scene generation and type clustering.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-camera dataset.
    Synth(SynthArgs),
    /// Build a model, co-occurrence table and gating thresholds from a dataset.
    Train(TrainArgs),
    /// Estimate poses for every frame and view.
    Infer(InferArgs),
    /// Score pose files against dataset ground truth.
    Eval(EvalArgs),
    /// Grid-search the coupling weights on a hold-out dataset.
    Tune(TuneArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Single,
    Multi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Estimator {
    Oracle,
    Heuristic,
    Off,
}

impl From<Estimator> for EstimatorChoice {
    fn from(e: Estimator) -> Self {
        match e {
            Estimator::Oracle => EstimatorChoice::Oracle,
            Estimator::Heuristic => EstimatorChoice::Heuristic,
            Estimator::Off => EstimatorChoice::Off,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Corruption {
    Blank,
    Swap,
    Noise,
}

impl From<Corruption> for CorruptionMode {
    fn from(c: Corruption) -> Self {
        match c {
            Corruption::Blank => CorruptionMode::Blank,
            Corruption::Swap => CorruptionMode::Swap,
            Corruption::Noise => CorruptionMode::Noise,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    /// Negative mean 3D segment error.
    Error,
    /// Overall PCP3D at the first `--gamma`.
    Pcp,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene configuration JSON; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub cameras: Option<usize>,
    /// Fraction of frames with a corrupted limb.
    #[arg(long)]
    pub corrupt_fraction: Option<f64>,
    /// Number of views the corrupted limb is corrupted in.
    #[arg(long, default_value_t = 1)]
    pub corrupt_views: usize,
    #[arg(long, value_enum, default_value_t = Corruption::Blank)]
    pub corrupt_mode: Corruption,
    /// Noise standard deviation for `--corrupt-mode noise`.
    #[arg(long, default_value_t = 0.4)]
    pub corrupt_magnitude: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory or manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Types per part.
    #[arg(long, default_value_t = 4)]
    pub types: usize,
    /// Pyramid levels.
    #[arg(long, default_value_t = 2)]
    pub levels: usize,
    /// Output directory for model.json, coupling.json and train_report.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelInputs {
    /// Dataset directory or manifest.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Co-occurrence table and thresholds; defaults to coupling.json next to the model.
    #[arg(long)]
    pub coupling: Option<PathBuf>,
    /// Calibration overriding the dataset's.
    #[arg(long)]
    pub calib: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub inputs: ModelInputs,
    #[arg(long, value_enum, default_value_t = Mode::Single)]
    pub mode: Mode,
    /// Geometric weight; defaults to the coupling file's value.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Appearance weight; defaults to the coupling file's value.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, value_enum, default_value_t = Estimator::Heuristic)]
    pub estimator: Estimator,
    /// Maximum coordinate-ascent rounds.
    #[arg(long, default_value_t = 20)]
    pub max_iters: usize,
    /// Output directory for pose files.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory or manifest holding the ground truth.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory of pose files written by `infer`.
    #[arg(long)]
    pub poses: PathBuf,
    /// Pose files of a reference run for the error-difference histogram.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long)]
    pub calib: Option<PathBuf>,
    /// PCP thresholds; repeat or separate with commas.
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    pub gamma: Vec<f64>,
    /// Also write SVG plots next to the report.
    #[arg(long)]
    pub plots: bool,
    /// Report path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub inputs: ModelInputs,
    #[arg(long, value_enum, default_value_t = Estimator::Heuristic)]
    pub estimator: Estimator,
    #[arg(long, value_delimiter = ',', default_value = "0,0.01,0.05,0.2")]
    pub grid_alpha: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,2")]
    pub grid_beta: Vec<f64>,
    #[arg(long, value_enum, default_value_t = Metric::Error)]
    pub metric: Metric,
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    pub gamma: Vec<f64>,
    #[arg(long, default_value_t = 20)]
    pub max_iters: usize,
    /// Store the selected weights in the coupling file.
    #[arg(long)]
    pub write_coupling: bool,
    /// Surface report path.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report("usage", e.to_string().trim_end());
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            report(f.kind, &format!("{:#}", f.error));
            ExitCode::FAILURE
        }
    }
}

fn report(kind: &str, message: &str) {
    eprintln!("{}", serde_json::json!({ "error": { "kind": kind, "message": message } }));
}
