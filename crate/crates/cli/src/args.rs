//! Command-line surface. Every field's long flag doubles as a config-file key.

use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand};
use guidelab::guidance::{GuidanceMode, DEFAULT_TRUNCATION_FACTOR};
use serde::Serialize;

const PRECEDENCE: &str = "Options are resolved in this order, later wins: built-in defaults, \
the --config file (flat `key = value` lines, `#` comments, keys are long flag names), flags \
given on the command line. Each run writes the resolved options to config.txt in its output \
directory; that file is a valid --config for the same subcommand.";

#[derive(Debug, Parser)]
#[command(name = "guidelab", version, about = "Toy 2D diffusion guidance laboratory", after_help = PRECEDENCE)]
#[command(args_override_self = true)]
pub struct Cli {
    /// Read options from a key = value file; command-line flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker threads for sampling (results do not depend on it).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Export the fractal mixture and its outlier thresholds.
    MakeData(MakeDataArgs),
    /// Train a denoiser on the mixture.
    Train(TrainArgs),
    /// Sample a population with optional guidance.
    Sample(SampleArgs),
    /// Score a population against the mixture.
    Eval(EvalArgs),
    /// Local grid search over guidance weight and EMA lengths.
    Sweep(SweepArgs),
    /// Guide a corrupted model with a more corrupted copy of itself.
    CorruptExperiment(CorruptArgs),
    /// Render a figure preset to PPM with a CSV sidecar.
    Render(RenderArgs),
    /// Train, sample, evaluate and render the full toy pipeline.
    Repro(ReproArgs),
}

fn parse_mode(s: &str) -> Result<GuidanceMode, String> {
    s.parse().map_err(|e: guidelab::Error| e.to_string())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// Mixture file from make-data; without it the fractal is rebuilt from --mixture-seed.
    #[arg(long, value_name = "FILE")]
    pub data: Option<PathBuf>,

    #[arg(long, default_value_t = 0)]
    pub mixture_seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ScheduleArgs {
    /// Heun steps; the sampler spends 2N-1 denoiser evaluations.
    #[arg(long, default_value_t = 32)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.002)]
    pub sigma_min: f64,
    #[arg(long, default_value_t = 5.0)]
    pub sigma_max: f64,
    #[arg(long, default_value_t = 7.0)]
    pub rho: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GuidanceArgs {
    /// none, cfg, autoguidance, naive_truncation or multi.
    #[arg(long, default_value = "none", value_parser = parse_mode)]
    pub mode: GuidanceMode,
    /// Guidance weight; 1 disables guidance.
    #[arg(long, default_value_t = 1.0)]
    pub w: f64,
    /// Share of the extrapolation given to the reduced guide in multi mode.
    #[arg(long, default_value_t = 0.0)]
    pub alpha: f64,
    /// Guidance is applied for sigma in (lo, hi]; both bounds must be given.
    #[arg(long, requires = "interval_hi")]
    pub interval_lo: Option<f64>,
    #[arg(long, requires = "interval_lo")]
    pub interval_hi: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_TRUNCATION_FACTOR)]
    pub trunc_factor: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MakeDataArgs {
    #[arg(long, default_value_t = 0)]
    pub mixture_seed: u64,
    /// Ground-truth draws used to calibrate the outlier thresholds.
    #[arg(long, default_value_t = guidelab::evalmetrics::CALIBRATION_SAMPLES)]
    pub calibration_samples: usize,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Train the class-marginal model instead of a conditional one.
    #[arg(long, default_value_t = false, action = ArgAction::Set)]
    pub unconditional: bool,
    #[arg(long, default_value = "energy", value_parser = ["energy", "direct_score"])]
    pub head: String,
    #[arg(long, default_value_t = 4096)]
    pub iterations: u64,
    #[arg(long, default_value_t = 4096)]
    pub batch_size: usize,
    #[arg(long, default_value_t = -2.3, allow_negative_numbers = true)]
    pub p_mean: f64,
    #[arg(long, default_value_t = 1.5)]
    pub p_std: f64,
    #[arg(long, default_value_t = 0.01)]
    pub alpha_ref: f64,
    #[arg(long, default_value_t = 512)]
    pub t_ref: u64,
    #[arg(long, default_value = "exact_sm", value_parser = ["exact_sm", "denoising_sm"])]
    pub loss: String,
    /// EMA lengths stored in the checkpoint, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = guidelab::trainer::DEFAULT_EMA_SIGMA_RELS)]
    pub ema_sigma_rels: Vec<f64>,
    /// Seeds both the initialization and the training stream.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SampleArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Main model checkpoint.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Guide checkpoint (cfg, autoguidance; the unconditional guide in multi mode).
    #[arg(long, value_name = "FILE")]
    pub guide: Option<PathBuf>,
    /// Reduced guide checkpoint for multi mode.
    #[arg(long, value_name = "FILE")]
    pub second_guide: Option<PathBuf>,
    /// EMA length to load from each checkpoint; 0 loads the raw weights.
    #[arg(long, default_value_t = guidelab::trainer::PRIMARY_EMA_SIGMA_REL)]
    pub ema: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub guidance: GuidanceArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub schedule: ScheduleArgs,
    /// Classes to sample, comma separated; all classes when omitted.
    #[arg(long, value_delimiter = ',')]
    pub classes: Vec<usize>,
    /// Samples per class.
    #[arg(long, default_value_t = 5000)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write every sample's path to trajectories.csv.
    #[arg(long, default_value_t = false, action = ArgAction::Set)]
    pub trajectories: bool,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Population CSV (sample_id,class,x,y).
    #[arg(long, value_name = "FILE")]
    pub population: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub guide: PathBuf,
    /// cfg or autoguidance.
    #[arg(long, default_value = "autoguidance", value_parser = parse_mode)]
    pub mode: GuidanceMode,
    /// Guidance weights searched, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = guidelab::evalmetrics::SweepSpace::weight_grid())]
    pub w_grid: Vec<f64>,
    /// EMA lengths of the main model, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = guidelab::trainer::DEFAULT_EMA_SIGMA_RELS)]
    pub ema_main_grid: Vec<f64>,
    /// EMA lengths of the guide, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = guidelab::trainer::DEFAULT_EMA_SIGMA_RELS)]
    pub ema_guide_grid: Vec<f64>,
    /// Starting point; each value snaps to the nearest grid entry.
    #[arg(long, default_value_t = 2.0)]
    pub start_w: f64,
    #[arg(long, default_value_t = guidelab::trainer::PRIMARY_EMA_SIGMA_REL)]
    pub start_ema_main: f64,
    #[arg(long, default_value_t = guidelab::trainer::PRIMARY_EMA_SIGMA_REL)]
    pub start_ema_guide: f64,
    /// Neighbourhood half-width in grid steps.
    #[arg(long, default_value_t = 1)]
    pub radius: usize,
    /// Evaluations per point in the final neighbourhood (best-of-k).
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// Maximum objective evaluations, counting those of a resumed state.
    #[arg(long, default_value_t = 200)]
    pub budget: usize,
    /// Samples per class per evaluation.
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Continue from sweep_state.json in the output directory when present.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub resume: bool,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

/// Main/guide pairings scanned by default: matched dropout, matched input
/// noise, and the two mismatched combinations.
pub const DEFAULT_PAIRS: [&str; 4] = [
    "dropout:0.05/dropout:0.10",
    "input_noise:0.10/input_noise:0.20",
    "dropout:0.05/input_noise:0.20",
    "input_noise:0.10/dropout:0.10",
];

#[derive(Debug, Clone, Args, Serialize)]
pub struct CorruptArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Base model checkpoint; both main and guide are corrupted copies of it.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = guidelab::trainer::PRIMARY_EMA_SIGMA_REL)]
    pub ema: f64,
    /// Pairings as KIND:STRENGTH/KIND:STRENGTH (main/guide), comma separated;
    /// KIND is dropout or input_noise.
    #[arg(long, value_delimiter = ',', default_values = DEFAULT_PAIRS)]
    pub pairs: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 1.25, 1.5, 1.75, 2.0, 2.5, 3.0])]
    pub w_grid: Vec<f64>,
    /// Samples per class per weight.
    #[arg(long, default_value_t = 2000)]
    pub count: usize,
    /// Draw one dropout mask per model instead of one per evaluation.
    #[arg(long, default_value_t = false, action = ArgAction::Set)]
    pub frozen: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FigureArgs {
    /// Raster cells per axis.
    #[arg(long, default_value_t = 256)]
    pub resolution: usize,
    /// Output image side in pixels.
    #[arg(long, default_value_t = 512)]
    pub image_size: usize,
    /// Mass fraction enclosed by ground-truth contours.
    #[arg(long, default_value_t = guidelab::render::CONTOUR_MASS)]
    pub contour_mass: f64,
    /// Class shown in the figures.
    #[arg(long, default_value_t = 0)]
    pub figure_class: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RenderArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long, value_parser = ["fig1", "fig2", "fig9"])]
    pub preset: String,
    /// Population CSVs shown as fig1 panels, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub populations: Vec<PathBuf>,
    /// Main model (fig2, fig9).
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Unconditional guide (fig2, fig9).
    #[arg(long, value_name = "FILE")]
    pub uncond_guide: Option<PathBuf>,
    /// Reduced guide (fig9).
    #[arg(long, value_name = "FILE")]
    pub reduced_guide: Option<PathBuf>,
    #[arg(long, default_value_t = guidelab::trainer::PRIMARY_EMA_SIGMA_REL)]
    pub ema: f64,
    /// CFG weight of the fig2 trajectories.
    #[arg(long, default_value_t = 4.0)]
    pub cfg_w: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub figure: FigureArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReproArgs {
    #[arg(long, default_value_t = 0)]
    pub mixture_seed: u64,
    /// Seeds training and sampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = guidelab::evalmetrics::CALIBRATION_SAMPLES)]
    pub calibration_samples: usize,
    #[arg(long, default_value_t = 64)]
    pub main_width: usize,
    #[arg(long, default_value_t = 4096)]
    pub main_iterations: u64,
    /// Width of the reduced autoguidance model.
    #[arg(long, default_value_t = 32)]
    pub reduced_width: usize,
    #[arg(long, default_value_t = 512)]
    pub reduced_iterations: u64,
    /// Width of the unconditional CFG guide.
    #[arg(long, default_value_t = 32)]
    pub uncond_width: usize,
    #[arg(long, default_value_t = 512)]
    pub uncond_iterations: u64,
    #[arg(long, default_value_t = 4096)]
    pub batch_size: usize,
    /// EMA length used for every model.
    #[arg(long, default_value_t = guidelab::trainer::PRIMARY_EMA_SIGMA_REL)]
    pub ema: f64,
    /// Samples per class and condition.
    #[arg(long, default_value_t = 5000)]
    pub count: usize,
    #[arg(long, default_value_t = 4.0)]
    pub cfg_w: f64,
    #[arg(long, default_value_t = 3.0)]
    pub autoguidance_w: f64,
    #[arg(long, default_value_t = DEFAULT_TRUNCATION_FACTOR)]
    pub trunc_factor: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub schedule: ScheduleArgs,
    /// Render the figures after evaluation.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub figures: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub figure: FigureArgs,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}
