//! Command-line surface. Every flag can also be set as `key = value` in a `--config` file.

use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "molrg", version, about = "Diffusion models on mixtures of low-rank Gaussians")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Master random seed
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory
    #[arg(long, global = true, env = "MOLRG_OUT", default_value = "out")]
    pub out_dir: PathBuf,
    /// Worker threads for parallel experiments (0 = all cores)
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Flat `key = value` file; explicit flags take precedence over it
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a random model and a dataset from it
    Gen(GenArgs),
    /// Train denoiser bases with SGD on a dataset
    Train(TrainArgs),
    /// Success-rate grid over subspace dimension and sample count
    Phase(PhaseArgs),
    /// GL score of a sample file, or the train-then-sample GL curve
    Glscore(GlArgs),
    /// Numerical rank of the denoiser Jacobian along forward trajectories
    Rank(RankArgs),
    /// Perturb a noisy state along a Jacobian singular vector and finish sampling
    Sweep(SweepArgs),
    /// Reverse-time sampling with the probability-flow ODE
    Sample(SampleArgs),
    /// Concentration suite and invariant checks
    Check(CheckArgs),
}

#[derive(Debug, Args, Clone)]
pub struct ScheduleArgs {
    /// Lower noise level of the linear VE schedule
    #[arg(long, default_value_t = 0.0)]
    pub sigma_min: f64,
    /// Upper noise level of the linear VE schedule
    #[arg(long, default_value_t = 1.0)]
    pub sigma_max: f64,
    /// VP schedule beta at t = 0
    #[arg(long, default_value_t = 0.1)]
    pub beta_min: f64,
    /// VP schedule beta at t = 1
    #[arg(long, default_value_t = 20.0)]
    pub beta_max: f64,
    /// Loss weighting over time: unit or snr
    #[arg(long, default_value = "unit")]
    pub weighting: String,
}

#[derive(Debug, Args, Clone)]
pub struct ModelArgs {
    /// Ambient dimension
    #[arg(long, default_value_t = 48)]
    pub n: usize,
    /// Number of components
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    /// Dimension of every component
    #[arg(long, default_value_t = 6)]
    pub d: usize,
    /// Jointly orthonormal bases
    #[arg(long, default_value_t = true, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    pub orth: bool,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct GenArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Number of samples
    #[arg(long, default_value_t = 1000)]
    pub num: usize,
    /// Norm of the additive noise on every sample
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Draw exactly num/K samples per component instead of sampling labels
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    pub balanced: bool,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    /// Dataset file (default: <out-dir>/dataset.json)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Model file giving the component dimensions and the initialization target
    /// (default: <out-dir>/model.json)
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Component dimensions, e.g. `6,6`; auto reads them from the model file
    #[arg(long, default_value = "auto")]
    pub dims: String,
    /// Denoiser: single, softmax, hardmax; auto is single for one component, softmax otherwise
    #[arg(long, default_value = "auto")]
    pub param: String,
    /// Learning rate; auto is 1e-4 for one component, 2e-5 otherwise
    #[arg(long, default_value = "auto")]
    pub lr: String,
    /// Minibatch size; auto is 128·N_k for one component, 1024 otherwise
    #[arg(long, default_value = "auto")]
    pub batch: String,
    /// Iterations; auto is 1e4 for one component, 1e5 otherwise
    #[arg(long, default_value = "auto")]
    pub iters: String,
    /// Number of time grid points
    #[arg(long, default_value_t = 64)]
    pub time_steps: usize,
    /// Start from the model's bases plus this multiple of a shared Gaussian perturbation
    #[arg(long)]
    pub init_from_truth: Option<f64>,
    /// Noise draws per minibatch: shared or per_sample
    #[arg(long, default_value = "shared")]
    pub noise_sharing: String,
    /// Trace row interval; auto is 100 for one component, 1000 otherwise
    #[arg(long, default_value = "auto")]
    pub log_every: String,
    /// Noise schedule: ve_linear or vp
    #[arg(long, default_value = "ve_linear")]
    pub schedule: String,
    #[command(flatten)]
    pub sched: ScheduleArgs,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct PhaseArgs {
    /// Recovery method: pca, sgd, ksubspaces
    #[arg(long, default_value = "pca")]
    pub method: String,
    /// Ambient dimension
    #[arg(long, default_value_t = 48)]
    pub n: usize,
    /// Number of components
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    /// Jointly orthonormal bases
    #[arg(long, default_value_t = true, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    pub orth: bool,
    /// Subspace dimensions, as `a..b` or a comma list
    #[arg(long, default_value = "2..8")]
    pub d: String,
    /// Sample counts (per component when K > 1), as `a..b` or a comma list
    #[arg(long, default_value = "2..15")]
    pub num: String,
    /// Trials per cell
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    /// Norm of the additive noise on every sample
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// K-subspaces random restarts
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
    /// Noise schedule used by SGD: ve_linear or vp
    #[arg(long, default_value = "ve_linear")]
    pub schedule: String,
    #[command(flatten)]
    pub sched: ScheduleArgs,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct GlArgs {
    /// Generated samples to score; without it the GL curve is computed
    #[arg(long)]
    pub generated: Option<PathBuf>,
    /// Training dataset (default: <out-dir>/dataset.json)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Model for the reference draw (default: <out-dir>/model.json)
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Curve: ambient dimension
    #[arg(long, default_value_t = 48)]
    pub n: usize,
    /// Curve: number of components
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    /// Curve: component dimensions to sweep
    #[arg(long, default_value = "6")]
    pub d: String,
    /// Curve: samples per component as multiples of d_k
    #[arg(long, default_value = "0.5,1,2,5,20")]
    pub ratios: String,
    /// Curve: number of seeds per point
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Curve: SGD iterations
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
    /// Curve: SGD learning rate
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    /// Curve: SGD minibatch size
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    /// Curve: perturbation of the true bases at initialization
    #[arg(long, default_value_t = 0.2)]
    pub init_perturb: f64,
    /// Heun steps
    #[arg(long, default_value_t = 18)]
    pub steps: usize,
    /// Noise schedule: ve_linear or vp
    #[arg(long, default_value = "vp")]
    pub schedule: String,
    #[command(flatten)]
    pub sched: ScheduleArgs,
}

#[derive(Debug, Args, Clone)]
pub struct SourceArgs {
    /// Ground-truth model file (default: <out-dir>/model.json unless --params is given)
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Learned parameters; the soft-max denoiser is used
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Dataset supplying the clean starting sample (default: a draw from the model)
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct RankArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    /// Energy share defining the numerical rank
    #[arg(long, default_value_t = 0.99)]
    pub eta: f64,
    /// Number of noise trajectories
    #[arg(long, default_value_t = 15)]
    pub trajectories: usize,
    /// Number of time grid points
    #[arg(long, default_value_t = 64)]
    pub time_steps: usize,
    /// Noise schedule: ve_linear or vp
    #[arg(long, default_value = "ve_linear")]
    pub schedule: String,
    #[command(flatten)]
    pub sched: ScheduleArgs,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct SweepArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    /// Time of the perturbed state
    #[arg(long, default_value_t = 0.4)]
    pub t: f64,
    /// 1-based index of the singular vector
    #[arg(long, default_value_t = 1)]
    pub index: usize,
    /// Step sizes along the direction
    #[arg(long, default_value = "-3,-2,-1,0,1,2,3", allow_hyphen_values = true)]
    pub alphas: String,
    /// Energy share defining the numerical rank
    #[arg(long, default_value_t = 0.99)]
    pub eta: f64,
    /// Heun steps from t to the end
    #[arg(long, default_value_t = 18)]
    pub steps: usize,
    /// Noise schedule: ve_linear or vp
    #[arg(long, default_value = "vp")]
    pub schedule: String,
    #[command(flatten)]
    pub sched: ScheduleArgs,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct SampleArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    /// Heun steps
    #[arg(long, default_value_t = 18)]
    pub steps: usize,
    /// Number of samples
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// Noise level at which integration stops
    #[arg(long, default_value_t = 0.002)]
    pub sigma_end: f64,
    /// Noise schedule: ve_linear or vp
    #[arg(long, default_value = "vp")]
    pub schedule: String,
    #[command(flatten)]
    pub sched: ScheduleArgs,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct CheckArgs {
    /// Smaller sample sizes; finishes in seconds
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    pub quick: bool,
}
