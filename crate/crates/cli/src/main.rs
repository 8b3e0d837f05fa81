use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Metric affordance recovery from video and cost-guided trajectory generation.
#[derive(Debug, Parser)]
#[command(name = "affordkit", version, about)]
pub struct Cli {
    /// Seed for every stochastic step.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// More progress output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Suppress progress output.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic hand-object scene (and optional arc training samples).
    Synth(SynthArgs),
    /// Closed-form global scale between predicted depth and SfM landmarks.
    CalibrateScale(CalibrateArgs),
    /// Refine per-frame poses and scales by cross-view depth consistency.
    RefinePoses(RefineArgs),
    /// Hand trajectory plus contact and goal points in the first camera frame.
    ExtractAffordance(ExtractArgs),
    /// Fuse depth frames (hand removed) into a TSDF volume.
    FuseTsdf(FuseArgs),
    /// Train the MLP trajectory denoiser on a directory of samples.
    TrainDenoiser(TrainArgs),
    /// Sample a batch of cost-guided trajectories.
    Generate(GenerateArgs),
    /// Order a batch by total cost.
    Rank(RankArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum HandArg {
    None,
    Static,
    Line,
    Arc,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory (manifest.json, ground_truth.json, samples/).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub frames: usize,
    #[arg(long, default_value_t = 200)]
    pub landmarks: usize,
    /// True global scale (metric = scale * SfM units).
    #[arg(long, default_value_t = 2.0)]
    pub scale: f64,
    /// Std of multiplicative depth noise.
    #[arg(long, default_value_t = 0.0)]
    pub depth_noise: f64,
    /// Initial pose rotation perturbation (degrees).
    #[arg(long, default_value_t = 0.0)]
    pub rot_perturb: f64,
    /// Initial pose translation perturbation (meters).
    #[arg(long, default_value_t = 0.0)]
    pub trans_perturb: f64,
    #[arg(long, value_enum, default_value_t = HandArg::Arc)]
    pub hand: HandArg,
    /// Also write this many arc training samples under samples/, centered on
    /// the hand's start.
    #[arg(long, default_value_t = 0)]
    pub samples: usize,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// scale.json from calibrate-scale.
    #[arg(long)]
    pub scale: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Plain gradient steps instead of Gauss-Newton preconditioning.
    #[arg(long)]
    pub plain_gradient: bool,
    /// Correspondence re-association rounds.
    #[arg(long, default_value_t = 20)]
    pub max_outer: usize,
    /// Descent iterations per round.
    #[arg(long, default_value_t = 300)]
    pub max_inner: usize,
    /// Source pixel decimation.
    #[arg(long, default_value_t = 4)]
    pub stride: usize,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// refined.json from refine-poses.
    #[arg(long)]
    pub refined: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "move the object")]
    pub instruction: String,
    #[arg(long, default_value_t = 8)]
    pub n_contact: usize,
    #[arg(long, default_value_t = 8)]
    pub n_goal: usize,
    /// Downsampling voxel (meters).
    #[arg(long, default_value_t = 0.01)]
    pub voxel: f64,
    /// Also export points and trajectory as ASCII PLY.
    #[arg(long)]
    pub ply: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Frames to fuse (repeatable). Frames other than 0 need --refined.
    /// Defaults to every frame with --refined, else frame 0.
    #[arg(long)]
    pub frame: Vec<usize>,
    /// refined.json, used to place frames relative to the first camera.
    #[arg(long)]
    pub refined: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.02)]
    pub voxel: f64,
    #[arg(long, default_value_t = 0.06)]
    pub truncation: f64,
    /// Depth range of the volume (meters).
    #[arg(long, default_value_t = 0.3)]
    pub near: f64,
    #[arg(long, default_value_t = 2.5)]
    pub far: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of sample JSON files.
    #[arg(long)]
    pub data: PathBuf,
    /// Volume for the spatial feature channel.
    #[arg(long)]
    pub volume: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 16)]
    pub horizon: usize,
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',', default_values_t = [256usize, 256])]
    pub widths: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the loss curve as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Direct,
    ThroughDenoiser,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// sample.json providing contact and goal points.
    #[arg(long)]
    pub sample: PathBuf,
    /// Scene volume (needed for collision guidance and the contact normal).
    #[arg(long)]
    pub volume: Option<PathBuf>,
    /// Trained denoiser; without one, a straight-line Gaussian prior from the
    /// contact centroid to the demonstrated endpoint is used.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Variance of the straight-line prior (m²).
    #[arg(long, default_value_t = 0.01)]
    pub prior_variance: f64,
    #[arg(long, default_value_t = 32)]
    pub n: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_g: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_c: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lambda_n: f64,
    /// Sample without guidance; the weights are still used to score.
    #[arg(long)]
    pub no_guidance: bool,
    /// Offset of the gripper center from the contact centroid along the
    /// contact normal (meters).
    #[arg(long, default_value_t = 0.03)]
    pub gripper_standoff: f64,
    /// Agent surface samples on the gripper box.
    #[arg(long, default_value_t = 16)]
    pub agent_points: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Direct)]
    pub mode: ModeArg,
    /// Guidance updates per denoising step.
    #[arg(long, default_value_t = 1)]
    pub g_steps: usize,
    #[arg(long, default_value_t = 16)]
    pub horizon: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Also export the batch as ASCII PLY, shaded by cost rank.
    #[arg(long)]
    pub ply: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long)]
    pub batch: PathBuf,
    /// Write the ordering as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Export the ranked batch as ASCII PLY.
    #[arg(long)]
    pub ply: Option<PathBuf>,
    /// Include this sample's contact and goal points in the PLY.
    #[arg(long)]
    pub sample: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Comma-separated subset of eq2, goal, collide, normal, trilinear, mlp.
    #[arg(long, value_delimiter = ',', default_value = "eq2,goal,collide,normal,trilinear,mlp")]
    pub targets: Vec<String>,
    /// Evaluation points per target.
    #[arg(long, default_value_t = 100)]
    pub points: usize,
    /// Corrupt one target's analytic gradient (negative control).
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
    /// Also write the report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n");
            eprintln!("{}", <Cli as clap::CommandFactory>::command().render_usage());
            ExitCode::from(2)
        }
        Err(commands::Failure::Domain(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(commands::Failure::Check(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
    }
}
