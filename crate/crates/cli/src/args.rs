use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "gblend",
    version,
    about = "Train, render and evaluate Gaussian blendshape head avatars",
    args_override_self = true
)]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "GBLEND_THREADS")]
    pub threads: Option<usize>,

    /// JSON file whose keys supply flags for the subcommand; flags given on
    /// the command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render one frame of a sequence.
    Render(RenderArgs),
    /// Render every frame of a sequence and report throughput.
    Animate(AnimateArgs),
    /// Fit a model to a sequence directory.
    Train(TrainArgs),
    /// Score a model on the held-out tail of a sequence.
    Evaluate(EvaluateArgs),
    /// Video stability or image quality reports.
    #[command(subcommand)]
    Metrics(MetricsCommand),
    /// Write a synthetic sequence with its ground-truth model.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct ViewArgs {
    /// Output width in pixels (default: the camera's).
    #[arg(long)]
    pub width: Option<u32>,
    /// Output height in pixels (default: the camera's).
    #[arg(long)]
    pub height: Option<u32>,
    /// Background color as `r,g,b` in [0, 1].
    #[arg(long, value_parser = parse_rgb, default_value = "0,0,0")]
    pub background: [f64; 3],
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Sequence directory or its `frames.json`.
    #[arg(long)]
    pub frames: PathBuf,
    /// Position of the frame in the sequence, starting at 0.
    #[arg(long, default_value_t = 0)]
    pub frame_index: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the coverage image here.
    #[arg(long)]
    pub alpha_out: Option<PathBuf>,
    #[command(flatten)]
    pub view: ViewArgs,
}

#[derive(Debug, Args)]
pub struct AnimateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Sequence directory or its `frames.json`.
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Write the throughput report as JSON here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub view: ViewArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Sequence directory (frames.json, images/, masks/).
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Output directory for the model, checkpoints and logs.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Start from this model instead of `init.gbav` / `init.json` in the
    /// data directory.
    #[arg(long)]
    pub init_model: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long, conflicts_with = "init_model")]
    pub resume: Option<PathBuf>,
    /// Write a checkpoint every N iterations (0 disables).
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Trailing frames withheld from training.
    #[arg(long)]
    pub holdout: Option<usize>,
    #[arg(long)]
    pub lr_center: Option<f64>,
    #[arg(long)]
    pub lr_scale: Option<f64>,
    #[arg(long)]
    pub lr_rotation: Option<f64>,
    #[arg(long)]
    pub lr_opacity: Option<f64>,
    #[arg(long)]
    pub lr_sh: Option<f64>,
    #[arg(long)]
    pub position_lr_scale: Option<f64>,
    /// Per-iteration multiplicative decay of every rate.
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub weight_rgb: Option<f64>,
    #[arg(long)]
    pub weight_alpha: Option<f64>,
    #[arg(long)]
    pub weight_reg: Option<f64>,
    /// Share of L1 in the photometric term; the rest is D-SSIM.
    #[arg(long)]
    pub l1_fraction: Option<f64>,
    /// Neutral Gaussians when initializing from an init spec.
    #[arg(long)]
    pub neutral_count: Option<usize>,
    /// Mouth Gaussians when initializing from an init spec.
    #[arg(long)]
    pub mouth_count: Option<usize>,
    #[arg(long)]
    pub sh_degree: Option<usize>,
    #[arg(long, value_parser = parse_rgb)]
    pub background: Option<[f64; 3]>,
    /// Print progress every N iterations to stderr (0 disables).
    #[arg(long, default_value_t = 100)]
    pub progress_every: u64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Sequence directory.
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Trailing frames to score (default: the training hold-out).
    #[arg(long)]
    pub holdout: Option<usize>,
    /// Write the report as JSON here.
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[arg(long, value_parser = parse_rgb, default_value = "0,0,0")]
    pub background: [f64; 3],
}

#[derive(Debug, Subcommand)]
pub enum MetricsCommand {
    /// ITF and ISI of a directory of frames.
    Stability(StabilityArgs),
    /// PSNR and SSIM of rendered frames against targets, paired by file order.
    Quality(QualityArgs),
}

#[derive(Debug, Args)]
pub struct StabilityArgs {
    #[arg(long)]
    pub video_dir: PathBuf,
    /// Write the report as JSON here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QualityArgs {
    #[arg(long)]
    pub render_dir: PathBuf,
    #[arg(long)]
    pub target_dir: PathBuf,
    /// Write the report as JSON here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub gaussians: usize,
    #[arg(long, default_value_t = 50)]
    pub mouth_gaussians: usize,
    #[arg(long, default_value_t = 4)]
    pub blendshapes: usize,
    #[arg(long, default_value_t = 20)]
    pub frames: usize,
    #[arg(long, default_value_t = 128)]
    pub width: u32,
    #[arg(long, default_value_t = 128)]
    pub height: u32,
    #[arg(long, default_value_t = 1)]
    pub sh_degree: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub color_noise: Option<f64>,
    #[arg(long)]
    pub scale_noise: Option<f64>,
    #[arg(long)]
    pub opacity_noise: Option<f64>,
}

fn parse_rgb(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected r,g,b, got `{s}`"));
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        let v: f64 = p.parse().map_err(|_| format!("`{p}` is not a number"))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(format!("color component {v} is outside [0, 1]"));
        }
        *o = v;
    }
    Ok(out)
}
