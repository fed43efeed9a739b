use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod plot;

/// Road-surface elevation from monocular or stereo images.
#[derive(Parser, Debug)]
#[command(name = "roadbev", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// JSON file merged over the base configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Start from the desk-scale profile instead of the full-size defaults.
    #[arg(long, global = true)]
    pub toy: bool,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; defaults to the configured one.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub kind: Option<KindArg>,
    #[arg(long, global = true, value_enum)]
    pub loss_reduction: Option<ReductionArg>,
    #[arg(long, global = true, value_enum)]
    pub volume: Option<VolumeArg>,
    /// Voxel feature sampling.
    #[arg(long, global = true, value_enum)]
    pub mode: Option<ModeArg>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum KindArg {
    Mono,
    Stereo,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum ReductionArg {
    Sum,
    Mean,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum VolumeArg {
    Multiply,
    Subtract,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum ModeArg {
    Nearest,
    Bilinear,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum SweepArg {
    ClassInterval,
    VoxelResolution,
    FeatureVolume,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render synthetic frame directories under <out>/train and <out>/heldout.
    GenScene {
        /// Training scenes; defaults to the configured count.
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_heldout: Option<usize>,
        /// Cloud points per square metre.
        #[arg(long, default_value_t = 4000.0)]
        density: f64,
        /// Cloud height noise, metres.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
    },
    /// Rasterize a point cloud into an elevation map.
    GenLabels {
        /// Road-frame cloud, text triples or ASCII PCD.
        #[arg(long)]
        cloud: PathBuf,
        /// Output elevation file; defaults to <out>/gt.rbev.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train a model and write its checkpoint and logs.
    Train {
        /// Frame-directory root; synthetic scenes are used when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on held-out frames.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train and evaluate a sweep of configuration variants.
    Ablate {
        #[arg(long, value_enum)]
        sweep: Option<SweepArg>,
        /// JSON list of {"id": .., "overlay": {..}} variants.
        #[arg(long, conflicts_with = "sweep")]
        variants: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Draw distance profiles and elevation maps from eval directories.
    Plot {
        /// LABEL=DIR pairs, each an eval output directory.
        #[arg(long = "eval", required = true, value_parser = parse_labeled)]
        evals: Vec<(String, PathBuf)>,
        /// Frame whose maps are drawn from the first eval directory.
        #[arg(long, default_value_t = 0)]
        frame: usize,
    },
}

fn parse_labeled(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((label, dir)) if !label.is_empty() && !dir.is_empty() => Ok((label.to_string(), PathBuf::from(dir))),
        _ => Err(format!("expected LABEL=DIR, got `{s}`")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ROADBEV_LOG", "info").write_style("ROADBEV_LOG_STYLE"))
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
