use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "eqbev", version, about = "Rotation-equivariant BEV detection on synthetic lidar scenes")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Sectioned `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for scene generation and model initialisation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for per-scene work.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Directory of scene bundles to read.
    #[arg(long, global = true)]
    pub scenes: Option<PathBuf>,
    /// Checkpoint to read.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Any config key, as `section.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Generate scene bundles.
    Gen {
        /// Number of scenes.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train on the scenes and write a checkpoint plus loss log.
    Train {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run a checkpoint on every scene and write detections.
    Detect,
    /// Score detections against scene ground truth.
    Eval {
        /// Directory of `<stem>.det.json` files.
        #[arg(long)]
        dets: PathBuf,
    },
    /// Equivariance residuals and the rotation sweep.
    Audit {
        /// Audit freshly initialised weights instead of a checkpoint.
        #[arg(long)]
        random: bool,
        /// With `--random`, use plain convolutions.
        #[arg(long)]
        plain: bool,
        /// Largest equivariance residual that still passes.
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// SVG of a scene with boxes, plus heatmap PGMs when a checkpoint is given.
    Plot {
        /// Scene stem inside the scene directory.
        #[arg(long)]
        scene: String,
        /// Directory of `<stem>.det.json` files to overlay.
        #[arg(long)]
        dets: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
