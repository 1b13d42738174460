mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "parkcast", version, about = "Intent and trajectory prediction for vehicles in parking lots")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Output location shared by every subcommand that writes files.
#[derive(Debug, Args)]
pub struct OutDir {
    /// Output directory.
    #[arg(long, env = "PARKCAST_OUTPUT_DIR", default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset directory written by `extract`.
    #[arg(long)]
    pub data: PathBuf,
    /// Validation dataset directory; early stopping watches its loss when given.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Model configuration JSON; defaults otherwise. The raster always follows the data.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    /// Overrides the configured learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Per-epoch learning-rate factor.
    #[arg(long, default_value_t = 1.0)]
    pub lr_decay: f64,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic parking lot scene and its map.
    Gen {
        /// Scene specification JSON; defaults otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        agents: Option<usize>,
        #[command(flatten)]
        out: OutDir,
    },
    /// Extract training examples and write train/val datasets.
    Extract {
        /// Scene JSON; repeat for several scenes.
        #[arg(long, required = true)]
        scene: Vec<PathBuf>,
        /// Map JSON, once for all scenes or once per scene.
        #[arg(long, required = true)]
        map: Vec<PathBuf>,
        /// Extraction configuration JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        out: OutDir,
    },
    /// Train the intent scorer.
    TrainIntent(TrainArgs),
    /// Train the trajectory predictor.
    TrainTraj {
        #[command(flatten)]
        train: TrainArgs,
        /// Replace image features with zeros.
        #[arg(long)]
        no_image: bool,
        /// Drop the intent-attention blocks.
        #[arg(long)]
        no_intent: bool,
        #[arg(long)]
        dropout: Option<f64>,
        /// Use Adam instead of the configured optimizer.
        #[arg(long)]
        adam: bool,
    },
    /// Predict the top-k modes of one agent at one frame.
    Predict {
        /// Trajectory predictor checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Intent scorer checkpoint; without it intents are ranked by an EKF rollout.
        #[arg(long)]
        intent_checkpoint: Option<PathBuf>,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        map: PathBuf,
        /// Agent id.
        #[arg(long)]
        agent: String,
        /// Frame index.
        #[arg(long)]
        frame: usize,
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Seconds between samples.
        #[arg(long, default_value_t = 0.4)]
        dt: f64,
        #[command(flatten)]
        out: OutDir,
    },
    /// Evaluate intent accuracy and trajectory errors on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated variants: `name=checkpoint`, `ekf` or `oracle`.
        #[arg(long, value_delimiter = ',', required = true)]
        variants: Vec<String>,
        #[arg(long)]
        intent_checkpoint: Option<PathBuf>,
        /// Seconds between samples, for the EKF variant.
        #[arg(long, default_value_t = 0.4)]
        dt: f64,
        #[command(flatten)]
        out: OutDir,
    },
    /// Render the bird's-eye view of one agent at one frame.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        agent: String,
        #[arg(long)]
        frame: usize,
        #[arg(long, default_value_t = 10)]
        ntail: usize,
        /// Half-width of the window, meters.
        #[arg(long, default_value_t = 10.0)]
        range: f64,
        /// Meters per pixel.
        #[arg(long, default_value_t = 0.1)]
        resolution: f64,
        #[arg(long, default_value_t = 0.4)]
        dt: f64,
        #[command(flatten)]
        out: OutDir,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen { spec, seed, agents, out } => commands::gen(spec.as_deref(), seed, agents, &out.out),
        Command::Extract { scene, map, config, out } => commands::extract(&scene, &map, config.as_deref(), &out.out),
        Command::TrainIntent(args) => commands::train_intent(&args),
        Command::TrainTraj { train, no_image, no_intent, dropout, adam } => commands::train_traj(&train, no_image, no_intent, dropout, adam),
        Command::Predict { checkpoint, intent_checkpoint, scene, map, agent, frame, k, dt, out } => {
            commands::predict(&checkpoint, intent_checkpoint.as_deref(), &scene, &map, &agent, frame, k, dt, &out.out)
        }
        Command::Eval { data, variants, intent_checkpoint, dt, out } => commands::eval(&data, &variants, intent_checkpoint.as_deref(), dt, &out.out),
        Command::Render { scene, map, agent, frame, ntail, range, resolution, dt, out } => {
            commands::render(&scene, &map, &agent, frame, ntail, range, resolution, dt, &out.out)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
