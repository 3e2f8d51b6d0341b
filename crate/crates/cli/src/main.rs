//! `surfgan`: train the generator and the pose injection stage, render grids,
//! edit attributes, synthesize novel views and evaluate checkpoints.
//!
//! Exit codes: 0 success, 2 configuration, 3 data or I/O, 4 non-finite
//! values, 5 adapter backends.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use surfgan_core::Error;

#[derive(Parser)]
#[command(name = "surfgan", version, about = "3D-aware generator training, editing and evaluation")]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

/// Config layers shared by every command.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set schedule.progressive=false`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

/// Where to look: a view-list file or a pitch-by-yaw grid.
#[derive(Args, Clone, Debug)]
pub struct ViewArgs {
    /// CSV with `pitch_deg,yaw_deg[,fov_deg]` rows.
    #[arg(long, conflicts_with = "grid")]
    pub views: Option<PathBuf>,
    /// `ROWSxCOLS` grid over the pitch and yaw ranges.
    #[arg(long, value_name = "ROWSxCOLS")]
    pub grid: Option<String>,
    /// Grid pitch covers [-p, p] degrees.
    #[arg(long, default_value_t = 30.0)]
    pub pitch_range: f64,
    /// Grid yaw covers [-y, y] degrees.
    #[arg(long, default_value_t = 45.0)]
    pub yaw_range: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Train the generator against the discriminator.
    TrainSurf {
        /// Validate the config, render one untrained 32x32 sample and stop.
        #[arg(long)]
        dry_run: bool,
        /// Continue from `<output_dir>/checkpoint.ckpt`.
        #[arg(long)]
        resume: bool,
        /// Grow resolution in stages (the default).
        #[arg(long, overrides_with = "no_progressive")]
        progressive: bool,
        /// Train at the final resolution from the first step.
        #[arg(long)]
        no_progressive: bool,
        /// Output directory; overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the canonical mapper and pose basis on a frozen 2D generator.
    TrainInject {
        /// Generator checkpoint rendering the training triplets. Without it the
        /// mock backends supply analytic triplets.
        #[arg(long)]
        surf_checkpoint: Option<PathBuf>,
        /// Continue from `<output_dir>/injection.ckpt`.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render identities from a generator checkpoint over a set of views.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        views: ViewArgs,
        #[arg(long, default_value_t = 1)]
        identities: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep one control coefficient `LiDj` at a fixed view.
    Edit {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Layer i, basis j, both from 1, e.g. `L2D3`.
        #[arg(long)]
        control: String,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = [-3.0, -1.5, 0.0, 1.5, 3.0])]
        values: Vec<f64>,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        pitch: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        yaw: f64,
        #[arg(long, default_value_t = 1)]
        identities: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-render a real image at new poses through the injection model.
    NovelView {
        /// Injection checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        views: ViewArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the evaluation protocols on a generator checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Any of fid, pose, id, throughput.
        #[arg(long, value_delimiter = ',', default_values_t = ["fid".to_string(), "pose".into(), "id".into(), "throughput".into()])]
        metrics: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Invalid(_) => 2,
        Error::Data(_) | Error::Checkpoint { .. } | Error::Io { .. } => 3,
        Error::Numeric(_) => 4,
        Error::Adapter(_) => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = &cli.config;
    let result = match cli.command {
        Command::TrainSurf {
            dry_run,
            resume,
            progressive,
            no_progressive,
            out,
        } => {
            let progressive = (progressive || no_progressive).then_some(!no_progressive);
            commands::train_surf(cfg, dry_run, resume, progressive, out)
        }
        Command::TrainInject {
            surf_checkpoint,
            resume,
            out,
        } => commands::train_inject(cfg, surf_checkpoint, resume, out),
        Command::Generate {
            checkpoint,
            views,
            identities,
            seed,
            resolution,
            out,
        } => commands::generate(cfg, &checkpoint, &views, identities, seed, resolution, &out),
        Command::Edit {
            checkpoint,
            control,
            values,
            pitch,
            yaw,
            identities,
            seed,
            resolution,
            out,
        } => commands::edit(
            cfg,
            &commands::EditArgs {
                checkpoint,
                control,
                values,
                pitch_deg: pitch,
                yaw_deg: yaw,
                identities,
                seed,
                resolution,
                out,
            },
        ),
        Command::NovelView {
            checkpoint,
            image,
            views,
            out,
        } => commands::novel_view(cfg, &checkpoint, &image, &views, &out),
        Command::Evaluate { checkpoint, metrics, out } => commands::evaluate(cfg, &checkpoint, &metrics, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
