use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pointfuse::commands;
use pointfuse::config::RunConfig;
use pointfuse::{Error, Result};

#[derive(Parser)]
#[command(name = "pointfuse", version, about = "Dual-branch LiDAR 3D detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration. Defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Encode BEV maps and voxel sets into the cache.
    Preprocess {
        #[command(flatten)]
        common: Common,
        /// Comma-separated ids or a file with one id per line.
        #[arg(long, value_name = "LIST|FILE")]
        frames: String,
        /// Cache root; `data.cache_dir` when omitted.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Write one frame's BEV map as an RGB PNG.
    RenderBev {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "ID")]
        frames: String,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Build the ground-truth sampling database from the training split.
    BuildGtdb {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train and write loss.log and checkpoints. Without --config the toy
    /// synthetic preset is used.
    TrainToy {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Overrides the configured step count.
        #[arg(long, value_name = "N")]
        steps: Option<usize>,
    },
    /// Evaluate a checkpoint and write metrics.txt and metrics.kv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Finite-difference gradient checks for every network block.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Write KITTI-format detections for the given frames.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "LIST|FILE")]
        frames: String,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

fn load(common: &Common, fallback: fn() -> RunConfig) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => fallback(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess { common, frames, out } => {
            let cfg = load(&common, RunConfig::default)?;
            let ids = commands::parse_frame_list(&frames)?;
            let files = commands::preprocess(&cfg, &ids, out.as_deref())?;
            println!("wrote {} cache files", files.len());
        }
        Command::RenderBev { common, frames, out } => {
            let cfg = load(&common, RunConfig::default)?;
            let ids = commands::parse_frame_list(&frames)?;
            let [id] = ids.as_slice() else {
                return Err(Error::Invalid(format!("render-bev takes one frame, got {}", ids.len())));
            };
            commands::render_bev(&cfg, id, &out)?;
            println!("wrote {}", out.display());
        }
        Command::BuildGtdb { common, out } => {
            let cfg = load(&common, RunConfig::default)?;
            let db = commands::build_gtdb(&cfg, out.as_deref())?;
            println!("stored {} objects", db.len());
        }
        Command::TrainToy { common, out, steps } => {
            let mut cfg = load(&common, RunConfig::toy)?;
            if steps.is_some() {
                cfg.train.max_steps = steps;
            }
            let s = commands::train(&cfg, &out)?;
            match s.losses.last() {
                Some(l) => println!("{} steps, final total loss {:.6}", s.losses.len(), l.total),
                None => println!("0 steps, initial checkpoint only"),
            }
        }
        Command::Eval {
            common,
            checkpoint,
            split,
            out,
        } => {
            let cfg = load(&common, RunConfig::default)?;
            let split = match split {
                Split::Train => cfg.data.train_split.clone(),
                Split::Val => cfg.data.val_split.clone(),
            };
            let report = commands::eval(&cfg, &checkpoint, &split, &out)?;
            print!("{report}");
        }
        Command::Gradcheck { common, out } => {
            let cfg = load(&common, RunConfig::default)?;
            let results = commands::gradcheck(&cfg, out.as_deref())?;
            print!("{}", commands::format_gradcheck(&results));
            let failed: Vec<_> = results.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
            if !failed.is_empty() {
                return Err(Error::Invalid(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
        Command::Infer {
            common,
            checkpoint,
            frames,
            out,
        } => {
            let cfg = load(&common, RunConfig::default)?;
            let ids = commands::parse_frame_list(&frames)?;
            let files = commands::infer(&cfg, &checkpoint, &ids, &out)?;
            println!("wrote {} result files", files.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::FAILURE
        }
    }
}
