use std::path::PathBuf;
use std::process::ExitCode;

use changefield::pipeline::{self, Backend, PipelineConfig, ViewSelection};
use changefield::{Error, ErrorKind};
use clap::{Args, Parser, Subcommand};

/// Detect scene changes between two captures via radiance fields.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the top-level seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the field backend (oracle or voxel).
    #[arg(long)]
    backend: Option<Backend>,
}

#[derive(Subcommand)]
enum Command {
    /// Render both captures, test views and ground-truth masks.
    Generate(Common),
    /// Fit the pre and post fields.
    Train(Common),
    /// Write change masks for test views and configured novel poses.
    Detect {
        #[command(flatten)]
        common: Common,
        /// Comma-separated test view indices, or "all".
        #[arg(long, default_value = "all")]
        views: ViewSelection,
    },
    /// Score predicted masks against ground truth.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Predicted mask directory (defaults to the detect output).
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Ground-truth mask directory (defaults to the dataset's test masks).
        #[arg(long)]
        gt: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<PipelineConfig, Error> {
    let mut config = PipelineConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.output = out.clone();
    }
    if let Some(backend) = common.backend {
        config.backend = backend;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate(common) => {
            let summary = pipeline::cmd_generate(&load(&common)?)?;
            println!(
                "generated {} capture views per side and {} test views",
                summary.capture_views, summary.test_views
            );
        }
        Command::Train(common) => {
            let summary = pipeline::cmd_train(&load(&common)?)?;
            for (side, log) in [("pre", summary.pre), ("post", summary.post)] {
                if let Some(log) = log {
                    println!("{side}: final loss {:.6}, held-out PSNR {:.2} dB", log.losses.last().unwrap_or(&f64::NAN), log.heldout_psnr);
                }
            }
        }
        Command::Detect { common, views } => {
            let summary = pipeline::cmd_detect(&load(&common)?, &views)?;
            for m in summary.maps.iter().chain(&summary.novel) {
                println!("{}: {} changed pixels", m.file, m.changed_pixels);
            }
        }
        Command::Evaluate { common, pred, gt } => {
            let config = load(&common)?;
            let pred = pred.unwrap_or_else(|| config.detect_dir().join("masks"));
            let gt = gt.unwrap_or_else(|| config.dataset_dir().join("test").join("masks"));
            let report = pipeline::cmd_evaluate(&pred, &gt, &config.eval_dir())?;
            let m = report.mean;
            println!(
                "precision {:.4} recall {:.4} F1 {:.4} IoU {:.4} mAP {:.4} over {} views",
                m.precision,
                m.recall,
                m.f1,
                m.iou,
                m.map,
                report.views.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numerical => 4,
            })
        }
    }
}
