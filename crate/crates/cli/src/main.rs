use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use tad_core::fusion::Task;
use tad_core::io::Split;
use tad_core::pipeline;
use tad_core::PipelineConfig;

/// Temporal action detection on clip-level feature sequences.
#[derive(Parser)]
#[command(name = "tad", version)]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file layered over the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a single key, e.g. `--set train.epochs=3`. Repeatable; applied
    /// after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (features, annotations and a manifest).
    GenData {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the train split of a dataset.
    Train {
        /// Dataset manifest written by `gen-data`.
        #[arg(long)]
        manifest: PathBuf,
        /// Where to write the checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Optional JSON-lines log of (epoch, step, lr, loss).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run a checkpoint over a split and write detection documents.
    Detect {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest written by `gen-data`.
        #[arg(long)]
        manifest: PathBuf,
        /// Dataset split to use.
        #[arg(long, default_value = "val")]
        split: Split,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score detection documents against a split's annotations.
    Eval {
        /// Dataset manifest written by `gen-data`.
        #[arg(long)]
        manifest: PathBuf,
        /// Dataset split to use.
        #[arg(long, default_value = "val")]
        split: Split,
        /// Directory of detection documents written by `detect`.
        #[arg(long)]
        detections: PathBuf,
        /// Optional JSON report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print the effective configuration as TOML.
    Config,
}

fn run(cli: Cli) -> Result<()> {
    let cfg =
        PipelineConfig::load(cli.config.config.as_deref(), &cli.config.overrides).context("loading configuration")?;
    match cli.command {
        Command::GenData { out } => {
            let manifest = pipeline::gen_data(&cfg, &out)?;
            println!("generated {} videos in {}", manifest.videos.len(), out.display());
        }
        Command::Train {
            manifest,
            checkpoint,
            log,
        } => {
            let outcome = pipeline::train_stage(&cfg, &manifest, &checkpoint, log.as_deref())?;
            for (epoch, loss) in outcome.epoch_losses.iter().enumerate() {
                println!("epoch {:>3}/{}  loss {loss:.6}", epoch + 1, outcome.epoch_losses.len());
            }
            println!("wrote {}", checkpoint.display());
        }
        Command::Detect {
            checkpoint,
            manifest,
            split,
            out,
        } => {
            let videos = pipeline::detect_stage(&cfg, &checkpoint, &manifest, split, &out)?;
            println!(
                "wrote {} detection documents to {}",
                videos.len() * Task::ALL.len(),
                out.display()
            );
        }
        Command::Eval {
            manifest,
            split,
            detections,
            report,
        } => {
            let result = pipeline::eval_stage(&cfg, &manifest, split, &detections, report.as_deref())?;
            print!("{}", result.render_table());
        }
        Command::Config => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
