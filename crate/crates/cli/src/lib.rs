//! Command-line surface for mlpscale: single runs, downstream transfer, the
//! scaling sweep, and reporting.

pub mod config;
pub mod run;
pub mod sweep;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use log::{error, warn};
use mlpscale::model::{Activation, BlockKind, InputShape, ModelConfig};
use mlpscale::train::TrainMode;

use crate::config::{RunConfig, SweepSpec};

#[derive(Debug, Parser)]
#[command(name = "mlpscale", version, about = "Train, sweep and fit scaling laws for all-MLP image classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (default: a hashed directory under $MLPSCALE_OUTPUT).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from scratch.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Pre-train an upstream model (pretrain defaults).
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        resume: bool,
    },
    /// Fine-tune a pre-trained checkpoint with a fresh head.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        /// Pre-trained checkpoint (overrides "pretrained" in the config).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fit a linear probe on frozen features of a checkpoint.
    Probe {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run every (model, fraction, epoch budget) cell of a sweep.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pareto frontier, power-law fit, allocation fit and plot for a runs CSV.
    FitScaling {
        /// Runs CSV written by `sweep`.
        #[arg(long)]
        runs: PathBuf,
        /// upstream_err, probe_err or finetune_err.
        #[arg(long, default_value = "upstream_err")]
        error: String,
        /// Fit JSON (default: scaling_fit.json next to the runs CSV).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Plot (default: scaling.svg next to the runs CSV).
        #[arg(long)]
        svg: Option<PathBuf>,
        /// Epoch budget for the allocation fit; falls back to the largest
        /// budget present when no run has it.
        #[arg(long, default_value_t = 50)]
        allocation_epochs: u64,
    },
    /// Export the first grid x grid embedding filters of a checkpoint as PGM.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 5)]
        grid: usize,
        /// Output image (default: filters.pgm next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print parameter and forward FLOP counts for a model.
    Params {
        /// Notation such as B-12/Wi-768.
        notation: String,
        /// Square input side.
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 1000)]
        classes: usize,
        #[arg(long, value_parser = parse_block, default_value = "inverted_bottleneck")]
        block: BlockKind,
        #[arg(long, default_value_t = ModelConfig::DEFAULT_EXPANSION)]
        expansion: usize,
    },
}

fn parse_block(s: &str) -> Result<BlockKind, String> {
    match s {
        "standard" => Ok(BlockKind::Standard),
        "inverted_bottleneck" | "bottleneck" => Ok(BlockKind::InvertedBottleneck),
        other => Err(format!("unknown block {other:?}; expected standard or inverted_bottleneck")),
    }
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn single_run(run: &RunArgs, mode: TrainMode) -> Result<RunConfig> {
    let cfg = RunConfig::load_with_mode(&run.config, mode)?;
    if cfg.train.mode != mode {
        bail!(
            "{} sets mode {:?} but this command runs {:?}",
            run.config.display(),
            cfg.train.mode.name(),
            mode.name()
        );
    }
    Ok(cfg)
}

/// Executes a parsed command. `Ok(false)` means the command ran but some of its
/// work failed (a sweep with failed cells).
pub fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { run, resume } => {
            let cfg = RunConfig::load_with_mode(&run.config, TrainMode::Scratch)?;
            if matches!(cfg.train.mode, TrainMode::Finetune | TrainMode::Probe) {
                bail!("mode {:?} needs the {} command", cfg.train.mode.name(), cfg.train.mode.name());
            }
            let out = run.out.clone().unwrap_or_else(|| run::default_output(&cfg));
            print_json(&run::train(&cfg, &out, resume)?)?;
        }
        Command::Pretrain { run, resume } => {
            let cfg = single_run(&run, TrainMode::Pretrain)?;
            let out = run.out.clone().unwrap_or_else(|| run::default_output(&cfg));
            print_json(&run::train(&cfg, &out, resume)?)?;
        }
        Command::Finetune { run, checkpoint } => {
            let cfg = single_run(&run, TrainMode::Finetune)?;
            let out = run.out.clone().unwrap_or_else(|| run::default_output(&cfg));
            print_json(&run::finetune(&cfg, checkpoint.as_deref(), &out)?)?;
        }
        Command::Probe { run, checkpoint } => {
            let cfg = single_run(&run, TrainMode::Probe)?;
            let out = run.out.clone().unwrap_or_else(|| run::default_output(&cfg));
            print_json(&run::probe(&cfg, checkpoint.as_deref(), &out)?)?;
        }
        Command::Sweep { config, out } => {
            let spec = SweepSpec::load(&config)?;
            let out = sweep::sweep_output(&spec, out.as_deref());
            let outcome = sweep::run_sweep(&spec, &out)?;
            println!(
                "{} records written, {} cells already present, {} groups failed; runs in {}",
                outcome.records_written,
                outcome.cells_skipped,
                outcome.failures.len(),
                outcome.runs_csv.display()
            );
            return Ok(outcome.failures.is_empty());
        }
        Command::FitScaling {
            runs,
            error,
            out,
            svg,
            allocation_epochs,
        } => {
            let field = run::parse_error_field(&error)?;
            let json_out = out.unwrap_or_else(|| sibling(&runs, "scaling_fit.json"));
            let svg_out = svg.unwrap_or_else(|| sibling(&runs, "scaling.svg"));
            let report = run::fit_scaling(&runs, field, Some(allocation_epochs), &json_out, &svg_out)?;
            if !report.monotone_decreasing {
                warn!("fitted error curve is not strictly decreasing over the data");
            }
            print_json(&report)?;
        }
        Command::Visualize { checkpoint, grid, out } => {
            let out = out.unwrap_or_else(|| sibling(&checkpoint, "filters.pgm"));
            let (w, h) = run::visualize(&checkpoint, grid, &out)?;
            println!("wrote {}x{} filter grid to {}", w, h, out.display());
        }
        Command::Params {
            notation,
            resolution,
            channels,
            classes,
            block,
            expansion,
        } => {
            let (depth, width) = mlpscale::model::parse_notation(&notation)?;
            let model = ModelConfig {
                depth,
                width,
                expansion,
                input: InputShape::new(resolution, resolution, channels),
                num_classes: classes,
                block,
                activation: Activation::Relu,
                dropout: 0.0,
            };
            print_json(&run::params(&model)?)?;
        }
    }
    Ok(true)
}

/// Parses `argv` (program name first) and runs it, returning the process exit
/// code: 0 on success, 1 on failure or partial failure, 2 on usage errors.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            error!("{e:#}");
            eprintln!("error: {e:#}");
            1
        }
    }
}
