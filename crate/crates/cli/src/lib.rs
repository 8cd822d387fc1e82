//! Command-line pipeline around `wavescale-core`: run configuration, file
//! formats, the point-statistics metric suite and CSV/SVG reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod metrics;
pub mod report;
pub mod svg;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "wavescale", version, about = "Multi-resolution debiasing and downscaling of spherical fields")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic truth and a biased ensemble.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analyse a field stack into a pyramid, or synthesise one back.
    Transform {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        inverse: bool,
    },
    /// Print the cone of influence of one center.
    Coi {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        level: usize,
        #[arg(long)]
        index: usize,
    },
    /// Train the per-center debiasing models.
    TrainDebias {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding the pyramids named in the splits.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        /// Training log; defaults to `<out>/training_log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the per-center downscaling models level by level.
    TrainDownscale {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run a checkpoint over a pyramid.
    Apply {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the metric report of a truth and an optional candidate.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        candidate: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a metric report as CSV tables and SVG figures.
    Report {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Executes one command and returns its JSON summary.
pub fn run(command: &Command) -> Result<serde_json::Value> {
    use commands::*;
    match command {
        Command::Synth { config, out } => synth(&RunConfig::load(config)?, out),
        Command::Transform {
            config,
            input,
            out,
            inverse,
        } => transform(&RunConfig::load(config)?, input, out, *inverse),
        Command::Coi { config, level, index } => coi(&RunConfig::load(config)?, *level, *index),
        Command::TrainDebias { config, data, out, log } => {
            train_debias_cmd(&RunConfig::load(config)?, data, out, log.as_deref())
        }
        Command::TrainDownscale { config, data, out, log } => {
            train_downscale_cmd(&RunConfig::load(config)?, data, out, log.as_deref())
        }
        Command::Apply {
            config,
            checkpoint,
            input,
            out,
        } => apply(&RunConfig::load(config)?, checkpoint, input, out),
        Command::Validate {
            config,
            truth,
            candidate,
            out,
        } => validate(&RunConfig::load(config)?, truth, candidate.as_deref(), out),
        Command::Report { report: r, out } => report(r, out),
    }
}
