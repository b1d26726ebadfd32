//! Command surface of the lab: `theorem1`, `train`, `probe` and `plot`.

pub mod commands;
pub mod config;
pub mod plot;

use std::path::PathBuf;

use clap::{Parser, ValueEnum};

pub use commands::{Failure, Outcome};
use config::Overrides;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Verb {
    Theorem1,
    Train,
    Probe,
    Plot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Parser)]
#[command(name = "tc2", version, about = "Task conflict calibration lab")]
pub struct Cli {
    pub verb: Verb,
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `tc2.enabled`.
    #[arg(long, value_enum)]
    pub tc2: Option<Switch>,
    /// Overrides `train.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Checkpoint read by `probe` (default `<out>/checkpoint.json`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Metrics log read by `plot` (default `<out>/metrics.csv`).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

impl Cli {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            tc2: self.tc2.map(|s| s == Switch::On),
            epochs: self.epochs,
        }
    }
}

/// Runs one verb and returns the line to print on success.
pub fn run(cli: &Cli) -> Outcome<String> {
    let config = cli.config.as_deref();
    let out = cli.out.as_path();
    match cli.verb {
        Verb::Theorem1 => {
            let r = commands::theorem1(config, cli.overrides(), out)?;
            Ok(format!(
                "theorem1: weight_norm_j {:.4} at c = 0.5, {:.4} at strongest correlation, monotone {}",
                r.checks.null_weight_norm_j, r.checks.max_conflict_weight_norm_j, r.checks.monotone
            ))
        }
        Verb::Train => {
            let s = commands::train_cmd(config, cli.overrides(), out)?;
            Ok(format!("train: {} epochs, {} metric rows", s.epochs, s.records))
        }
        Verb::Probe => {
            let p = commands::probe_cmd(config, cli.checkpoint.as_deref(), cli.overrides(), out)?;
            Ok(format!("probe: top1 {:.4}, knn5 {:.4}", p.top1, p.knn5))
        }
        Verb::Plot => {
            commands::plot_cmd(cli.metrics.as_deref(), out)?;
            Ok("plot: conflict_epoch.svg, loss.svg".into())
        }
    }
}
