//! Experiment orchestration behind the `ecgi` binary.

pub mod commands;
pub mod config;
pub mod render;
pub mod stats;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::{Axis, Session};
use config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "ecgi", version, about = "Heart-surface potential reconstruction experiments")]
pub struct Cli {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, overriding the config's `output_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Base seed, overriding the config's `base_seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate ground truth and write observations for every noise level.
    Simulate,
    /// Run every configured method on the simulated observations.
    Reconstruct,
    /// Repeat runs along one axis and write mean/std summaries.
    Sweep {
        #[arg(long, value_enum)]
        axis: Axis,
    },
    /// Draw one time sample of a field as an SVG heatmap.
    Render {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        time: usize,
        /// Defaults to `<out>/render_t<time>.svg`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Aggregate reconstruct metrics into `comparison.csv`.
    Compare,
}

/// Failure classes mapped onto exit codes 1 and 2.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

fn session(cli: &Cli) -> Result<Session, Failure> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path).map_err(Failure::Usage)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.base_seed = seed;
    }
    let out = cli.out.clone().unwrap_or_else(|| config.output_dir.clone());
    config.output_dir = out.clone();
    Ok(Session {
        config,
        out,
        quiet: cli.quiet,
    })
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    let ses = session(&cli)?;
    let rt = Failure::Runtime;
    match cli.command {
        Command::Simulate => commands::simulate(&ses).map(drop).map_err(rt),
        Command::Reconstruct => commands::reconstruct(&ses).map(drop).map_err(rt),
        Command::Sweep { axis } => commands::sweep(&ses, axis).map(drop).map_err(rt),
        Command::Compare => commands::compare(&ses).map(drop).map_err(rt),
        Command::Render {
            field,
            mesh,
            time,
            output,
        } => {
            let mesh = ecgi_core::mesh::load_off(&mesh).map_err(|e| rt(e.into()))?;
            let field = ecgi_core::SpatioTemporalField::load_csv(&field, 1.0).map_err(|e| rt(e.into()))?;
            let svg = render::render_svg(&mesh, &field, time).map_err(Failure::Usage)?;
            let path = output.unwrap_or_else(|| ses.out.join(format!("render_t{time}.svg")));
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| rt(e.into()))?;
            }
            std::fs::write(&path, svg).map_err(|e| rt(anyhow::anyhow!("cannot write {}: {e}", path.display())))
        }
    }
}
