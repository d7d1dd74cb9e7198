//! `haulcast`: trajectories to stays, sequences, per-vehicle models,
//! forecasts and evaluation tables.

mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use haulcast_core::config::ToolkitConfig;

#[derive(Parser, Debug)]
#[command(
    name = "haulcast",
    version,
    about = "Next-activity prediction for GPS-tracked hauling trucks"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Flat TOML configuration; defaults apply to absent keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Upstream artifact of the stage.
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    /// Artifact (or directory) the stage writes.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Only process these vehicles.
    #[arg(long, global = true, value_delimiter = ',')]
    pub vehicles: Vec<String>,
    /// Worker threads across vehicles; 0 uses every core.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Overrides the configured run seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a fleet from the built-in generator and write its trajectories.
    Simulate {
        #[arg(long, default_value_t = 10)]
        n_vehicles: usize,
        #[arg(long, default_value_t = 60)]
        days: usize,
    },
    /// Detect stays in a trajectory CSV.
    ExtractStays,
    /// Group stays into operational days with contexts.
    BuildSequences {
        /// Weather CSV with `date,condition` rows.
        #[arg(long)]
        weather: PathBuf,
    },
    /// Choose the hidden-state count of each vehicle.
    SelectStates,
    /// Fit one model file per vehicle.
    Fit,
    /// Forecast every activity of each vehicle's test days.
    Predict {
        #[arg(long)]
        models: PathBuf,
    },
    /// Score the IOHMM and both baselines on the test days.
    Evaluate {
        #[arg(long)]
        models: PathBuf,
    },
    /// Regress per-vehicle predictability on vehicle factors.
    AnalyzeFactors {
        #[arg(long)]
        models: PathBuf,
    },
}

fn load_config(g: &GlobalArgs) -> Result<ToolkitConfig> {
    let mut cfg = match &g.config {
        Some(p) => ToolkitConfig::load(p).with_context(|| format!("config {}", p.display()))?,
        None => ToolkitConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate().context("config validation")?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.jobs)
        .build_global()
        .context("starting the worker pool")?;
    let cfg = load_config(&cli.global)?;
    let g = &cli.global;
    match cli.command {
        Command::Simulate { n_vehicles, days } => commands::simulate(g, &cfg, n_vehicles, days),
        Command::ExtractStays => commands::extract_stays(g, &cfg),
        Command::BuildSequences { weather } => commands::build_sequences(g, &cfg, &weather),
        Command::SelectStates => commands::select_states(g, &cfg),
        Command::Fit => commands::fit(g, &cfg),
        Command::Predict { models } => commands::predict(g, &models),
        Command::Evaluate { models } => commands::evaluate(g, &cfg, &models),
        Command::AnalyzeFactors { models } => commands::analyze_factors(g, &models),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            for cause in e.chain().skip(1) {
                eprintln!("  caused by: {cause}");
            }
            ExitCode::FAILURE
        }
    }
}
