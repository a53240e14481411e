//! Command-line harness around `irc-core`: train an ensemble, simulate agents with it, infer
//! their parameters back from observed trajectories, and report how well that worked.

pub mod commands;
pub mod config;
pub mod error;
pub mod records;
pub mod svg;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::commands::{InferArgs, ReportArgs, SimulateArgs, TrainArgs};
use crate::config::RunConfig;
pub use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "irc", version, about = "Inverse rational control on firefly navigation tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML run configuration; every section is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a parameter-conditioned ensemble.
    Train {
        #[command(flatten)]
        common: Common,
        /// Output model directory.
        #[arg(long, default_value = "model")]
        out: PathBuf,
    },
    /// Simulate agents with the trained ensemble.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "model")]
        model: PathBuf,
        /// Number of agents, with parameters drawn uniformly.
        #[arg(long)]
        agents: Option<usize>,
        /// Trajectories per agent.
        #[arg(long)]
        trajectories: Option<usize>,
        /// Output run directory.
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Fit each agent's parameters to observed trajectories.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "model")]
        model: PathBuf,
        /// Observed trajectories (text or binary), or a run directory holding them.
        #[arg(long, default_value = "run")]
        data: PathBuf,
        /// Random restarts of the ascent.
        #[arg(long)]
        restarts: Option<usize>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Recovery, belief agreement and Q-slice tables and plots for a run.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run directory with `inference.json` and, when available, the simulation ground truth.
        #[arg(long, default_value = "run")]
        data: PathBuf,
        /// Model directory; adds the Q-slice for 1D models.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Defaults to `<data>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Train { common, .. } | Command::Simulate { common, .. } | Command::Infer { common, .. } | Command::Report { common, .. } => common,
        }
    }
}

fn resolve_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Observed data path: a file as given, or the trajectory file inside a run directory.
fn data_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        let bin = path.join(commands::OBSERVED_BINARY_FILE);
        if bin.exists() {
            return bin;
        }
        return path.join(commands::OBSERVED_FILE);
    }
    path.to_path_buf()
}

/// Run one parsed command; returns the lines written to stdout.
pub fn run(cli: Cli) -> CliResult<Vec<String>> {
    let cfg = resolve_config(cli.command.common())?;
    if cli.command.common().print_config {
        let text = cfg.to_toml();
        print!("{text}");
        return Ok(text.lines().map(str::to_string).collect());
    }
    match cli.command {
        Command::Train { out, .. } => commands::train(&TrainArgs { config: cfg, out }),
        Command::Simulate { model, agents, trajectories, out, .. } => commands::simulate(&SimulateArgs { model, config: cfg, agents, trajectories, out }),
        Command::Infer { model, data, restarts, out, .. } => commands::infer(&InferArgs { model, data: data_file(&data), config: cfg, restarts, out }),
        Command::Report { data, model, out, .. } => {
            let out = out.unwrap_or_else(|| data.join("report"));
            commands::report(&ReportArgs { run: data, model, out })
        }
    }
}

/// Parse `args` (including the program name) and run; maps every failure to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("irc: {e}");
            e.exit_code()
        }
    }
}
