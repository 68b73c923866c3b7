//! Batch command-line interface: every subcommand reads a JSON run config,
//! writes artifacts into `--out` and records a manifest for reruns.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments or configuration; nothing was computed.
    #[error("invalid input: {0}")]
    Validation(String),
    #[error(transparent)]
    Runtime(#[from] gridgsp::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Validation(_) => 2,
            Self::Runtime(_) | Self::Io { .. } => 1,
        }
    }
}

/// Subcommand identity, independent of argument parsing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    GenData,
    BuildGso,
    PlacePmus,
    Estimate,
    ForecastTrain,
    ForecastEval,
    DrlTrain,
    DrlEval,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Self::GenData => "gen-data",
            Self::BuildGso => "build-gso",
            Self::PlacePmus => "place-pmus",
            Self::Estimate => "estimate",
            Self::ForecastTrain => "forecast-train",
            Self::ForecastEval => "forecast-eval",
            Self::DrlTrain => "drl-train",
            Self::DrlEval => "drl-eval",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }

    pub const ALL: [Task; 8] = [
        Self::GenData,
        Self::BuildGso,
        Self::PlacePmus,
        Self::Estimate,
        Self::ForecastTrain,
        Self::ForecastEval,
        Self::DrlTrain,
        Self::DrlEval,
    ];

    /// Subcommands that draw random numbers and so need a seed.
    pub fn is_stochastic(self) -> bool {
        !matches!(self, Self::BuildGso | Self::PlacePmus)
    }
}

#[derive(Debug, Parser)]
#[command(name = "gridgsp", version, about = "Graph signal processing and graph learning for power grids")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON run config, or a manifest from an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for artifacts and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Case file, or `bundled:<name>`; overrides the config.
    #[arg(long)]
    pub case: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint written by the matching train subcommand.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic load series and the exact power-flow states.
    GenData(CommonArgs),
    /// Shift operator, susceptance operator, offsets and nominal spectrum.
    BuildGso(CommonArgs),
    /// Greedy sensor placement.
    PlacePmus(CommonArgs),
    /// Regularized state recovery from noisy measurements.
    Estimate(CommonArgs),
    /// Trains a GCN or GRN forecaster.
    ForecastTrain(CommonArgs),
    /// Scores a forecaster checkpoint on the test split.
    ForecastEval(EvalArgs),
    /// Trains a volt-var policy with PPO.
    DrlTrain(CommonArgs),
    /// Evaluates a policy checkpoint against the zero action.
    DrlEval(EvalArgs),
}

impl Command {
    fn parts(&self) -> (Task, &CommonArgs, Option<&PathBuf>) {
        match self {
            Self::GenData(c) => (Task::GenData, c, None),
            Self::BuildGso(c) => (Task::BuildGso, c, None),
            Self::PlacePmus(c) => (Task::PlacePmus, c, None),
            Self::Estimate(c) => (Task::Estimate, c, None),
            Self::ForecastTrain(c) => (Task::ForecastTrain, c, None),
            Self::ForecastEval(e) => (Task::ForecastEval, &e.common, e.checkpoint.as_ref()),
            Self::DrlTrain(c) => (Task::DrlTrain, c, None),
            Self::DrlEval(e) => (Task::DrlEval, &e.common, e.checkpoint.as_ref()),
        }
    }
}

fn absolute(path: &Path) -> Result<PathBuf, CliError> {
    std::path::absolute(path).map_err(|e| CliError::io(path, e))
}

/// Effective config: file contents with command-line overrides applied and
/// file paths made absolute so the manifest reruns from any directory.
pub fn resolve_config(command: &Command) -> Result<(Task, RunConfig, PathBuf), CliError> {
    let (task, common, checkpoint) = command.parts();
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = Some(seed);
    }
    if let Some(case) = &common.case {
        cfg.case = case.clone();
    }
    if !cfg.case.starts_with(config::BUNDLED_PREFIX) {
        cfg.case = absolute(Path::new(&cfg.case))?.display().to_string();
    }
    if let Some(path) = checkpoint {
        let path = absolute(path)?;
        match task {
            Task::ForecastEval => cfg.forecast.checkpoint = Some(path),
            _ => cfg.drl.checkpoint = Some(path),
        }
    }
    Ok((task, cfg, common.out.clone()))
}

/// Parses arguments, runs the subcommand and maps errors to exit codes.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = resolve_config(&cli.command).and_then(|(task, cfg, out)| commands::run(task, &cfg, &out));
    match result {
        Ok(manifest) => {
            for name in manifest.artifacts.keys() {
                println!("{}", common_out(&cli.command).join(name).display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn common_out(command: &Command) -> &Path {
    &command.parts().1.out
}
