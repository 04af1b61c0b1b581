//! Command-line front end: argument parsing, config handling, and the
//! batch subcommands. `main` is a thin wrapper around [`run`].
//!
//! Exit codes: 0 success, 1 usage error, 2 data or configuration error,
//! 3 numerical failure (diverged training, singular solves, failed
//! self-checks). Every failure prints its error name on stderr.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use fundrank_core::anfis::AnfisError;
use fundrank_core::backtest::BacktestError;
use fundrank_core::fnn::FnnError;
use fundrank_core::panel::PanelError;
use fundrank_core::preprocess::PreprocessError;
use fundrank_core::synth::SynthError;

pub mod check;
pub mod commands;
pub mod config;

use config::{AlgoChoice, RunConfig};

/// Anything a subcommand can fail with, mapped onto the exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("ConfigError: {0}")]
    Config(String),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Backtest(#[from] BacktestError),
    #[error(transparent)]
    Fnn(#[from] FnnError),
    #[error(transparent)]
    Anfis(#[from] AnfisError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("Io: {0}")]
    Io(#[from] std::io::Error),
    #[error("CheckFailed: {0}")]
    CheckFailed(String),
}

impl CliError {
    /// 2 for data/config problems, 3 for numerical ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_)
            | CliError::Panel(_)
            | CliError::Preprocess(_)
            | CliError::Synth(_)
            | CliError::Io(_) => 2,
            CliError::Fnn(_) | CliError::Anfis(_) | CliError::CheckFailed(_) => 3,
            CliError::Backtest(e) => match e {
                BacktestError::NonFiniteScore { .. }
                | BacktestError::Fnn(_)
                | BacktestError::Anfis(_) => 3,
                _ => 2,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "fundrank",
    version,
    about = "Rank stocks by predicted next-quarter relative returns and evaluate long-short portfolios"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand; each overrides its config-file key.
#[derive(Debug, Args, Default)]
struct CommonArgs {
    /// Config file: TOML, or JSON with a .json extension
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Base seed for all randomness
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads (default: all cores)
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
    /// Algorithm selection
    #[arg(long, value_enum)]
    algo: Option<AlgoChoice>,
    /// Portfolio size per side
    #[arg(long, value_name = "N")]
    k: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load and validate the data tree, printing coverage statistics
    Ingest(CommonArgs),
    /// Build the supervised dataset and write dataset.csv / stats.csv
    Preprocess(CommonArgs),
    /// Train per-ticker models and save them under the output directory
    Train(CommonArgs),
    /// Run the full experiment and write the report files
    Backtest(CommonArgs),
    /// Re-render summary files from stored per-quarter returns
    Report(CommonArgs),
    /// Generate a synthetic data tree with a planted signal
    Synth(CommonArgs),
    /// Run the embedded verification suite
    Selfcheck {
        #[command(flatten)]
        common: CommonArgs,
        /// Sabotage the named check to prove failures are detected
        #[arg(long, hide = true, value_name = "CHECK")]
        fault: Option<String>,
    },
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::Ingest(c)
            | Command::Preprocess(c)
            | Command::Train(c)
            | Command::Backtest(c)
            | Command::Report(c)
            | Command::Synth(c) => c,
            Command::Selfcheck { common, .. } => common,
        }
    }
}

/// Config file (or defaults) with the flag overrides applied; flags win.
fn effective_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.base_seed = seed;
    }
    if let Some(threads) = common.threads {
        cfg.threads = Some(threads);
    }
    if let Some(algo) = common.algo {
        cfg.algo = algo;
    }
    if let Some(k) = common.k {
        cfg.k = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(command: Command) -> Result<(), CliError> {
    let cfg = effective_config(command.common())?;
    log::debug!("effective config: {cfg:?}");
    if let Some(threads) = cfg.threads {
        // Ignore the error a second configuration attempt raises when
        // several dispatches share one process (tests); results do not
        // depend on the pool size.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    match command {
        Command::Ingest(_) => commands::cmd_ingest(&cfg),
        Command::Preprocess(_) => commands::cmd_preprocess(&cfg),
        Command::Train(_) => commands::cmd_train(&cfg),
        Command::Backtest(_) => commands::cmd_backtest(&cfg),
        Command::Report(_) => commands::cmd_report(&cfg),
        Command::Synth(_) => commands::cmd_synth(&cfg),
        Command::Selfcheck { fault, .. } => commands::cmd_selfcheck(fault.as_deref()),
    }
}

/// Parses the command line, runs the subcommand, and returns the process
/// exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version arrive here too; they exit 0.
            let code = i32::from(e.use_stderr());
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .try_init();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config_keys() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("run.toml");
        std::fs::write(&path, "k = 10\nbase_seed = 3\n").unwrap();
        let common = CommonArgs {
            config: Some(path),
            seed: Some(9),
            k: Some(4),
            algo: Some(AlgoChoice::Fnn),
            ..CommonArgs::default()
        };
        let cfg = effective_config(&common).unwrap();
        assert_eq!(cfg.k, 4);
        assert_eq!(cfg.base_seed, 9);
        assert_eq!(cfg.algo, AlgoChoice::Fnn);
    }

    #[test]
    fn usage_errors_are_usage_errors() {
        let err = Cli::try_parse_from(["fundrank", "frobnicate"]).unwrap_err();
        assert!(err.use_stderr());
        let err = Cli::try_parse_from(["fundrank", "backtest", "--algo", "nope"]).unwrap_err();
        assert!(err.use_stderr());
        let ok = Cli::try_parse_from(["fundrank", "--help"]).unwrap_err();
        assert!(!ok.use_stderr());
    }

    #[test]
    fn exit_codes_partition_the_errors() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(
            CliError::Panel(PanelError::MissingFile("x".into())).exit_code(),
            2
        );
        assert_eq!(
            CliError::Fnn(FnnError::NonFiniteLoss { epoch: 3 }).exit_code(),
            3
        );
        assert_eq!(CliError::CheckFailed("x".into()).exit_code(), 3);
        assert_eq!(
            CliError::Backtest(BacktestError::UniverseTooSmall { n: 3, k: 2 }).exit_code(),
            2
        );
        assert_eq!(
            CliError::Backtest(BacktestError::Fnn(FnnError::NonFiniteLoss { epoch: 0 }))
                .exit_code(),
            3
        );
    }
}
