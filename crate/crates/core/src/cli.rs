//! Command-line front end.
//!
//! Exit codes: 0 success, 1 I/O or setup failure, 2 bad config or unknown
//! attack, 3 invariant violation.

use std::ffi::OsString;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::config::{ConfigError, ScenarioConfig};
use crate::metrics::CostReport;
use crate::privacy::{evaluate, monte_carlo, Attack, AttackReport, Mitigations, UnknownAttack};
use crate::sim::{SimError, Simulation};
use crate::trace::TradeTrace;

#[derive(Debug, Parser)]
#[command(name = "datamarket", version, about = "Multi-chain IoT data marketplace simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario to quiescence and write its artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Also run this linkage attack (timing or size).
        #[arg(long)]
        attack: Option<String>,
        /// Monte Carlo runs for --attack; 1 attacks only this run's trace.
        #[arg(long, default_value_t = 1)]
        runs: usize,
    },
    /// Run a linkage attack, either Monte Carlo over a config or against one trace.
    Attack {
        #[arg(long)]
        attack: String,
        #[arg(long, required_unless_present = "trace")]
        config: Option<PathBuf>,
        /// A trace.jsonl written by `run`; ignores --runs.
        #[arg(long, conflicts_with = "config")]
        trace: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 200)]
        runs: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Print the cost summary of a trace.
    Report {
        #[arg(long)]
        trace: PathBuf,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    UnknownAttack(#[from] UnknownAttack),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(ConfigError::Io(_)) => 1,
            CliError::Config(_) | CliError::UnknownAttack(_) => 2,
            CliError::Sim(SimError::InvariantViolation { .. }) => 3,
            CliError::Sim(SimError::Setup(_)) | CliError::Io { .. } => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(io_err(&path))
}

fn load(path: &Path, seed: Option<u64>) -> Result<ScenarioConfig, CliError> {
    let mut cfg = ScenarioConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_report(out: &Path, report: &AttackReport) -> Result<(), CliError> {
    write(out, &format!("attack_{}.json", report.attack), report.to_json())?;
    println!(
        "{}: accuracy {:.4} [{:.4}, {:.4}] over {} run(s), {} links",
        report.attack, report.mean_accuracy, report.ci95_low, report.ci95_high, report.n_runs, report.links
    );
    if let Some(w) = &report.warning {
        log::warn!("{w}");
    }
    Ok(())
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            attack,
            runs,
        } => {
            let cfg = load(&config, seed)?;
            let attack = attack.map(|a| a.parse::<Attack>()).transpose()?;
            fs::create_dir_all(&out).map_err(io_err(&out))?;
            let mut sim = Simulation::new(cfg.clone())?;
            let outcome = sim.run();
            // Artifacts are written even when an invariant fails, for diagnosis.
            let trace = sim.trace();
            write(&out, "trace.jsonl", trace.to_jsonl())?;
            write(&out, "cost_report.json", CostReport::from_trace(&trace).to_json())?;
            write(&out, "reputation.json", sim.reputation_json())?;
            let summary = sim.summary();
            write(
                &out,
                "summary.json",
                serde_json::to_string_pretty(&summary).expect("summary serializes"),
            )?;
            outcome?;
            println!(
                "{} epochs, {} trades settled, {} L1 txs{}",
                summary.epochs,
                summary.settled,
                summary.l1_tx_count,
                if summary.quiescent { "" } else { " (max_epochs reached)" }
            );
            if let Some(a) = attack {
                let report = if runs <= 1 {
                    let (k, n) = evaluate(&trace, a);
                    AttackReport::from_counts(a, &[(k, n)], Mitigations::of(&cfg))
                } else {
                    monte_carlo(&cfg, &[a], runs)?.remove(0)
                };
                write_report(&out, &report)?;
            }
            Ok(())
        }
        Command::Attack {
            attack,
            config,
            trace,
            seed,
            runs,
            out,
        } => {
            let a: Attack = attack.parse()?;
            fs::create_dir_all(&out).map_err(io_err(&out))?;
            let report = match (trace, config) {
                (Some(path), _) => {
                    let f = fs::File::open(&path).map_err(io_err(&path))?;
                    let t = TradeTrace::read_jsonl(BufReader::new(f)).map_err(io_err(&path))?;
                    let (k, n) = evaluate(&t, a);
                    let unknown = Mitigations {
                        padding: None,
                        batching: None,
                    };
                    AttackReport::from_counts(a, &[(k, n)], unknown)
                }
                (None, Some(path)) => {
                    let cfg = load(&path, seed)?;
                    monte_carlo(&cfg, &[a], runs)?.remove(0)
                }
                (None, None) => unreachable!("clap requires one of --trace and --config"),
            };
            write_report(&out, &report)
        }
        Command::Report { trace } => {
            let f = fs::File::open(&trace).map_err(io_err(&trace))?;
            let t = TradeTrace::read_jsonl(BufReader::new(f)).map_err(io_err(&trace))?;
            print!("{}", CostReport::from_trace(&t).render());
            Ok(())
        }
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
