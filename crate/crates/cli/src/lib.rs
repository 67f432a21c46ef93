//! Scenario runner for `btw-core`: reads a JSON configuration, runs one
//! scenario, and writes CSV or JSON tables, a JSON summary and an optional SVG
//! plot.
//!
//! Exit codes: 0 success, 1 runtime or I/O failure, 2 failed assertion
//! scenario, 3 configuration error.

pub mod config;
pub mod output;
pub mod plot;
pub mod scenarios;

use std::path::PathBuf;

use clap::Parser;

use config::{Flags, Format, Scenario};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("malformed CSV: {0}")]
    MalformedCsv(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] btw_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::MalformedCsv(_) => 3,
            CliError::Io(_) | CliError::Core(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "btw", version, about = "Biased walks on branching random walk environments: scenario runner")]
pub struct Cli {
    /// Scenario to run.
    #[arg(value_enum)]
    pub scenario: Scenario,
    /// JSON scenario configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Law file (JSON) or one of ENV-A, ENV-B, ENV-C.
    #[arg(long)]
    pub law: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub replicas: Option<u64>,
    /// Samples per replica.
    #[arg(long)]
    pub samples: Option<u64>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Write an SVG log-log plot here.
    #[arg(long)]
    pub plot: Option<PathBuf>,
}

/// Outcome of a completed run.
#[derive(Debug)]
pub struct RunOutcome {
    pub written: Vec<PathBuf>,
    pub assertion_passed: Option<bool>,
}

pub fn execute(cli: Cli) -> Result<RunOutcome, CliError> {
    let flags = Flags {
        config: cli.config,
        law: cli.law,
        out: cli.out,
        seed: cli.seed,
        replicas: cli.replicas,
        samples: cli.samples,
        format: cli.format,
        plot: cli.plot,
    };
    let cfg = config::resolve(cli.scenario, flags)?;
    let mut violation = None;
    if let Some(law) = &cfg.law {
        let cond = law.conditions();
        if !cond.lattice.non_lattice {
            eprintln!("warning: the displacement support looks lattice");
        }
        violation = cond.first_violation();
    }
    // env-report still writes its condition table for a bad law
    if let (Some(v), false) = (&violation, cfg.scenario == Scenario::EnvReport) {
        return Err(CliError::Config { field: "law".into(), message: v.clone() });
    }
    let report = scenarios::run(&cfg)?;
    let mut written = output::write_report(&report, cfg.scenario.name(), &cfg.out, cfg.format)?;
    if let Some(path) = &cfg.plot {
        plot::write_svg(&report.plot, path)?;
        written.push(path.clone());
    }
    if let Some(v) = violation {
        return Err(CliError::Config { field: "law".into(), message: v });
    }
    Ok(RunOutcome { written, assertion_passed: report.assertion.map(|a| a.passed) })
}

/// Parses `args`, runs, reports to stderr, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 3 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(out) => {
            for p in &out.written {
                eprintln!("wrote {}", p.display());
            }
            match out.assertion_passed {
                Some(false) => {
                    eprintln!("assertion failed; see the summary file");
                    2
                }
                _ => 0,
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
