//! `ergwalk`: run environment checks, recurrence classification, velocity
//! estimates and simulation diagnostics from a JSON experiment config.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use commands::{Outcome, Status};
use config::{ExperimentConfig, MethodName};
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "ergwalk", version, about = "Random walks and birth-death processes in random environments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (JSON). A report written by an earlier run also works.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads.
    #[arg(long, global = true, env = "ERGWALK_DEFAULT_JOBS")]
    jobs: Option<usize>,

    /// Directory for report.json and CSV series.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Exit 3 on indeterminate verdicts and 4 on undefined velocities.
    #[arg(long, global = true)]
    strict: bool,
}

#[derive(Clone, Debug, Subcommand)]
enum Command {
    /// Check ellipticity, tail and non-explosion conditions.
    Validate,
    /// Classify recurrence from the Lyapunov spectrum.
    Classify,
    /// Estimate the velocity with one method.
    Velocity {
        /// mc-bdp, mc-rwre, theorem51 or corollary; overrides the config.
        #[arg(long)]
        method: Option<String>,
    },
    /// Run two velocity methods and test their agreement.
    Compare,
    /// Empirical skeleton jump tail against the exponential bound.
    Tailcheck,
    /// Skeleton velocity over h for several meshes.
    Hconsistency,
    /// Dump one path and the environment it visited.
    Simulate,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Classify => "classify",
            Command::Velocity { .. } => "velocity",
            Command::Compare => "compare",
            Command::Tailcheck => "tailcheck",
            Command::Hconsistency => "hconsistency",
            Command::Simulate => "simulate",
        }
    }
}

#[derive(Serialize)]
struct Report<'a> {
    command: &'a str,
    seed: u64,
    status: &'a str,
    warnings: &'a [String],
    result: &'a Value,
    config: &'a ExperimentConfig,
}

fn parse_method(name: &str) -> Result<MethodName, CliError> {
    serde_json::from_value(Value::String(name.to_string()))
        .map_err(|_| CliError::Config(format!("unknown method {name:?}; expected mc-bdp, mc-rwre, theorem51 or corollary")))
}

fn run(cli: &Cli) -> Result<i32, CliError> {
    let path = cli.config.as_deref().ok_or_else(|| CliError::Config("--config PATH is required".into()))?;
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot size the worker pool: {e}")))?;
    }
    let mut raw = config::load(path)?;
    let name = cli.command.name();
    if let Command::Velocity { method: Some(m) } = &cli.command {
        raw.velocity.get_or_insert_with(Default::default).method = Some(parse_method(m)?);
    }
    let (cfg, law) = raw.resolve(name, cli.seed)?;
    let outcome = match cli.command {
        Command::Validate => commands::validate(&cfg, &law),
        Command::Classify => commands::classify(&cfg, &law),
        Command::Velocity { .. } => commands::velocity(&cfg, &law),
        Command::Compare => commands::compare(&cfg, &law),
        Command::Tailcheck => commands::tailcheck(&cfg, &law),
        Command::Hconsistency => commands::hconsistency(&cfg, &law),
        Command::Simulate => commands::simulate(&cfg, &law),
    }?;
    let code = match outcome.status {
        Status::Ok => 0,
        Status::Indeterminate if cli.strict => 3,
        Status::Diverged if cli.strict || name == "compare" => 4,
        _ => 0,
    };
    emit(cli.out.as_deref(), name, &cfg, &outcome)?;
    Ok(code)
}

fn emit(out: Option<&Path>, name: &str, cfg: &ExperimentConfig, outcome: &Outcome) -> Result<(), CliError> {
    let status = match outcome.status {
        Status::Ok => "ok",
        Status::Indeterminate => "indeterminate",
        Status::Diverged => "diverged",
    };
    let report = Report { command: name, seed: cfg.seed, status, warnings: &outcome.warnings, result: &outcome.result, config: cfg };
    let text = serde_json::to_string_pretty(&report).expect("reports serialize to JSON") + "\n";
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    let Some(dir) = out else {
        print!("{text}");
        return Ok(());
    };
    let write = |file: &str, contents: &str| -> Result<(), CliError> {
        let path = dir.join(file);
        std::fs::write(&path, contents).map_err(|source| CliError::Output { path, source })
    };
    std::fs::create_dir_all(dir).map_err(|source| CliError::Output { path: dir.to_path_buf(), source })?;
    write("report.json", &text)?;
    for (file, contents) in &outcome.files {
        write(file, contents)?;
    }
    println!("{}", dir.join("report.json").display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
