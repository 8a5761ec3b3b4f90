//! `dealflow`: simulate, fit, train, predict and evaluate group-deal
//! purchase dynamics from the command line.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 insufficient data.

mod commands;
mod manifest;

use std::ffi::OsString;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dealflow_core::Error as CoreError;

#[derive(Debug, Parser)]
#[command(name = "dealflow", version, about = "Group-deal purchase dynamics toolkit")]
pub struct Cli {
    /// Worker threads; output does not depend on this.
    #[arg(long, global = true, env = "DEALFLOW_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort of purchase traces.
    Simulate(commands::SimulateArgs),
    /// Fit the renewal rate and novelty decay to observed traces.
    Fit(commands::FitArgs),
    /// Train predictors for one target time.
    Train(commands::TrainArgs),
    /// Predict the count at the target time from trace prefixes.
    Predict(commands::PredictArgs),
    /// Train/test evaluation of the predictors by relative error.
    Evaluate(commands::EvaluateArgs),
    /// Re-run the invocation recorded in a manifest.
    Replay(commands::ReplayArgs),
}

/// Raised for user-facing failures that carry their own exit code.
#[derive(Debug)]
pub struct Exit {
    pub code: u8,
    pub message: String,
}

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

pub fn usage(message: impl Into<String>) -> anyhow::Error {
    Exit { code: 2, message: message.into() }.into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Exit>() {
            return e.code;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::InsufficientData(_) => 3,
                _ => 2,
            };
        }
    }
    2
}

/// Parses `argv` (program name first) and runs it.
pub fn run(argv: Vec<OsString>) -> anyhow::Result<()> {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            e.print()?;
            if code == 0 {
                return Ok(());
            }
            return Err(Exit { code: 2, message: "invalid arguments".into() }.into());
        }
    };
    if let Some(k) = cli.threads {
        if k == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        // Fails only if a pool already exists, e.g. during replay.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
    }
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match cli.command {
        Command::Simulate(a) => commands::simulate(a, &argv),
        Command::Fit(a) => commands::fit(a, &argv),
        Command::Train(a) => commands::train(a, &argv),
        Command::Predict(a) => commands::predict(a, &argv),
        Command::Evaluate(a) => commands::evaluate(a, &argv),
        Command::Replay(a) => {
            let recorded = manifest::load(&a.manifest)?;
            log::info!("replaying {} from {}", recorded.subcommand, a.manifest.display());
            std::env::set_current_dir(&recorded.working_dir).map_err(|e| {
                usage(format!("cannot enter {}: {e}", recorded.working_dir.display()))
            })?;
            run(recorded.argv.into_iter().map(OsString::from).collect())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code(&err);
            if !matches!(err.downcast_ref::<Exit>(), Some(e) if e.message == "invalid arguments") {
                eprintln!("error: {err:#}");
            }
            ExitCode::from(code)
        }
    }
}
