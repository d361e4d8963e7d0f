//! `earlywarn`: early-warning assignment and regression-discontinuity
//! evaluation from course logs.

mod commands;
mod config;
mod report;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Overrides, RunConfig};
use earlywarn::{Error, ErrorClass};

#[derive(Debug, Parser)]
#[command(name = "earlywarn", version, about = "Early-warning emails and their regression-discontinuity evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Overrides,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-student features and descriptive tables from course logs.
    Features,
    /// Fit the pass model on a prior cohort and predict the current one.
    Predict,
    /// Apply the cutoff rule and overrides; build the analysis dataset.
    Assign,
    /// Density test, bandwidth selection and local 2SLS estimates.
    Analyze,
    /// Density discontinuity test of the running variable.
    Mccrary,
    /// Data-driven bandwidth with diagnostics.
    Bandwidth,
    /// Synthetic analysis dataset from a data-generating process spec.
    Simulate,
}

fn hint(e: &Error) -> Option<&'static str> {
    match e {
        Error::EmptyWindow(_) => Some("widen the window with --bandwidth or check --cutoff"),
        Error::NoInstrumentVariation => Some("the window holds one side of the cutoff only; widen --bandwidth"),
        Error::RankDeficient { .. } => Some("drop collinear regressors, e.g. with --no-covariates"),
        Error::InsufficientDof { .. } => Some("use a wider bandwidth or fewer regressors"),
        Error::QuasiSeparation { .. } => Some("a feature separates the outcome; drop it from `features`"),
        Error::DegenerateOutcome => Some("the training cohort needs both passes and failures"),
        Error::InsufficientData(_) | Error::DegenerateDensity(_) => Some("more observations near the cutoff are needed"),
        _ => None,
    }
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Input => 2,
        ErrorClass::Validity => 3,
        ErrorClass::Numeric => 4,
    }
}

fn run(cli: &Cli) -> earlywarn::Result<()> {
    let cfg = RunConfig::load(&cli.flags)?;
    if let Some(n) = cfg.threads {
        if n == 0 {
            return Err(Error::Validation("--threads must be positive".into()));
        }
        // Ignored if a pool already exists; results do not depend on it.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Features => commands::features(&cfg),
        Command::Predict => commands::predict(&cfg),
        Command::Assign => commands::assign_cmd(&cfg),
        Command::Analyze => commands::analyze(&cfg),
        Command::Mccrary => commands::mccrary(&cfg),
        Command::Bandwidth => commands::bandwidth(&cfg),
        Command::Simulate => commands::simulate(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(h) = hint(&e) {
                eprintln!("hint: {h}");
            }
            ExitCode::from(exit_code(e.class()))
        }
    }
}
