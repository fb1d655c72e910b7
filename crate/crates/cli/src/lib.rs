//! `wmconf` command-line surface: detection on score tables, synthetic
//! experiments, and BLEU between two text files.
//!
//! Exit codes: 0 on success, 2 on validation errors, 1 on internal errors.
//! Failures print one JSON line on stderr:
//! `{"error":"<kind>","message":"...","exit_code":N}`.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use wmconf_core::conformal::Method;
use wmconf_core::density::ShiftMethod;
use wmconf_core::io::read_input;
use wmconf_core::{bleu, tokenize, BleuScore, Error, Result};

mod detect;
mod simulate;

pub use detect::{run_detect, DecisionRow, DetectArgs, DetectOutcome};
pub use simulate::{run_simulate, thread_cap, SimulateOutcome, SIMULATE_OUTPUTS, THREADS_ENV};

#[derive(Debug, Parser)]
#[command(name = "wmconf", version, about = "Conformal watermark detection for student essays")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Standard,
    Hierarchical,
    Weighted,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ShiftArg {
    Mean,
    Quantile,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Flag test essays against a calibration table.
    Detect {
        /// Calibration scores (CSV, or JSON by extension).
        #[arg(long)]
        cal: PathBuf,
        /// Test scores.
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_enum, default_value = "standard")]
        method: MethodArg,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Shift estimate for the minority density (weighted only).
        #[arg(long, value_enum, default_value = "quantile")]
        shift: ShiftArg,
        #[arg(long, default_value_t = 0.5)]
        bandwidth: f64,
        #[arg(long, value_enum, default_value = "on")]
        log_scale: Toggle,
        /// Recorded in the manifest; detection itself is deterministic.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run a synthetic experiment and write metric tables.
    Simulate {
        /// TOML experiment config; the built-in default when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Worker threads; overrides CONFORMAL_WM_THREADS.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// BLEU of a candidate text file against a reference text file.
    Bleu { reference: PathBuf, candidate: PathBuf },
}

/// Tokenizes both files and scores the candidate against the reference.
pub fn run_bleu(reference: &Path, candidate: &Path) -> Result<BleuScore> {
    let read = |path: &Path| -> Result<String> {
        let bytes = read_input(path)?;
        String::from_utf8(bytes).map_err(|e| Error::Unreadable {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    };
    Ok(bleu(&tokenize(&read(reference)?), &tokenize(&read(candidate)?)))
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_validation() {
        2
    } else {
        1
    }
}

/// The machine-readable stderr line for a failure.
pub fn error_line(err: &Error) -> String {
    serde_json::json!({
        "error": err.kind(),
        "message": err.to_string(),
        "exit_code": exit_code(err),
    })
    .to_string()
}

fn dispatch(command: Command, stdout: &mut dyn Write) -> Result<()> {
    match command {
        Command::Detect {
            cal,
            test,
            method,
            alpha,
            shift,
            bandwidth,
            log_scale,
            seed,
            out,
        } => {
            let args = DetectArgs {
                cal,
                test,
                method: match method {
                    MethodArg::Standard => Method::Standard,
                    MethodArg::Hierarchical => Method::Hierarchical,
                    MethodArg::Weighted => Method::Weighted,
                },
                alpha,
                shift: match shift {
                    ShiftArg::Mean => ShiftMethod::Mean,
                    ShiftArg::Quantile => ShiftMethod::Quantile,
                },
                bandwidth,
                log_scale: matches!(log_scale, Toggle::On),
                seed,
                out,
            };
            let outcome = run_detect(&args)?;
            let flagged = outcome.decisions.iter().filter(|d| d.decision.flagged).count();
            let _ = writeln!(
                stdout,
                "{}",
                serde_json::json!({"decisions": outcome.decisions.len(), "flagged": flagged, "out": args.out})
            );
        }
        Command::Simulate { config, out, threads } => {
            let outcome = run_simulate(config.as_deref(), &out, threads)?;
            let _ = writeln!(
                stdout,
                "{}",
                serde_json::json!({
                    "cells": outcome.report.cells.len(),
                    "summaries": outcome.report.summaries.len(),
                    "omitted": outcome.report.omitted.len(),
                    "out": out,
                })
            );
        }
        Command::Bleu { reference, candidate } => {
            let score = run_bleu(&reference, &candidate)?;
            let _ = writeln!(stdout, "{}", serde_json::to_string(&score).expect("score serializes"));
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            if code == 0 {
                let _ = write!(stdout, "{e}");
            } else {
                let _ = writeln!(
                    stderr,
                    "{}",
                    serde_json::json!({"error": "usage", "message": e.to_string().trim(), "exit_code": 2})
                );
            }
            return code;
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(()) => 0,
        Err(err) => {
            let _ = writeln!(stderr, "{}", error_line(&err));
            exit_code(&err)
        }
    }
}
