//! Command line: `simulate`, `verify` and `bench`.
//!
//! Exit codes: 0 on success, 1 on an invariant failure or runtime error,
//! 2 on a malformed or missing config.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use super::config::{load_spec, PathLabel};
use super::trace::{run_trace, TraceError};
use super::verify::run_suite;
use crate::ledger::CostLedger;

#[derive(Debug, Parser)]
#[command(
    name = "roundkv",
    version,
    about = "Collective KV cache reuse simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the configured paths and write the JSON report.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the invariant suite; nonzero exit on any failure.
    Verify {
        #[arg(long)]
        config: PathBuf,
    },
    /// Repeat the trace and report implementation timing next to the counters.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Write the JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Serialize)]
struct BenchReport {
    note: &'static str,
    iterations: usize,
    mean_seconds: BTreeMap<PathLabel, f64>,
    total_seconds: f64,
    ledgers: BTreeMap<PathLabel, CostLedger>,
}

fn fail(err: &TraceError) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(1)
}

pub fn run(cli: Cli) -> ExitCode {
    let config = match &cli.command {
        Command::Simulate { config, .. }
        | Command::Verify { config }
        | Command::Bench { config, .. } => config,
    };
    let spec = match load_spec(config) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match cli.command {
        Command::Simulate { out, .. } => {
            let trace = match run_trace(&spec) {
                Ok(t) => t,
                Err(e) => return fail(&e),
            };
            if let Err(e) = std::fs::write(&out, trace.report.to_json()) {
                eprintln!("error: cannot write {}: {e}", out.display());
                return ExitCode::from(1);
            }
            ExitCode::SUCCESS
        }
        Command::Verify { .. } => {
            let checks = match run_suite(&spec) {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} checks, {failed} failed", checks.len());
            if failed == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Command::Bench { out, .. } => {
            let iterations = spec.harness.bench_iterations;
            let mut sums: BTreeMap<PathLabel, f64> = BTreeMap::new();
            let mut ledgers = BTreeMap::new();
            let started = Instant::now();
            for _ in 0..iterations {
                let trace = match run_trace(&spec) {
                    Ok(t) => t,
                    Err(e) => return fail(&e),
                };
                for (p, d) in &trace.timings {
                    *sums.entry(*p).or_default() += d.as_secs_f64();
                }
                ledgers.clear();
                for row in &trace.report.rows {
                    ledgers
                        .entry(row.path)
                        .or_insert_with(|| CostLedger::new(spec.model.num_layers))
                        .absorb(&row.ledger);
                }
            }
            let report = BenchReport {
                note: "implementation timing on this machine; not a reproduction of published speedups",
                iterations,
                mean_seconds: sums.into_iter().map(|(p, s)| (p, s / iterations as f64)).collect(),
                total_seconds: started.elapsed().as_secs_f64(),
                ledgers,
            };
            let text =
                serde_json::to_string_pretty(&report).expect("bench report serializes") + "\n";
            match out {
                Some(path) => {
                    if let Err(e) = std::fs::write(&path, text) {
                        eprintln!("error: cannot write {}: {e}", path.display());
                        return ExitCode::from(1);
                    }
                }
                None => print!("{text}"),
            }
            ExitCode::SUCCESS
        }
    }
}
