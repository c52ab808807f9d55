use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use edgecloud::report::{report_from_trace, Report};
use edgecloud::scenario::{load_scenario, run_scenario};
use edgecloud::sweep;
use edgecloud::trace::Trace;

#[derive(Parser)]
#[command(name = "edgecloud", version, about = "Deterministic IoT edge-cloud platform simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario file without running it.
    Validate { scenario: PathBuf },
    /// Run a scenario and print its report.
    Run {
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Stop at this simulated time instead of the scenario's duration.
        #[arg(long, value_name = "MS")]
        until: Option<u64>,
        /// Write the JSONL trace here.
        #[arg(long, value_name = "PATH")]
        trace: Option<PathBuf>,
        /// Write per-window metrics (CSV) here.
        #[arg(long, value_name = "PATH")]
        metrics: Option<PathBuf>,
    },
    /// Rebuild the report from a trace file.
    Report {
        trace: PathBuf,
        #[arg(long, value_name = "PATH")]
        metrics: Option<PathBuf>,
    },
    /// Run a scenario under many seeds and print one line per run.
    Sweep {
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        #[arg(long, default_value_t = 16)]
        runs: u64,
    },
}

enum Failure {
    Invalid(String),
    Runtime(String),
}

impl Failure {
    fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        Failure::Runtime(format!("{}: {e}", path.display()))
    }
}

fn write_metrics(report: &Report, path: &std::path::Path) -> Result<(), Failure> {
    let file = File::create(path).map_err(|e| Failure::io(path, e))?;
    report
        .write_metrics(BufWriter::new(file))
        .map_err(|e| Failure::io(path, e))
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Validate { scenario } => {
            let loaded = load_scenario(&scenario).map_err(|e| Failure::Invalid(e.to_string()))?;
            println!(
                "{}: ok ({} nodes, {} links, {} apps, {} script steps)",
                loaded.scenario.name,
                loaded.topology.nodes().count(),
                loaded.topology.links().count(),
                loaded.catalog.apps().count(),
                loaded.scenario.script.len()
            );
        }
        Command::Run {
            scenario,
            seed,
            until,
            trace,
            metrics,
        } => {
            let mut loaded = load_scenario(&scenario).map_err(|e| Failure::Invalid(e.to_string()))?;
            if let Some(seed) = seed {
                loaded = loaded.with_seed(seed);
            }
            let out = run_scenario(&loaded, until);
            if let Some(path) = &trace {
                let mut w = BufWriter::new(File::create(path).map_err(|e| Failure::io(path, e))?);
                w.write_all(out.trace.to_jsonl().as_bytes())
                    .and_then(|_| w.flush())
                    .map_err(|e| Failure::io(path, e))?;
            }
            if let Some(path) = &metrics {
                write_metrics(&out.report, path)?;
            }
            print!("{}", out.report);
            println!("  trace sha256 {}", out.trace.hash());
        }
        Command::Report { trace, metrics } => {
            let text = std::fs::read_to_string(&trace).map_err(|e| Failure::io(&trace, e))?;
            let parsed = Trace::from_jsonl(&text).map_err(|e| Failure::Invalid(e.to_string()))?;
            let report = report_from_trace(&parsed).map_err(|e| Failure::Invalid(e.to_string()))?;
            if let Some(path) = &metrics {
                write_metrics(&report, path)?;
            }
            print!("{report}");
        }
        Command::Sweep {
            scenario,
            first_seed,
            runs,
        } => {
            let loaded = load_scenario(&scenario).map_err(|e| Failure::Invalid(e.to_string()))?;
            let seeds: Vec<u64> = (first_seed..first_seed + runs).collect();
            let stdout = io::stdout();
            let mut out = stdout.lock();
            for r in sweep::seeds(&loaded, &seeds) {
                writeln!(
                    out,
                    "seed {:>6}  records {:>7}  migrations {:>3}  offloads {:>3}  dropped {:>10}  {}",
                    r.seed, r.trace_len, r.summary.migrations, r.summary.offloads, r.summary.dropped_bits, r.trace_hash
                )
                .map_err(|e| Failure::Runtime(e.to_string()))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
