//! `ppap`: run continual-learning experiments, chart their metrics and run
//! the built-in self-checks.
//!
//! Exit codes: 0 on success, 1 when a run, report or check fails, 2 when the
//! configuration or command line is invalid.

mod config;
mod report;
mod run;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ppap_core::verify::{run_verify, Suite};

use crate::config::load_config;
use crate::report::Style;

#[derive(Parser)]
#[command(name = "ppap", version, about = "Plateau-phase activity profiling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every method of a config and write metrics.csv.
    Run {
        #[arg(long, env = "PPAP_CONFIG")]
        config: PathBuf,
        /// Output directory; overrides `out` in the config.
        #[arg(long, env = "PPAP_OUT")]
        out: Option<PathBuf>,
        /// Worker threads; overrides `workers` in the config.
        #[arg(long, env = "PPAP_WORKERS")]
        workers: Option<usize>,
        /// Runs this single seed instead of the configured list.
        #[arg(long, env = "PPAP_SEED_OVERRIDE")]
        seed_override: Option<u64>,
    },
    /// Draw SVG charts from one or more metrics CSVs.
    Report {
        #[arg(long, value_enum, default_value = "bars")]
        style: ReportStyle,
        #[arg(long, env = "PPAP_OUT", default_value = "report")]
        out: PathBuf,
        #[arg(required = true)]
        csv: Vec<PathBuf>,
    },
    /// Run the numerical self-checks and print a table.
    Verify {
        /// Print CSV instead of a table.
        #[arg(long)]
        csv: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportStyle {
    Bars,
    Scatter,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(2),
            };
        }
    };
    match cli.command {
        Command::Run {
            config,
            out,
            workers,
            seed_override,
        } => cmd_run(config, out, workers, seed_override),
        Command::Report { style, out, csv } => {
            let style = match style {
                ReportStyle::Bars => Style::Bars,
                ReportStyle::Scatter => Style::Scatter,
            };
            let written = report::read_rows(&csv).and_then(|rows| report::report(&rows, style, &out));
            match written {
                Ok(paths) => {
                    for p in paths {
                        println!("{}", p.display());
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            }
        }
        Command::Verify { csv } => cmd_verify(csv),
    }
}

fn cmd_run(path: PathBuf, out: Option<PathBuf>, workers: Option<usize>, seed: Option<u64>) -> ExitCode {
    let cfg = load_config(&path).and_then(|mut cfg| {
        if let Some(out) = out {
            cfg.out = out;
        }
        if let Some(w) = workers {
            cfg.workers = w;
        }
        if let Some(s) = seed {
            cfg.seeds = vec![s];
        }
        cfg.resolve()?;
        Ok(cfg)
    });
    let cfg = match cfg {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error in {}: {e}", path.display());
            return ExitCode::from(2);
        }
    };
    match run::run(&cfg) {
        Ok(summary) if summary.failures.is_empty() => {
            println!("{}", summary.csv.display());
            ExitCode::SUCCESS
        }
        Ok(summary) => {
            for f in &summary.failures {
                eprintln!("error: {f}");
            }
            eprintln!(
                "{} cell(s) failed; completed cells written to {}",
                summary.failures.len(),
                summary.csv.display()
            );
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

/// `PPAP_VERIFY_INJECT` names suites whose check is deliberately broken, to
/// exercise the failure path.
fn cmd_verify(csv: bool) -> ExitCode {
    let inject: Vec<Suite> = match std::env::var("PPAP_VERIFY_INJECT") {
        Ok(list) => {
            let mut out = Vec::new();
            for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                match Suite::parse(name) {
                    Some(s) => out.push(s),
                    None => {
                        eprintln!("PPAP_VERIFY_INJECT: unknown suite `{name}`");
                        return ExitCode::from(2);
                    }
                }
            }
            out
        }
        Err(_) => Vec::new(),
    };
    let report = run_verify(&inject);
    if csv {
        print!("{}", report.csv());
    } else {
        print!("{}", report.table());
    }
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        let names: Vec<String> = report.failed().map(|s| s.name().to_string()).collect();
        eprintln!("failed: {}", names.join(", "));
        ExitCode::from(1)
    }
}
