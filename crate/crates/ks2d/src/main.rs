//! Command-line driver for the experiment harness.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ks2d::harness::{
    run_benchmark, run_convergence_space, run_convergence_time, run_simulation, ExperimentConfig,
    ExperimentKind, HarnessError, OutputFormat,
};

#[derive(Parser)]
#[command(
    name = "ks2d",
    about = "ADI and five-point finite-difference solvers for the 2D Keller-Segel equations",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Plain-text key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for reports, diagnostics, and snapshots.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Report format.
    #[arg(long, global = true, value_enum, default_value = "csv")]
    format: FormatArg,

    /// Worker threads for the sweep line solves (0 = sequential).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Seed for randomized components.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
}

#[derive(Copy, Clone, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Spatial convergence study against the manufactured solution.
    ConvergenceSpace,
    /// Temporal convergence study against the manufactured solution.
    ConvergenceTime {
        /// Scheme order: 1 (factored ADI) or 2 (additive ADI).
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        order: u8,
    },
    /// Wall-clock comparison of the ADI scheme and the five-point
    /// baseline over a list of grids.
    Benchmark,
    /// Free simulation with diagnostics stream and field snapshots.
    Simulate,
}

fn load_config(cli: &Cli, kind: ExperimentKind) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::defaults(kind);
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)?;
        cfg.apply_config_text(&text)?;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = Some(out.clone());
    }
    cfg.format = match cli.format {
        FormatArg::Csv => OutputFormat::Csv,
        FormatArg::Json => OutputFormat::Json,
    };
    cfg.threads = cli.threads;
    cfg.seed = cli.seed;
    Ok(cfg)
}

fn write_report(
    cfg: &ExperimentConfig,
    stem: &str,
    csv: String,
    json: String,
) -> Result<(), HarnessError> {
    let body = match cfg.format {
        OutputFormat::Csv => csv,
        OutputFormat::Json => json,
    };
    print!("{body}");
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)?;
        let ext = match cfg.format {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        };
        std::fs::write(dir.join(format!("{stem}.{ext}")), body)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), HarnessError> {
    match &cli.command {
        Command::ConvergenceSpace => {
            let cfg = load_config(cli, ExperimentKind::ConvergenceSpace)?;
            let report = run_convergence_space(&cfg)?;
            write_report(&cfg, "convergence_space", report.to_csv(), report.to_json())
        }
        Command::ConvergenceTime { order } => {
            let kind = if *order == 1 {
                ExperimentKind::ConvergenceTime1
            } else {
                ExperimentKind::ConvergenceTime2
            };
            let cfg = load_config(cli, kind)?;
            let report = run_convergence_time(&cfg, *order)?;
            write_report(&cfg, "convergence_time", report.to_csv(), report.to_json())
        }
        Command::Benchmark => {
            let cfg = load_config(cli, ExperimentKind::Benchmark)?;
            let report = run_benchmark(&cfg)?;
            write_report(&cfg, "benchmark", report.to_csv(), report.to_json())
        }
        Command::Simulate => {
            let cfg = load_config(cli, ExperimentKind::Simulate)?;
            let out = run_simulation(&cfg)?;
            println!(
                "simulated {} steps to t = {}; {} diagnostics records",
                out.steps,
                out.final_state.t,
                out.records.len()
            );
            if cfg.out_dir.is_none() {
                for rec in &out.records {
                    println!("{}", rec.to_csv_row());
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(
            e @ (HarnessError::NumericalAbort { .. }
            | HarnessError::Scheme(_)
            | HarnessError::Diagnostics(_)),
        ) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
