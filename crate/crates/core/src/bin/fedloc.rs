use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedloc::experiment::{report, run_experiment, schedules, ExperimentConfig};
use fedloc::selftest::run_selftest;

#[derive(Parser)]
#[command(name = "fedloc", version, about = "Private localized federated optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell of an experiment grid and write results.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Summaries, slope fits and plot data from a results file.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the phase schedules a config would run.
    Schedule {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> fedloc::Result<ExitCode> {
    match cli.command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let rows = run_experiment(&cfg)?;
            println!("{} rows written to {}", rows.len(), cfg.resolved_output_dir().join("results.csv").display());
        }
        Command::Report { input, out } => {
            let rep = report(&input, &out)?;
            for s in &rep.summary {
                match (s.median, s.std) {
                    (Some(m), Some(sd)) => println!("{:<18} eps={:<6} median={m:.6e} std={sd:.3e} (k={})", s.algorithm, s.epsilon, s.count),
                    _ => println!("{:<18} eps={:<6} no data", s.algorithm, s.epsilon),
                }
            }
            println!("report written to {}", out.display());
        }
        Command::Schedule { config } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let stdout = std::io::stdout();
            for (cell, schedule) in schedules(&cfg)? {
                println!(
                    "# {} N={} M={} n={} eps={} tau={} p={} n_unused={}",
                    cell.algorithm.name(),
                    cell.n_silos,
                    cell.m_available,
                    cell.n,
                    cell.epsilon,
                    schedule.tau,
                    schedule.p,
                    schedule.n_unused
                );
                schedule.write_csv(stdout.lock())?;
            }
        }
        Command::Selftest => {
            let results = run_selftest();
            let failed = results.iter().filter(|r| !r.passed).count();
            for r in &results {
                println!("{} {:<28} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
