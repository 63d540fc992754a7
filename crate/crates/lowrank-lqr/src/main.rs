//! Command-line entry point. Exit codes: 0 success, 2 config validation,
//! 3 runtime numeric failure, 4 I/O.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lowrank_lqr::harness::{
    cmd_coverage, cmd_diagnose_projection, cmd_run, cmd_spectrum, cmd_verify_riccati, load_config,
};
use lowrank_lqr::Error;

#[derive(Parser)]
#[command(
    name = "lowrank-lqr",
    about = "Episodic low-rank LQR learning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run all configured (mode, seed) experiments and write CSVs.
    Run { config: PathBuf },
    /// Eigenvalues of the initial-state sample covariance, descending.
    Spectrum {
        config: PathBuf,
        #[arg(long)]
        samples: usize,
    },
    /// Per-episode projection error and radius G under random controls.
    DiagnoseProjection { config: PathBuf },
    /// Fraction of independent runs whose final confidence region contains
    /// the truth.
    Coverage {
        config: PathBuf,
        #[arg(long)]
        trials: u64,
    },
    /// Monte Carlo cross-check of the Riccati cost formula.
    VerifyRiccati {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        cases: usize,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config } => {
            let config = load_config(&config)?;
            let out = cmd_run(&config)?;
            for p in &out.run_paths {
                println!("wrote {}", p.display());
            }
            println!("wrote {}", out.aggregate_path.display());
        }
        Command::Spectrum { config, samples } => {
            let config = load_config(&config)?;
            if samples < config.d() {
                eprintln!(
                    "warning: {} samples < d={}, sample covariance is rank deficient",
                    samples,
                    config.d()
                );
            }
            let eigs = cmd_spectrum(&config, samples)?;
            println!(
                "{}",
                eigs.iter()
                    .map(|v| lowrank_lqr::harness::fmt_float(*v))
                    .collect::<Vec<_>>()
                    .join(",")
            );
        }
        Command::DiagnoseProjection { config } => {
            let config = load_config(&config)?;
            let points = cmd_diagnose_projection(&config)?;
            let violations = points
                .iter()
                .filter(|p| p.g.is_finite() && p.proj_err > p.g)
                .count();
            println!(
                "logged {} episodes, {} with proj_err > G",
                points.len(),
                violations
            );
        }
        Command::Coverage { config, trials } => {
            let config = load_config(&config)?;
            let (covered, n) = cmd_coverage(&config, trials)?;
            println!("covered {}/{}", covered, n);
        }
        Command::VerifyRiccati { seed, cases } => {
            let report = cmd_verify_riccati(seed, cases)?;
            let mut failures = 0;
            for c in &report {
                if c.pass {
                    println!(
                        "case {}: pass (analytic {:.6e}, mc {:.6e}, se {:.2e})",
                        c.index, c.analytic, c.mc_mean, c.mc_se
                    );
                } else {
                    failures += 1;
                    println!(
                        "case {}: FAIL (analytic {:.6e}, mc {:.6e}, se {:.2e})",
                        c.index, c.analytic, c.mc_mean, c.mc_se
                    );
                    println!("  system: {}", c.system_json);
                }
            }
            println!("{}/{} cases passed", report.len() - failures, report.len());
            if failures > 0 {
                return Err(Error::Numerical(format!("{} case(s) failed", failures)));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
