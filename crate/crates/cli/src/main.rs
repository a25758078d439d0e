use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ridematch::mdp::{Solver, ViParams};
use ridematch_cli::boundaries::{default_grid, emit_boundaries};
use ridematch_cli::config::load_config;
use ridematch_cli::run::{run_experiment, OnlyFilter, RunOptions};
use ridematch_cli::CliError;

#[derive(Parser)]
#[command(name = "ridematch", version, about = "Index-policy ride matching experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the policy and penalty sweep described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory, overriding the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Base seed, overriding the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Recompute index tables even when cached.
        #[arg(long)]
        rebuild_index: bool,
        /// Restrict to cells, e.g. `policy=bi,zeta=7`.
        #[arg(long)]
        only: Option<String>,
    },
    /// Write boundary curves of a fixture service.
    Boundaries {
        #[arg(long)]
        service: usize,
        /// Comma-separated multiplier grid for the other slot.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        grid: Option<Vec<f64>>,
        #[arg(long, value_enum, default_value_t = SolverArg::Exact)]
        solver: SolverArg,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Exact,
    ValueIteration,
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            rebuild_index,
            only,
        } => {
            let cfg = load_config(&config)?;
            let only: OnlyFilter = match only {
                Some(s) => s.parse()?,
                None => OnlyFilter::default(),
            };
            let report = run_experiment(
                &cfg,
                &RunOptions {
                    out,
                    seed,
                    rebuild_index,
                    only,
                },
            )?;
            eprintln!("wrote results to {}", report.out_dir.display());
            Ok(report.exit_code())
        }
        Command::Boundaries {
            service,
            grid,
            solver,
            out,
        } => {
            let solver = match solver {
                SolverArg::Exact => Solver::Exact,
                SolverArg::ValueIteration => Solver::ValueIteration(ViParams::default()),
            };
            let grid = grid.unwrap_or_else(default_grid);
            let res = emit_boundaries(service, &grid, solver)?;
            match out {
                Some(p) => fs::write(p, &res.text)?,
                None => print!("{}", res.text),
            }
            match res.notice {
                Some(n) => Err(CliError::Usage(n)),
                None => Ok(0),
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
