//! `pdmp-lab`: simulate switched vector fields and run the regularity
//! diagnostics from a JSON experiment config.
//!
//! Exit codes: 0 on success, 2 for configuration or usage errors, 3 for
//! runtime failures such as a trajectory leaving the box.

mod commands;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{default_workers, parse_grid, DensityArgs, ExampleArgs, PointSource};
use error::{CliError, EXIT_CONFIG};

#[derive(Parser)]
#[command(
    name = "pdmp-lab",
    version,
    about = "Randomly switched vector fields: simulation and regularity diagnostics"
)]
#[command(after_help = "The seed is taken from the config; without one, PDMP_LAB_SEED is used, then 0.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one trajectory and write `t,state,x1..xd` samples as CSV.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sample spacing; defaults to the config's `output_dt`, then the RK step.
        #[arg(long)]
        output_dt: Option<f64>,
    },
    /// Estimate the stationary density and write `density_state<i>.csv`.
    Density {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Cells per axis [default: config, then 64].
        #[arg(long)]
        cells: Option<usize>,
        /// Independent trajectories [default: config, then 100].
        #[arg(long)]
        trajectories: Option<usize>,
        #[arg(long, default_value_t = default_workers())]
        workers: usize,
        /// Comma-separated rate scalings; each gets its own `lambda_<value>` directory.
        #[arg(long, value_delimiter = ',')]
        lambda_list: Option<Vec<f64>>,
    },
    /// Rank of the iterated-bracket span at points, as JSON.
    Hormander {
        #[arg(long)]
        config: PathBuf,
        /// JSON file with an array of points.
        #[arg(long, conflicts_with = "grid")]
        points: Option<PathBuf>,
        /// Tensor grid `LO:HI:N`, e.g. `-1,-1:1,1:5`.
        #[arg(long, value_parser = parse_grid, allow_hyphen_values = true)]
        grid: Option<PointSource>,
        /// Bracket depth [default: config, then 1].
        #[arg(long)]
        depth: Option<usize>,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the blow-up conditions for the config's `singularity` block.
    Singularity {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for verdict.json, blowup.json and exponent.csv.
        #[arg(long)]
        out: PathBuf,
        /// Trajectories for the empirical diagnostic [default: config, then 100].
        #[arg(long)]
        trajectories: Option<usize>,
        #[arg(long, default_value_t = default_workers())]
        workers: usize,
    },
    /// Run every pipeline on the built-in rotation/contraction example
    /// with Q = [[-q1, q1], [q2, -q2]] scaled by lambda.
    ExampleRotcontract(ExampleFlags),
}

#[derive(Args)]
struct ExampleFlags {
    #[arg(long, default_value_t = 1.5)]
    q1: f64,
    #[arg(long, default_value_t = 2.0)]
    q2: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5000)]
    trajectories: usize,
    #[arg(long, default_value_t = 1000.0)]
    horizon: f64,
    /// RK4 step.
    #[arg(long, default_value_t = 0.01)]
    step: f64,
    /// Histogram cells per axis.
    #[arg(long, default_value_t = 64)]
    cells: usize,
    #[arg(long, env = "PDMP_LAB_SEED", default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = default_workers())]
    workers: usize,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { config, out, output_dt } => commands::cmd_simulate(&config, &out, output_dt),
        Command::Density {
            config,
            out,
            cells,
            trajectories,
            workers,
            lambda_list,
        } => commands::cmd_density(
            &config,
            &out,
            &DensityArgs {
                cells,
                trajectories,
                workers,
                lambda_list,
            },
        ),
        Command::Hormander {
            config,
            points,
            grid,
            depth,
            out,
        } => {
            let source = match (points, grid) {
                (Some(p), _) => PointSource::File(p),
                (None, Some(g)) => g,
                (None, None) => PointSource::Config,
            };
            commands::cmd_hormander(&config, &source, depth, out.as_deref())
        }
        Command::Singularity {
            config,
            out,
            trajectories,
            workers,
        } => commands::cmd_singularity(&config, &out, trajectories, workers),
        Command::ExampleRotcontract(f) => commands::cmd_example(
            &ExampleArgs {
                q1: f.q1,
                q2: f.q2,
                lambda: f.lambda,
                trajectories: f.trajectories,
                horizon: f.horizon,
                step: f.step,
                cells: f.cells,
                seed: f.seed,
                workers: f.workers,
            },
            &f.out,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pdmp-lab: {e}");
            let code = e.exit_code();
            debug_assert!(code >= EXIT_CONFIG);
            ExitCode::from(code)
        }
    }
}
