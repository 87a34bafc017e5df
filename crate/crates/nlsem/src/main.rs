use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nlsem::cli::{self, ScenarioConfig};

#[derive(Parser)]
#[command(
    name = "nlsem",
    about = "Nonlinear expectations of path functionals under drift/volatility uncertainty",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario from a JSON config and write results + artifacts.
    Run {
        config: PathBuf,
        /// Output directory (overrides the config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Monte Carlo path count override.
        #[arg(long)]
        paths: Option<usize>,
        /// Time step count override.
        #[arg(long)]
        steps: Option<usize>,
        /// Dump simulated trajectories as CSV.
        #[arg(long)]
        dump_paths: bool,
    },
    /// List the scenario registry.
    List,
    /// Describe one scenario and the structural fact it probes.
    Describe { id: String },
}

fn main() -> ExitCode {
    // NLSEM_THREADS caps the worker pool; results do not depend on it
    if let Ok(threads) = std::env::var("NLSEM_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
    let cli = Cli::parse();
    match run_command(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn run_command(command: Command) -> Result<ExitCode, cli::CliError> {
    match command {
        Command::List => {
            print!("{}", cli::list());
            Ok(ExitCode::SUCCESS)
        }
        Command::Describe { id } => {
            print!("{}", cli::describe(&id)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { config, out, seed, paths, steps, dump_paths } => {
            let mut cfg = ScenarioConfig::from_file(&config)?;
            if let Some(out) = out {
                cfg.out_dir = Some(out);
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(paths) = paths {
                cfg.paths = paths;
            }
            if let Some(steps) = steps {
                cfg.grid.n_steps = steps;
            }
            cfg.dump_paths |= dump_paths;
            cfg.validate()?;
            let record = cli::run(&cfg)?;
            for c in record.all_criteria() {
                let status = if c.pass { "PASS" } else { "FAIL" };
                println!(
                    "[{status}] {}: {:.6} {} {:.6} ({})",
                    c.name, c.value, c.direction, c.threshold, c.detail
                );
            }
            if record.pass {
                let total = record.criteria.len() + record.timing_criteria.len();
                println!("{}: all {total} criteria passed", record.scenario);
                Ok(ExitCode::SUCCESS)
            } else {
                println!("{}: criteria failed", record.scenario);
                Ok(ExitCode::from(1))
            }
        }
    }
}
