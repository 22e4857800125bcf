use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pcgd_core::experiment::config::ExperimentConfig;
use pcgd_core::experiment::plotdata::emit_plot_data;
use pcgd_core::experiment::presets::{preset, preset_names};
use pcgd_core::experiment::runner::OUTPUT_ROOT_ENV;
use pcgd_core::experiment::sweep::run_analysis_sweep;
use pcgd_core::experiment::tournament::run_tournament;
use pcgd_core::experiment::{parse_config, run_experiment, RunOptions};
use pcgd_core::Result;

/// Competitive-optimization experiments: benchmark runs, convergence
/// sweeps, multi-agent training, tournaments and plot data.
#[derive(Parser, Debug)]
#[command(name = "pcgd", version, after_help = format!(
    "Relative output directories resolve against ${OUTPUT_ROOT_ENV} (default: the working directory)."
))]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Config file, or `preset:<name>` for a bundled config.
    config: String,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for sampling, sweeps and tournaments.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        match self.config.strip_prefix("preset:") {
            Some(name) => preset(name),
            None => parse_config(&PathBuf::from(&self.config)),
        }
    }

    fn options(&self, resume: Option<PathBuf>) -> RunOptions {
        RunOptions {
            seed: self.seed,
            out: self.out.clone(),
            workers: self.workers,
            resume,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a benchmark game or in a multi-agent environment.
    Run {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Classify local convergence over a family of random games.
    Analyze {
        #[command(flatten)]
        common: Common,
    },
    /// Play trained populations against each other.
    Tournament {
        #[command(flatten)]
        common: Common,
    },
    /// Merge metric files into a long-format plotting table.
    Plotdata {
        #[command(flatten)]
        common: Common,
    },
    /// List the bundled configurations.
    Presets,
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { common, resume } => {
            let s = run_experiment(&common.load()?, &common.options(resume))?;
            println!(
                "{} steps, final |theta| = {:e}, metrics: {}, checkpoint: {}",
                s.steps,
                s.final_theta_norm,
                s.metrics_path.display(),
                s.checkpoint_path.display()
            );
            if let Some(reason) = s.halted {
                println!("halted early: {reason}");
            }
        }
        Command::Analyze { common } => {
            let s = run_analysis_sweep(&common.load()?, &common.options(None))?;
            let converged = s.rows.iter().filter(|r| r.verdict.converges_locally).count();
            println!("{converged}/{} rows converge locally, written to {}", s.rows.len(), s.path.display());
        }
        Command::Tournament { common } => {
            let r = run_tournament(&common.load()?, &common.options(None))?;
            for row in &r.rows {
                println!(
                    "{} focal seats: {} ({} seats) won {:.1} ({:.1}%)",
                    row.focal_seats,
                    row.population,
                    row.seats,
                    row.wins,
                    100.0 * row.win_rate()
                );
            }
            if let Some(p) = r.path {
                println!("written to {}", p.display());
            }
        }
        Command::Plotdata { common } => {
            let p = emit_plot_data(&common.load()?, &common.options(None))?;
            println!("written to {}", p.display());
        }
        Command::Presets => {
            for name in preset_names() {
                println!("{name}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
