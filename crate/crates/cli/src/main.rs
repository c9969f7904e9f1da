use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rtsrk_cli::experiments::Experiment;
use rtsrk_cli::{replay, run, CliError, RunRequest, RunSummary};

#[derive(Parser)]
#[command(name = "rtsrk", version, about = "Probabilistic Runge-Kutta experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment: integrate, lorenz-fan, err-estimator, table-ms,
    /// table-weak, mc-mse, chemistry, kepler-invariant, pendulum-longtime,
    /// linear-posterior or infer-henon.
    Run {
        experiment: String,
        #[command(flatten)]
        opts: RunArgs,
    },
    /// List the experiments.
    List,
    /// Print an experiment's default configuration.
    ShowConfig { experiment: String },
    /// Repeat the run recorded in a manifest.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML file replacing the embedded default configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a key, e.g. `--set h=0.05` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory (default `out/<experiment>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fail (exit 3) on noise-flagged points, failed trajectories or stalled chains.
    #[arg(long)]
    strict: bool,
    /// Include the large-sample rows of the weak-order table.
    #[arg(long)]
    extended: bool,
}

fn report(summary: RunSummary) {
    eprintln!(
        "{} finished in {:.2}s; {} files in {}",
        summary.manifest.experiment,
        summary.manifest.wall_time_seconds,
        summary.manifest.outputs.len() + 1,
        summary.out.display()
    );
    for w in &summary.outcome.strict_violations {
        eprintln!("warning: {w}");
    }
}

fn main_inner(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { experiment, opts } => {
            let exp: Experiment = experiment.parse()?;
            let req = RunRequest {
                config_file: opts.config,
                overrides: opts.overrides,
                seed: opts.seed,
                threads: opts.threads,
                out: opts.out,
                strict: opts.strict,
                extended: opts.extended,
            };
            report(run(exp, &req)?);
        }
        Command::List => {
            for e in Experiment::ALL {
                println!("{:<18} {}", e.name(), e.about());
            }
        }
        Command::ShowConfig { experiment } => {
            let exp: Experiment = experiment.parse()?;
            print!("{}", exp.default_config());
        }
        Command::Replay { manifest, out } => report(replay(&manifest, out)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
