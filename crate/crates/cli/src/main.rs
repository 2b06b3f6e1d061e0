use clap::{Parser, Subcommand};
use paewc::experiment::report::{cmd_report, ReportFormat};
use paewc::experiment::run::cmd_run;
use paewc::experiment::selftest::{run_selftest, INJECT_ENV};
use paewc::experiment::{cmd_gen_tasks, CommandError, ExperimentConfig};
use std::path::PathBuf;
use std::process::ExitCode;

/// Prompt-aware adaptive EWC experiments on a toy segmentation network.
#[derive(Parser)]
#[command(name = "paewc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell of an experiment grid.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads; defaults to the available parallelism.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Summarise completed runs into CSV or JSON tables.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long, default_value = "csv")]
        format: ReportFormat,
    },
    /// Run gradient checks, metric oracles and invariants.
    Check {
        #[arg(long)]
        json: bool,
    },
    /// Write the synthetic task suite to disk.
    GenTasks {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 43)]
        seed: u64,
    },
}

fn execute(command: Command) -> Result<(), CommandError> {
    match command {
        Command::Run { config, jobs } => {
            let cfg = ExperimentConfig::load(&config)?;
            let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let summary = cmd_run(&cfg, jobs)?;
            println!(
                "{} run(s) executed, {} skipped; output in {}",
                summary.executed.len(),
                summary.skipped.len(),
                summary.output.display()
            );
        }
        Command::Report { runs, format } => {
            let (_, files) = cmd_report(&runs, format)?;
            for f in files {
                println!("{}", f.display());
            }
        }
        Command::Check { json } => {
            let inject = std::env::var(INJECT_ENV).ok().filter(|s| !s.is_empty());
            let report = run_selftest(inject.as_deref());
            if json {
                println!("{}", serde_json::to_string_pretty(&report).map_err(paewc::Error::from)?);
            } else {
                print!("{}", report.render_text());
            }
            if report.failures() > 0 {
                return Err(CommandError::ChecksFailed(report.failed_names()));
            }
        }
        Command::GenTasks { out, seed } => {
            for dir in cmd_gen_tasks(&out, seed)? {
                println!("{}", dir.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
