use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ebll::harness::{cmd_analyze, cmd_compare, cmd_run, AnalysisKind};
use ebll::lifelong::Strategy;

/// Lifelong-learning laboratory: sequential task training with autoencoder
/// feature preservation, compared against the classical baselines.
#[derive(Parser)]
#[command(name = "ebll", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the run described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output root directory (overrides the config's out_dir).
        #[arg(long)]
        out: Option<String>,
        /// Seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the cross-product of strategies and seeds, then summarize.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated strategies (finetune, feature_extraction, lwf,
        /// ebll, ebll_separate_fcs, joint).
        #[arg(long, value_delimiter = ',', required = true)]
        strategies: Vec<Strategy>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<String>,
    },
    /// Produce a report from a finished run's checkpoints.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        /// One of: contractiveness, drift, bounds.
        #[arg(long)]
        which: String,
        #[arg(long)]
        out: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(cli: Cli) -> ebll::Result<()> {
    match cli.command {
        Command::Run { config, out, seed } => {
            let artifacts = cmd_run(&config, out.as_deref(), seed)?;
            println!("run {} complete", artifacts.run_id);
            println!("metrics: {}", artifacts.out_dir.join("metrics.csv").display());
            if let Some(eval) = artifacts.result.evals.last() {
                for te in &eval.per_task {
                    println!(
                        "  {}: accuracy {:.4}{}",
                        te.task,
                        te.accuracy,
                        te.forgetting
                            .map(|f| format!(" (forgetting {f:+.4})"))
                            .unwrap_or_default()
                    );
                }
            }
            Ok(())
        }
        Command::Compare {
            config,
            strategies,
            seeds,
            out,
        } => {
            let artifacts = cmd_compare(&config, &strategies, &seeds, out.as_deref())?;
            println!("summary: {}", artifacts.summary_path.display());
            print!("{}", artifacts.summary);
            Ok(())
        }
        Command::Analyze { config, which, out } => {
            let kind: AnalysisKind = which.parse()?;
            let path = cmd_analyze(&config, kind, out.as_deref())?;
            println!("report: {}", path.display());
            Ok(())
        }
    }
}
