use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sfada::config::ExperimentConfig;
use sfada::experiment::{self, EvalSplit};
use sfada::Error;

/// Source-free active domain adaptation experiments.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source network and save its checkpoint.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Adapt a source checkpoint to the target domain.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        source_ckpt: PathBuf,
    },
    /// Run the configured ablation grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a network checkpoint on a held-out split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "target")]
        split: EvalSplit,
    },
}

fn print_per_class(per_class: &[Option<f64>]) {
    for (k, acc) in per_class.iter().enumerate() {
        if let Some(a) = acc {
            println!("  class {k}: {a:.2}%");
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Pretrain { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = experiment::pretrain(&cfg)?;
            println!("source test accuracy: {:.2}%", out.source_test.accuracy);
            println!("checkpoint: {}", out.checkpoint.display());
        }
        Command::Adapt { config, source_ckpt } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = experiment::adapt(&cfg, &source_ckpt)?;
            for r in &out.report.rounds {
                println!("round {}: budget {} accuracy {:.2}%", r.round, r.cumulative_budget, r.eval.accuracy);
            }
            println!("report: {}", out.rounds_csv.display());
            println!("checkpoint: {}", out.target_checkpoint.display());
        }
        Command::Ablate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = experiment::ablate(&cfg)?;
            for s in out.table.summary() {
                match (s.mean_accuracy, s.std_accuracy) {
                    (Some(m), Some(sd)) => println!("{}: {m:.2} +- {sd:.2} ({} seeds)", s.experiment_id, s.seeds),
                    _ => println!("{}: all {} seeds failed", s.experiment_id, s.seeds),
                }
            }
            for d in out.table.deltas() {
                println!("budget {}: full - transferability_only = {:+.2}", d.budget, d.delta);
            }
            println!("results: {}", out.rows_csv.display());
        }
        Command::Eval { ckpt, config, split } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (metrics, path) = experiment::eval(&cfg, &ckpt, split)?;
            println!("accuracy: {:.2}%", metrics.accuracy);
            print_per_class(&metrics.per_class);
            println!("report: {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
