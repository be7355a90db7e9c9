//! `den-lab`: config-driven lifelong-learning experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use den_core::experiment::{self, ExperimentConfig, RunError, RunOptions};

#[derive(Parser)]
#[command(
    name = "den-lab",
    about = "Lifelong-learning experiments: dynamically expandable networks vs baseline continual learners",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a default experiment config with explicit values for every knob.
    Init {
        /// Destination path for the config file.
        #[arg(long, default_value = "den-lab-config.json")]
        out: PathBuf,
        /// Overwrite an existing file.
        #[arg(long)]
        force: bool,
    },
    /// Run every configured learner through the task sequence and write
    /// metrics.csv, summary.json, tasks.csv and checkpoints.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a checkpoint after every stage.
        #[arg(long)]
        checkpoints: bool,
        /// Suppress per-stage progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Print the AUROC of a checkpointed network on one task's CSV rows.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset CSV (header `task_id,split,y,x0..`).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        task: u32,
    },
    /// Summarize a checkpoint: widths, unit timestamps, split lineage,
    /// sparsity, capacity.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn run_command(cmd: Command) -> Result<(), RunError> {
    match cmd {
        Command::Init { out, force } => {
            if out.exists() && !force {
                return Err(RunError::Config(format!(
                    "{} already exists (use --force to overwrite)",
                    out.display()
                )));
            }
            let cfg = experiment::default_config();
            std::fs::write(&out, cfg.to_json_pretty() + "\n")?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Run {
            config,
            seed,
            out,
            checkpoints,
            quiet,
        } => {
            let text = std::fs::read_to_string(&config).map_err(|e| {
                RunError::Config(format!("cannot read {}: {e}", config.display()))
            })?;
            let cfg = ExperimentConfig::from_json(&text)?;
            let opts = RunOptions {
                seed_override: seed,
                out_override: out,
                stage_checkpoints: checkpoints,
                no_artifacts: false,
                verbose: !quiet,
            };
            let output = experiment::run(&cfg, &opts)?;
            for (name, s) in &output.summaries {
                println!(
                    "{name}: avg_auroc {:.4}, capacity {} ({:.3} of single-task-at-T)",
                    s.avg_auroc, s.final_capacity, s.rel_capacity
                );
            }
            println!("artifacts in {}", output.output_dir.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            task,
        } => {
            let auroc = experiment::eval_checkpoint(&checkpoint, &data, task)?;
            println!("{auroc:.6}");
            Ok(())
        }
        Command::Inspect { checkpoint } => {
            print!("{}", experiment::inspect(&checkpoint)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run_command(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
