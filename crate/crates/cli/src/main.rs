use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use seqdistill_core::config::{load_config, load_config_with};
use seqdistill_core::pipeline;

/// Multi-teacher distillation for sequential recommenders.
#[derive(Parser)]
#[command(name = "seqdistill", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic multi-domain benchmark.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Generator seed; defaults to the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pre-train a teacher on the configured source domains and the target.
    PretrainTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export a teacher checkpoint as a score matrix over the target data.
    ExportTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill the configured teachers into a student.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dotted `key=value` settings that replace values from the file.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a student checkpoint on the configured split.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train one student per cell of the sweep grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, seed } => {
            for path in pipeline::gen_data(&load_config(config)?, seed)? {
                println!("{}", path.display());
            }
        }
        Command::PretrainTeacher { config, out } => {
            pipeline::pretrain_teacher_cmd(&load_config(config)?, &out)?;
        }
        Command::ExportTeacher { config, teacher, out } => {
            pipeline::export_teacher_cmd(&load_config(config)?, &teacher, &out)?;
        }
        Command::Train { config, out, overrides } => {
            let summary = pipeline::train_cmd(&load_config_with(config, &overrides)?, &out)?;
            print!("{}", summary.report.to_table());
        }
        Command::Evaluate { config, checkpoint } => {
            let report = pipeline::evaluate_cmd(&load_config(config)?, &checkpoint)?;
            println!("{}", report.to_json());
        }
        Command::Sweep { config, out } => {
            let rows = pipeline::sweep_cmd(&load_config(config)?, &out)?;
            println!("{} cells written to {}", rows.len(), out.join(pipeline::SWEEP_TSV).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}
