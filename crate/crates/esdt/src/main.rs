use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use esdt::config::Config;
use esdt::error::EsdtError;
use esdt::pipeline;

/// Elastic sparse diffusion transformer: training, distillation, slicing,
/// sampling and verification from one flat configuration.
#[derive(Parser)]
#[command(name = "esdt", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// key=value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration key (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Override the run seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory
    #[arg(long = "out-dir", global = true)]
    out_dir: Option<PathBuf>,

    /// Print the resolved configuration and exit
    #[arg(long = "dump-config", global = true)]
    dump_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Elastic supernetwork pretraining with periodic eval and checkpoints
    Train,
    /// Knowledge distillation against a teacher checkpoint or the analytic oracle
    DistillKd,
    /// K-DMD step distillation
    DistillStep,
    /// Materialize a width fraction into a standalone checkpoint
    Slice,
    /// Few-step sampling to raw latents plus PGM previews
    Sample,
    /// FLOP and latency reports
    Bench,
    /// Oracle-equivalence and gradient suites; nonzero exit on any failure
    OracleCheck,
}

fn run(cli: Cli) -> esdt::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::defaults(),
    };
    cfg.apply_overrides(&cli.set)?;
    if let Some(seed) = cli.seed {
        cfg.apply_overrides(&[format!("seed={seed}")])?;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.apply_overrides(&[format!("out_dir={}", dir.display())])?;
    }
    if cli.dump_config {
        print!("{}", cfg.dump());
        return Ok(());
    }
    match cli.command {
        Command::Train => pipeline::cmd_train(&cfg),
        Command::DistillKd => pipeline::cmd_distill_kd(&cfg),
        Command::DistillStep => pipeline::cmd_distill_step(&cfg),
        Command::Slice => pipeline::cmd_slice(&cfg),
        Command::Sample => pipeline::cmd_sample(&cfg),
        Command::Bench => pipeline::cmd_bench(&cfg),
        Command::OracleCheck => pipeline::cmd_oracle_check(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("esdt: {e}");
            match e {
                EsdtError::Config(_) => ExitCode::from(2),
                EsdtError::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}
