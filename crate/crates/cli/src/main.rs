use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rcdgcn_cli::{exit_code, RunConfig, CHECKPOINT_FILE};

/// Traffic speed forecasting with capacity-driven graph attention.
#[derive(Parser)]
#[command(name = "rcdgcn", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Run configuration (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Checkpoint to write (train) or read; repeat to evaluate several.
    #[arg(long, global = true)]
    checkpoint: Vec<PathBuf>,
    /// Output directory; overrides `run.out` (and `data.dir` for simulate).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Generate a synthetic dataset.
    Simulate,
    /// Train the configured model.
    Train,
    /// Report test-split metrics for one or more checkpoints.
    Evaluate,
    /// Weight norms, significant links and incident case studies.
    Analyze,
    /// Forecast the steps following the dataset.
    Predict,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
        if matches!(cli.cmd, Cmd::Simulate) {
            cfg.data_dir = out.clone();
        }
    }
    let default_ck = cfg.out.join(CHECKPOINT_FILE);
    let first_ck = cli.checkpoint.first().cloned().unwrap_or(default_ck.clone());
    let mut stdout = std::io::stdout().lock();
    match cli.cmd {
        Cmd::Simulate => {
            rcdgcn_cli::cmd_simulate(&cfg, &mut stdout)?;
        }
        Cmd::Train => {
            rcdgcn_cli::cmd_train(&cfg, &first_ck, &mut stdout)?;
        }
        Cmd::Evaluate => {
            let cks = if cli.checkpoint.is_empty() { vec![default_ck] } else { cli.checkpoint.clone() };
            rcdgcn_cli::cmd_evaluate(&cfg, &cks, &mut stdout)?;
        }
        Cmd::Analyze => {
            rcdgcn_cli::cmd_analyze(&cfg, &first_ck, &mut stdout)?;
        }
        Cmd::Predict => {
            rcdgcn_cli::cmd_predict(&cfg, &first_ck, &mut stdout)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { rcdgcn_cli::EXIT_INPUT as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
