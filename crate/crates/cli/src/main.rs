//! `resnet-lab`: train the finite or continuous-depth model, run the
//! verification sweeps, and inspect artifacts.
//!
//! Exit codes: 0 pass, 1 quantitative-verdict fail, 2 usage/config error,
//! 3 numeric abort.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{CommandContext, EXIT_CONFIG_ERROR, EXIT_NUMERIC_ABORT};
use config::RunConfig;
use resnet_lab_core::error::Error;

#[derive(Parser)]
#[command(name = "resnet-lab", version, about = "ResNet training-flow simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Parser, Debug)]
struct ConfigArgs {
    /// Declarative run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override for the top-level `seed` key.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the finite-grid gradient flow and save the final grid.
    TrainDiscrete(ConfigArgs),
    /// Integrate the particle-ensemble flow and save the final ensemble.
    TrainContinuum(ConfigArgs),
    /// Depth-consistency sweep: |E_L - E_ref| vs L with a log-log fit.
    SweepDepth(ConfigArgs),
    /// Width-concentration sweep: across-seed std of E vs M.
    SweepWidth(ConfigArgs),
    /// Long pseudo-time run on the interpolation task.
    ZeroLoss(ConfigArgs),
    /// Finite-difference oracles for both gradient routes.
    Gradcheck(ConfigArgs),
    /// Check a saved trace for E_s upticks.
    EnergyAudit {
        /// FlowTrace CSV to audit.
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 1e-10)]
        slack: f64,
    },
    /// Wasserstein-2 distance between two particle-cloud CSV files.
    W2 {
        file_a: PathBuf,
        file_b: PathBuf,
        /// Use the sliced estimate with this many projections.
        #[arg(long)]
        sliced: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("RESNET_LAB_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    let code = match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite { .. } => EXIT_NUMERIC_ABORT,
                _ => EXIT_CONFIG_ERROR,
            }
        }
    };
    ExitCode::from(code as u8)
}

fn run(command: Command) -> resnet_lab_core::Result<i32> {
    match command {
        Command::TrainDiscrete(args) => with_config(args, commands::train_discrete),
        Command::TrainContinuum(args) => with_config(args, commands::train_continuum),
        Command::SweepDepth(args) => with_config(args, commands::sweep_depth),
        Command::SweepWidth(args) => with_config(args, commands::sweep_width),
        Command::ZeroLoss(args) => with_config(args, commands::zero_loss),
        Command::Gradcheck(args) => with_config(args, commands::gradcheck),
        Command::EnergyAudit { trace, slack } => commands::energy_audit(&trace, slack),
        Command::W2 { file_a, file_b, sliced, seed } => commands::w2(&file_a, &file_b, sliced, seed),
    }
}

fn with_config(
    args: ConfigArgs,
    f: impl Fn(&CommandContext) -> resnet_lab_core::Result<i32>,
) -> resnet_lab_core::Result<i32> {
    let (mut cfg, bytes) = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out_dir = args
        .out
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| Error::contract("no output directory: pass --out or set out_dir"))?;
    std::fs::create_dir_all(&out_dir)?;
    f(&CommandContext { cfg: &cfg, config_bytes: &bytes, out_dir: &out_dir })
}
