//! `lc`: data generation, training, cascade inference, rho sweeps,
//! difficulty statistics, kernel benchmarks, and gradient checks.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, configs, files),
//! 2 internal invariant violation.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use lc_core::ExecMode;

#[derive(Parser)]
#[command(
    name = "lc",
    about = "Layer-cascade semantic segmentation engine",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Seed override for model init, data generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Bit-exact mode: fixed accumulation order, single-threaded kernels,
    /// timings reported as zero.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Worker threads for fast mode (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/val dataset on disk.
    GenData(commands::gen_data::Args),
    /// Train a model (initial + cascade phases, or a baseline).
    Train(commands::train::Args),
    /// Run cascade inference on images.
    Infer(commands::infer::Args),
    /// Sweep the confidence threshold and report exits, mIoU, flops, time.
    SweepRho(commands::sweep_rho::Args),
    /// Difficulty partition and stage-distribution statistics.
    Stats(commands::stats::Args),
    /// Dense vs region convolution kernel benchmark.
    Bench(commands::bench::Args),
    /// Finite-difference checks of every backward op.
    GradCheck(commands::grad_check::Args),
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };

    if cli.threads > 0 && !cli.deterministic {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    let mode = if cli.deterministic {
        ExecMode::Deterministic
    } else {
        ExecMode::Fast
    };
    let ctx = commands::Ctx {
        mode,
        seed: cli.seed,
        deterministic: cli.deterministic,
    };

    let result = match cli.command {
        Command::GenData(args) => commands::gen_data::run(args, &ctx),
        Command::Train(args) => commands::train::run(args, &ctx),
        Command::Infer(args) => commands::infer::run(args, &ctx),
        Command::SweepRho(args) => commands::sweep_rho::run(args, &ctx),
        Command::Stats(args) => commands::stats::run(args, &ctx),
        Command::Bench(args) => commands::bench::run(args, &ctx),
        Command::GradCheck(args) => commands::grad_check::run(args, &ctx),
    };

    match result {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
