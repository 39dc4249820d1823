//! `tdvrp`: instance generation, solving, comparison, training and trace export.

mod compare;
mod exit;
mod gen;
mod solve;
mod trace;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "tdvrp", version, about = "Multi-trip time-dependent vehicle routing workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic instances plus a manifest.
    Gen(gen::GenArgs),
    /// Run one solver on one instance and verify its cost by replay.
    Solve(solve::SolveArgs),
    /// Run several solvers over a directory of instances.
    Compare(compare::CompareArgs),
    /// Train the attention policy.
    Train(train::TrainArgs),
    /// Record per-step decoding distributions for plotting.
    ExportTrace(trace::TraceArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(exit::USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(exit::USAGE);
    }
    let result = match cli.command {
        Command::Gen(args) => gen::run(args),
        Command::Solve(args) => solve::run(args),
        Command::Compare(args) => compare::run(args),
        Command::Train(args) => train::run(args),
        Command::ExportTrace(args) => trace::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code(&e))
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var("TDVRP_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .parse()
        .map_err(|_| exit::usage(format!("TDVRP_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    Ok(())
}

/// The given seed, or a fresh one that is announced so the run can be repeated.
pub(crate) fn seed_or_entropy(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let seed = rand::random();
        println!("seed: {seed}");
        seed
    })
}
