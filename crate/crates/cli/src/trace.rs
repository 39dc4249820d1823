use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use serde::Serialize;
use tdvrp_core::policy::{DecodeMode, Policy, TraceStep};

use crate::solve::{load_policy, read_instance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Greedy,
    Sample,
}

#[derive(Args)]
pub struct TraceArgs {
    /// Policy file or training checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    instance: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "greedy")]
    mode: Mode,
    /// Sampling seed (sample mode).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Serialize)]
struct TraceFile {
    instance_digest: String,
    mode: DecodeMode,
    total_minutes: f64,
    log_probability: Option<f64>,
    steps: Vec<TraceStep>,
}

pub fn run(args: TraceArgs) -> Result<()> {
    let params = load_policy(&args.checkpoint)?;
    let (instance, fleet) = read_instance(&args.instance)?;
    let mode = match args.mode {
        Mode::Greedy => DecodeMode::Greedy,
        Mode::Sample => DecodeMode::Sample {
            seed: crate::seed_or_entropy(args.seed),
        },
    };
    let mut policy = Policy::new(&params, &instance, &fleet)?;
    let (solution, steps) = policy.trace(mode)?;
    let file = TraceFile {
        instance_digest: instance.digest(&fleet),
        mode,
        total_minutes: solution.total_minutes,
        log_probability: solution.log_probability,
        steps,
    };
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&args.out, serde_json::to_string_pretty(&file)? + "\n")
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!("{} steps, {:.2} minutes -> {}", file.steps.len(), file.total_minutes, args.out.display());
    Ok(())
}
