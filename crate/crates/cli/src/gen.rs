use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;
use tdvrp_core::instance::{generate, write_instance};
use tdvrp_core::{FleetPreset, GeneratorConfig};

use crate::exit::usage;

#[derive(Args)]
pub struct GenArgs {
    /// Number of customers.
    #[arg(long)]
    size: usize,
    /// Fleet preset: 10, 20, 50, 100, custom or custom:f=<vehicles>,Q=<capacity>.
    /// Defaults to the preset matching --size, else the two-vehicle desk fleet.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Number of time intervals over the working day.
    #[arg(long, default_value_t = 10)]
    intervals: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct Manifest {
    size: usize,
    preset: FleetPreset,
    intervals: usize,
    seed: u64,
    instances: Vec<ManifestEntry>,
}

#[derive(Serialize)]
struct ManifestEntry {
    file: String,
    seed: u64,
    digest: String,
}

pub fn run(args: GenArgs) -> Result<()> {
    if args.size == 0 {
        return Err(usage("--size must be at least 1"));
    }
    if args.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let preset = match &args.preset {
        Some(p) => p.parse::<FleetPreset>()?,
        None => FleetPreset::for_size(args.size).unwrap_or(FleetPreset::DESK),
    };
    let seed = crate::seed_or_entropy(args.seed);
    let config = GeneratorConfig::new(args.size, preset).with_intervals(args.intervals);
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let mut instances = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let instance_seed = seed.wrapping_add(i as u64);
        let (instance, fleet) = generate(&config, instance_seed)?;
        let file = format!("instance_{i:04}.json");
        let path = args.out.join(&file);
        fs::write(&path, write_instance(&instance, &fleet)).with_context(|| format!("writing {}", path.display()))?;
        instances.push(ManifestEntry {
            file,
            seed: instance_seed,
            digest: instance.digest(&fleet),
        });
    }
    let manifest = Manifest {
        size: args.size,
        preset,
        intervals: args.intervals,
        seed,
        instances,
    };
    let path = args.out.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {} instances to {}", args.count, args.out.display());
    Ok(())
}
