use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use tdvrp_core::policy::save_params;
use tdvrp_core::trainer::{TrainConfig, TrainLogRow, TrainState, Trainer};

use crate::exit::usage;

#[derive(Args)]
pub struct TrainArgs {
    /// TOML training config; omitted keys keep their defaults.
    #[arg(long, conflicts_with = "resume")]
    config: Option<PathBuf>,
    /// Output directory for checkpoint.json, policy.json and train_log.csv.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override the epoch limit.
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| usage(format!("{}: {}", path.display(), e.message())))
}

pub fn run(args: TrainArgs) -> Result<()> {
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut trainer = match &args.resume {
        Some(path) => {
            let mut state = TrainState::load(path).with_context(|| format!("loading {}", path.display()))?;
            if let Some(max) = args.max_epochs {
                state.config.max_epochs = max;
                state.finished = state.epoch >= max;
            }
            println!("resuming at epoch {} (iteration {}, lr {:.3e})", state.epoch, state.iteration, state.lr());
            Trainer::resume(state)?
        }
        None => {
            let mut config = match &args.config {
                Some(path) => read_config(path)?,
                None => TrainConfig::default(),
            };
            if let Some(max) = args.max_epochs {
                config.max_epochs = max;
            }
            config.seed = match args.seed {
                Some(seed) => seed,
                None if args.config.is_some() => config.seed,
                None => crate::seed_or_entropy(None),
            };
            Trainer::new(config)?
        }
    };

    let checkpoint = args.out.join("checkpoint.json");
    let log_path = args.out.join("train_log.csv");
    let result = trainer.run(|state| {
        let row = state.log.last().expect("an epoch was logged");
        println!(
            "epoch {:>4}  iter {:>6}  lr {:.3e}  sample {:.2}  greedy {:.2}  swap {}",
            row.epoch, row.iter, row.lr, row.mean_sample_cost, row.mean_greedy_cost, row.baseline_swapped
        );
        state.save(&checkpoint)?;
        write_log(&log_path, &state.log)?;
        Ok(())
    });
    trainer.state.save(&checkpoint)?;
    write_log(&log_path, &trainer.state.log)?;
    result?;
    save_params(&trainer.state.best, &args.out.join("policy.json"))?;
    println!(
        "done: {} epochs, {} rollouts, best validation {:.2}",
        trainer.state.epoch, trainer.state.rollouts, trainer.state.best_validation
    );
    Ok(())
}

fn write_log(path: &Path, rows: &[TrainLogRow]) -> std::io::Result<()> {
    let mut text = String::from(TrainLogRow::CSV_HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&row.to_csv());
        text.push('\n');
    }
    fs::write(path, text)
}
