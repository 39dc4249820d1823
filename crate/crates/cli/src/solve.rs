use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use clap::{Args, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};
use tdvrp_core::env::replay;
use tdvrp_core::instance::parse_instance;
use tdvrp_core::metaheuristics::{solve_aco, solve_ga, AcoParams, GaParams};
use tdvrp_core::oracle::{solve_exact, DEFAULT_BUDGET};
use tdvrp_core::policy::{load_params, rollout, sample_best, DecodeMode, PolicyParams, DEFAULT_SAMPLES};
use tdvrp_core::trainer::TrainState;
use tdvrp_core::{FleetConfig, Instance, SolverReport};

use crate::exit::{usage, Mismatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolverKind {
    Exact,
    Aco,
    Ga,
    PolicyGreedy,
    PolicySample,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Exact => "exact",
            SolverKind::Aco => "aco",
            SolverKind::Ga => "ga",
            SolverKind::PolicyGreedy => "policy-greedy",
            SolverKind::PolicySample => "policy-sample",
        }
    }

    pub fn needs_policy(self) -> bool {
        matches!(self, SolverKind::PolicyGreedy | SolverKind::PolicySample)
    }
}

#[derive(Args)]
pub struct SolveArgs {
    #[arg(long, value_enum)]
    solver: SolverKind,
    /// Instance JSON file.
    #[arg(long)]
    instance: PathBuf,
    /// Solver parameter overrides: a JSON object or a path to one.
    #[arg(long)]
    params: Option<String>,
    /// Policy file or training checkpoint (policy solvers only).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Samples for policy-sample.
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    k: usize,
    /// Node budget for the exact search.
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    budget: u64,
    /// Report JSON path; the solution goes next to it as `<stem>.solution.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Everything a solver run needs besides the instance.
pub struct SolverOptions {
    pub params: Option<Value>,
    pub policy: Option<PolicyParams>,
    pub k: usize,
    pub budget: u64,
}

impl SolverOptions {
    pub fn load(params: Option<&str>, checkpoint: Option<&Path>, k: usize, budget: u64) -> Result<Self> {
        let params = params.map(read_params).transpose()?;
        let policy = checkpoint.map(load_policy).transpose()?;
        Ok(Self { params, policy, k, budget })
    }
}

fn read_params(text: &str) -> Result<Value> {
    let raw = if text.trim_start().starts_with('{') {
        text.to_string()
    } else {
        fs::read_to_string(text).with_context(|| format!("reading {text}"))?
    };
    let value: Value = serde_json::from_str(&raw).map_err(|e| usage(format!("--params is not valid JSON: {e}")))?;
    if !value.is_object() {
        return Err(usage("--params must be a JSON object"));
    }
    Ok(value)
}

/// Accepts either a saved policy or a training checkpoint (its best parameters).
pub fn load_policy(path: &Path) -> Result<PolicyParams> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let doc: Value = serde_json::from_slice(&bytes)
        .map_err(|e| usage(format!("{} is not valid JSON: {e}", path.display())))?;
    let params = if doc.get("best").is_some() && doc.get("config").is_some() {
        TrainState::load(path)?.best
    } else {
        load_params(path)?
    };
    Ok(params)
}

pub fn read_instance(path: &Path) -> Result<(Instance, FleetConfig)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_instance(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Defaults for the instance size with the user's keys laid over them.
fn merged<P: Serialize + DeserializeOwned>(defaults: P, overrides: Option<&Value>) -> Result<P> {
    let mut value = serde_json::to_value(defaults)?;
    if let (Some(Value::Object(over)), Value::Object(base)) = (overrides, &mut value) {
        for (k, v) in over {
            base.insert(k.clone(), v.clone());
        }
    }
    serde_json::from_value(value).map_err(|e| usage(format!("bad solver parameters: {e}")))
}

/// Run one solver, then check its claimed cost against an env replay.
pub fn run_solver(
    kind: SolverKind,
    instance: &Instance,
    fleet: &FleetConfig,
    options: &SolverOptions,
    seed: u64,
) -> Result<SolverReport> {
    let policy = || {
        options
            .policy
            .as_ref()
            .ok_or_else(|| usage(format!("{} needs --checkpoint", kind.name())))
    };
    let report = match kind {
        SolverKind::Exact => {
            let start = Instant::now();
            let result = solve_exact(instance, fleet, options.budget)?;
            let wall = start.elapsed().as_secs_f64();
            let mut report = SolverReport::new(
                "exact",
                &json!({ "budget": options.budget }),
                instance,
                fleet,
                result.best_solution,
                wall,
                None,
            )
            .with_note("proven_optimal", result.proven_optimal)
            .with_note("nodes_expanded", result.nodes_expanded);
            if result.proven_optimal {
                report.gap = Some(0.0);
            }
            report
        }
        SolverKind::Aco => {
            let params: AcoParams = merged(AcoParams::for_size(instance.n()), options.params.as_ref())?;
            solve_aco(instance, fleet, &params, seed)?
        }
        SolverKind::Ga => {
            let params: GaParams = merged(GaParams::for_size(instance.n()), options.params.as_ref())?;
            solve_ga(instance, fleet, &params, seed)?
        }
        SolverKind::PolicyGreedy => {
            let params = policy()?;
            let start = Instant::now();
            let solution = rollout(instance, fleet, params, DecodeMode::Greedy)?;
            let wall = start.elapsed().as_secs_f64();
            SolverReport::new("policy-greedy", &params.dims, instance, fleet, solution, wall, None)
        }
        SolverKind::PolicySample => sample_best(instance, fleet, policy()?, options.k, seed)?,
    };
    verify(instance, fleet, &report)?;
    Ok(report)
}

fn verify(instance: &Instance, fleet: &FleetConfig, report: &SolverReport) -> Result<()> {
    let replayed = replay(instance, fleet, &report.solution.actions)
        .map_err(|e| anyhow!(Mismatch(format!("{} solution does not replay: {e}", report.solver))))?;
    if replayed.total_minutes != report.objective || replayed.total_minutes != report.solution.total_minutes {
        return Err(Mismatch(format!(
            "{} claims {} minutes, replay gives {}",
            report.solver, report.objective, replayed.total_minutes
        ))
        .into());
    }
    Ok(())
}

pub fn run(args: SolveArgs) -> Result<()> {
    if args.solver.needs_policy() && args.checkpoint.is_none() {
        return Err(usage(format!("{} needs --checkpoint", args.solver.name())));
    }
    let (instance, fleet) = read_instance(&args.instance)?;
    let options = SolverOptions::load(args.params.as_deref(), args.checkpoint.as_deref(), args.k, args.budget)?;
    let seed = match args.solver {
        SolverKind::Exact | SolverKind::PolicyGreedy => args.seed.unwrap_or(0),
        _ => crate::seed_or_entropy(args.seed),
    };
    let report = run_solver(args.solver, &instance, &fleet, &options, seed)?;
    println!(
        "{}: objective {:.3} min, wall {:.3} s",
        report.solver, report.objective, report.wall_seconds
    );
    for (key, value) in &report.notes {
        println!("  {key}: {value}");
    }
    match &args.out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(path, serde_json::to_string_pretty(&report)? + "\n")
                .with_context(|| format!("writing {}", path.display()))?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
            let solution_path = path.with_file_name(format!("{stem}.solution.json"));
            fs::write(&solution_path, report.solution.to_json() + "\n")
                .with_context(|| format!("writing {}", solution_path.display()))?;
        }
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}
