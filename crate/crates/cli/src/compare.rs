use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use rayon::prelude::*;
use tdvrp_core::oracle::DEFAULT_BUDGET;
use tdvrp_core::policy::DEFAULT_SAMPLES;

use crate::exit::usage;
use crate::solve::{read_instance, run_solver, SolverKind, SolverOptions};

pub const SCHEMA_LINE: &str = "schema=1";
pub const COLUMNS: [&str; 6] = ["instance", "solver", "objective", "gap_percent", "wall_seconds", "status"];

#[derive(Args)]
pub struct CompareArgs {
    /// Directory of instance JSON files (`manifest.json` is skipped).
    #[arg(long)]
    instances: PathBuf,
    /// Comma-separated solver list, e.g. `exact,aco,ga`.
    #[arg(long, value_delimiter = ',', required = true)]
    solvers: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Policy file or training checkpoint for the policy solvers.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Solver parameter overrides: a JSON object or a path to one (aco/ga).
    #[arg(long)]
    params: Option<String>,
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    k: usize,
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    budget: u64,
}

struct Row {
    instance: String,
    solver: &'static str,
    objective: Option<f64>,
    gap: Option<f64>,
    wall: Option<f64>,
    status: String,
}

pub fn run(args: CompareArgs) -> Result<()> {
    let solvers = args
        .solvers
        .iter()
        .map(|s| SolverKind::from_str(s.trim(), true).map_err(|_| usage(format!("unknown solver `{s}`"))))
        .collect::<Result<Vec<_>>>()?;
    if solvers.len() < 2 {
        return Err(usage("--solvers needs at least two solvers"));
    }
    if solvers.iter().any(|s| s.needs_policy()) && args.checkpoint.is_none() {
        return Err(usage("policy solvers need --checkpoint"));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(&args.instances)
        .with_context(|| format!("reading {}", args.instances.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "json") && p.file_name().is_some_and(|n| n != "manifest.json"));
    files.sort();
    if files.is_empty() {
        return Err(usage(format!("no instance files in {}", args.instances.display())));
    }
    let options = SolverOptions::load(args.params.as_deref(), args.checkpoint.as_deref(), args.k, args.budget)?;
    let seed = crate::seed_or_entropy(args.seed);

    let rows: Vec<Row> = files
        .par_iter()
        .map(|path| instance_rows(path, &solvers, &options, seed))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();

    let mut table = csv::WriterBuilder::new().from_writer(Vec::new());
    table.write_record(COLUMNS)?;
    for row in &rows {
        table.write_record([
            row.instance.clone(),
            row.solver.to_string(),
            fmt(row.objective),
            fmt(row.gap),
            fmt(row.wall),
            row.status.clone(),
        ])?;
    }
    for &solver in &solvers {
        let ok: Vec<&Row> = rows.iter().filter(|r| r.solver == solver.name() && r.objective.is_some()).collect();
        let total = rows.iter().filter(|r| r.solver == solver.name()).count();
        let mean = |f: fn(&Row) -> Option<f64>| {
            if ok.is_empty() {
                None
            } else {
                Some(ok.iter().map(|r| f(r).unwrap_or(0.0)).sum::<f64>() / ok.len() as f64)
            }
        };
        table.write_record([
            "MEAN".to_string(),
            solver.name().to_string(),
            fmt(mean(|r| r.objective)),
            fmt(mean(|r| r.gap)),
            fmt(mean(|r| r.wall)),
            format!("ok {}/{}", ok.len(), total),
        ])?;
    }
    let body = String::from_utf8(table.into_inner()?)?;
    let text = format!("{SCHEMA_LINE}\n{body}");
    print_table(&rows, &solvers);
    if let Some(path) = &args.out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn instance_rows(path: &PathBuf, solvers: &[SolverKind], options: &SolverOptions, seed: u64) -> Vec<Row> {
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let loaded = read_instance(path);
    let mut rows: Vec<Row> = solvers
        .iter()
        .map(|&solver| {
            let result = loaded
                .as_ref()
                .map_err(|e| anyhow::anyhow!("{e:#}"))
                .and_then(|(inst, fleet)| run_solver(solver, inst, fleet, options, seed));
            match result {
                Ok(report) => Row {
                    instance: name.clone(),
                    solver: solver.name(),
                    objective: Some(report.objective),
                    gap: None,
                    wall: Some(report.wall_seconds),
                    status: "ok".into(),
                },
                Err(e) => Row {
                    instance: name.clone(),
                    solver: solver.name(),
                    objective: None,
                    gap: None,
                    wall: None,
                    status: format!("error: {e:#}"),
                },
            }
        })
        .collect();
    let best = rows.iter().filter_map(|r| r.objective).fold(f64::INFINITY, f64::min);
    for row in &mut rows {
        row.gap = row.objective.map(|obj| if obj == best { 0.0 } else { (obj - best) / best * 100.0 });
    }
    rows
}

fn fmt(value: Option<f64>) -> String {
    value.map(|v| v.to_string()).unwrap_or_default()
}

fn print_table(rows: &[Row], solvers: &[SolverKind]) {
    println!("{:<20} {:<14} {:>12} {:>9} {:>10}  status", "instance", "solver", "objective", "gap %", "time s");
    for r in rows {
        println!(
            "{:<20} {:<14} {:>12} {:>9} {:>10}  {}",
            r.instance,
            r.solver,
            r.objective.map(|v| format!("{v:.2}")).unwrap_or_default(),
            r.gap.map(|v| format!("{v:.2}")).unwrap_or_default(),
            r.wall.map(|v| format!("{v:.3}")).unwrap_or_default(),
            r.status
        );
    }
    for s in solvers {
        let ok: Vec<&Row> = rows.iter().filter(|r| r.solver == s.name() && r.objective.is_some()).collect();
        if ok.is_empty() {
            continue;
        }
        let n = ok.len() as f64;
        println!(
            "{:<20} {:<14} {:>12.2} {:>9.2} {:>10.3}",
            "MEAN",
            s.name(),
            ok.iter().filter_map(|r| r.objective).sum::<f64>() / n,
            ok.iter().filter_map(|r| r.gap).sum::<f64>() / n,
            ok.iter().filter_map(|r| r.wall).sum::<f64>() / n
        );
    }
}
