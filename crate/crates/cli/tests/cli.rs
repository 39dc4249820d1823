use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn tdvrp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdvrp"))
        .args(args)
        .env("TDVRP_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tdvrp(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, size: usize, count: usize, intervals: usize, seed: u64) {
    ok(&[
        "gen",
        "--size",
        &size.to_string(),
        "--count",
        &count.to_string(),
        "--intervals",
        &intervals.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        path(dir),
    ]);
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

const TINY_CONFIG: &str = r#"
customers = 5
intervals = 3
batch_size = 4
instances_per_epoch = 8
eval_instances = 4
max_epochs = 2
seed = 3

[dims]
embed_dim = 8
heads = 2
layers = 1
intervals = 3
ff_hidden = 16
clip = 10.0
separate_interval_weights = false
"#;

fn trained_policy(dir: &Path) -> std::path::PathBuf {
    let config = dir.join("tiny.toml");
    fs::write(&config, TINY_CONFIG).unwrap();
    let out = dir.join("run");
    ok(&["train", "--config", path(&config), "--out", path(&out)]);
    out
}

#[test]
fn gen_writes_files_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), 20, 3, 10, 5);
    for i in 0..3 {
        assert!(dir.path().join(format!("instance_{i:04}.json")).exists());
    }
    let manifest = read_json(&dir.path().join("manifest.json"));
    let entries = manifest["instances"].as_array().unwrap();
    assert_eq!(entries.len(), 3);
    assert!(entries.iter().all(|e| e["seed"].is_u64()));
}

#[test]
fn gen_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    gen(a.path(), 7, 2, 3, 11);
    gen(b.path(), 7, 2, 3, 11);
    for name in ["instance_0000.json", "instance_0001.json", "manifest.json"] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap()
        );
    }
}

#[test]
fn gen_rejects_size_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = tdvrp(&["gen", "--size", "0", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(tdvrp(&["gen", "--sise", "3"]).status.code(), Some(2));
}

#[test]
fn omitted_seed_is_printed() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["gen", "--size", "3", "--intervals", "2", "--out", path(dir.path())]);
    let seed: u64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("seed: "))
        .expect("seed line")
        .parse()
        .unwrap();
    assert_eq!(read_json(&dir.path().join("manifest.json"))["seed"], seed);
}

#[test]
fn exact_solve_reports_proven_optimality() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), 5, 1, 3, 2);
    let report = dir.path().join("out/exact.json");
    ok(&[
        "solve",
        "--solver",
        "exact",
        "--instance",
        path(&dir.path().join("instance_0000.json")),
        "--out",
        path(&report),
    ]);
    let r = read_json(&report);
    assert_eq!(r["notes"]["proven_optimal"], true);
    assert_eq!(r["gap"], 0.0);
    let solution = read_json(&dir.path().join("out/exact.solution.json"));
    assert_eq!(solution["total_minutes"], r["objective"]);
}

#[test]
fn aco_defaults_follow_the_instance_size() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), 10, 1, 10, 4);
    let report = dir.path().join("aco.json");
    ok(&[
        "solve",
        "--solver",
        "aco",
        "--instance",
        path(&dir.path().join("instance_0000.json")),
        "--params",
        r#"{"ants": 4}"#,
        "--seed",
        "1",
        "--out",
        path(&report),
    ]);
    let r = read_json(&report);
    assert_eq!(r["params"]["iterations"], 1280);
    assert_eq!(r["params"]["ants"], 4);
}

#[test]
fn bad_solver_params_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), 4, 1, 3, 4);
    let out = tdvrp(&[
        "solve",
        "--solver",
        "ga",
        "--instance",
        path(&dir.path().join("instance_0000.json")),
        "--params",
        r#"{"colonies": 3}"#,
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colonies"));
}

#[test]
fn policy_solver_without_checkpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), 4, 1, 3, 4);
    let out = tdvrp(&[
        "solve",
        "--solver",
        "policy-greedy",
        "--instance",
        path(&dir.path().join("instance_0000.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn infeasible_instance_exits_with_its_own_code() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), 4, 1, 3, 4);
    let file = dir.path().join("instance_0000.json");
    let mut doc = read_json(&file);
    doc["nodes"][1]["demand"] = Value::from(1000);
    fs::write(&file, serde_json::to_string(&doc).unwrap()).unwrap();
    let out = tdvrp(&["solve", "--solver", "exact", "--instance", path(&file)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

fn parse_csv(text: &str) -> Vec<Vec<String>> {
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("schema=1"));
    let rest: String = lines.map(|l| format!("{l}\n")).collect();
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(rest.as_bytes());
    assert_eq!(
        reader.headers().unwrap().iter().collect::<Vec<_>>(),
        ["instance", "solver", "objective", "gap_percent", "wall_seconds", "status"]
    );
    reader
        .records()
        .map(|r| r.unwrap().iter().map(str::to_string).collect())
        .collect()
}

#[test]
fn compare_gaps_are_relative_to_the_per_instance_best() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), 5, 3, 3, 21);
    let csv_path = dir.path().join("cmp.csv");
    ok(&[
        "compare",
        "--instances",
        path(dir.path()),
        "--solvers",
        "exact,aco",
        "--params",
        r#"{"ants": 2, "iterations": 2}"#,
        "--seed",
        "3",
        "--out",
        path(&csv_path),
    ]);
    let rows = parse_csv(&fs::read_to_string(&csv_path).unwrap());
    let data: Vec<&Vec<String>> = rows.iter().filter(|r| r[0] != "MEAN").collect();
    assert_eq!(data.len(), 6);
    assert_eq!(
        data.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(),
        ["instance_0000", "instance_0000", "instance_0001", "instance_0001", "instance_0002", "instance_0002"]
    );
    for r in data.iter().filter(|r| r[1] == "exact") {
        assert_eq!(r[3].parse::<f64>().unwrap(), 0.0);
    }
    for solver in ["exact", "aco"] {
        let gaps: Vec<f64> = data
            .iter()
            .filter(|r| r[1] == solver)
            .map(|r| r[3].parse().unwrap())
            .collect();
        let mean_row = rows.iter().find(|r| r[0] == "MEAN" && r[1] == solver).unwrap();
        let reported: f64 = mean_row[3].parse().unwrap();
        assert!((reported - gaps.iter().sum::<f64>() / gaps.len() as f64).abs() <= 1e-9);
        assert!(gaps.iter().all(|&g| g >= 0.0));
    }
}

#[test]
fn compare_ties_give_zero_gaps() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), 4, 1, 3, 8);
    let csv_path = dir.path().join("cmp.csv");
    ok(&[
        "compare",
        "--instances",
        path(dir.path()),
        "--solvers",
        "exact,exact",
        "--seed",
        "1",
        "--out",
        path(&csv_path),
    ]);
    let rows = parse_csv(&fs::read_to_string(&csv_path).unwrap());
    assert!(rows.iter().all(|r| r[3].parse::<f64>().unwrap() == 0.0));
}

#[test]
fn compare_records_solver_failures_per_row() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), 4, 2, 3, 8);
    fs::write(dir.path().join("instance_0001.json"), "{ \"meta\": ").unwrap();
    let csv_path = dir.path().join("cmp.csv");
    ok(&[
        "compare",
        "--instances",
        path(dir.path()),
        "--solvers",
        "exact,ga",
        "--params",
        r#"{"population": 8, "generations": 2}"#,
        "--seed",
        "1",
        "--out",
        path(&csv_path),
    ]);
    let rows = parse_csv(&fs::read_to_string(&csv_path).unwrap());
    let broken: Vec<_> = rows.iter().filter(|r| r[0] == "instance_0001").collect();
    assert_eq!(broken.len(), 2);
    assert!(broken.iter().all(|r| r[5].starts_with("error")));
    let mean = rows.iter().find(|r| r[0] == "MEAN" && r[1] == "exact").unwrap();
    assert_eq!(mean[5], "ok 1/2");
}

#[test]
fn compare_needs_two_solvers() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), 4, 1, 3, 8);
    let out = tdvrp(&["compare", "--instances", path(dir.path()), "--solvers", "exact"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_writes_checkpoint_policy_and_log_then_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let run = trained_policy(dir.path());
    for f in ["checkpoint.json", "policy.json", "train_log.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let before = read_json(&run.join("checkpoint.json"));
    let iteration = before["iteration"].as_u64().unwrap();
    ok(&[
        "train",
        "--resume",
        path(&run.join("checkpoint.json")),
        "--max-epochs",
        "3",
        "--out",
        path(&run),
    ]);
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    let last: Vec<&str> = log.lines().last().unwrap().split(',').collect();
    assert_eq!(last[0], "2");
    let iter: u64 = last[1].parse().unwrap();
    let lr: f64 = last[2].parse().unwrap();
    assert_eq!(iter, iteration + 2);
    assert!((lr - 1e-3 * 0.999f64.powi(iter as i32)).abs() < 1e-12);
}

#[test]
fn bad_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "batch_size = 4\nlearning_rate = 0.1\n").unwrap();
    let out = tdvrp(&["train", "--config", path(&config), "--out", path(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn policy_solvers_and_trace_export() {
    let dir = tempfile::tempdir().unwrap();
    let run = trained_policy(dir.path());
    let inst_dir = dir.path().join("inst");
    gen(&inst_dir, 5, 1, 3, 9);
    let instance = inst_dir.join("instance_0000.json");

    let report = dir.path().join("sample.json");
    ok(&[
        "solve",
        "--solver",
        "policy-sample",
        "--k",
        "1280",
        "--checkpoint",
        path(&run.join("policy.json")),
        "--instance",
        path(&instance),
        "--seed",
        "4",
        "--out",
        path(&report),
    ]);
    assert_eq!(read_json(&report)["notes"]["k"], 1280);
    ok(&[
        "solve",
        "--solver",
        "policy-greedy",
        "--checkpoint",
        path(&run.join("checkpoint.json")),
        "--instance",
        path(&instance),
    ]);

    let trace = dir.path().join("trace.json");
    ok(&[
        "export-trace",
        "--checkpoint",
        path(&run.join("policy.json")),
        "--instance",
        path(&instance),
        "--mode",
        "sample",
        "--seed",
        "2",
        "--out",
        path(&trace),
    ]);
    let doc = read_json(&trace);
    let steps = doc["steps"].as_array().unwrap();
    assert!(!steps.is_empty());
    for s in steps {
        for key in ["vehicle_probabilities", "node_probabilities"] {
            let p: Vec<f64> = s[key].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let probs: Vec<f64> = s["node_probabilities"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_f64().unwrap())
            .collect();
        let top: Vec<(usize, f64)> = serde_json::from_value(s["top_nodes"].clone()).unwrap();
        assert_eq!(top.len(), 5.min(probs.len()));
        let mut sorted = probs.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for (i, (node, p)) in top.iter().enumerate() {
            assert_eq!(probs[*node], *p);
            assert_eq!(*p, sorted[i]);
        }
        let open = probs.iter().filter(|&&p| p > 0.0).count();
        if open >= 5 {
            assert!(top.iter().all(|t| t.1 > 0.0));
        }
        assert!(s["depart_minute"].is_number() && s["interval"].is_u64());
    }
}

#[test]
fn trace_rejects_interval_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let run = trained_policy(dir.path());
    let inst_dir = dir.path().join("inst");
    gen(&inst_dir, 5, 1, 2, 9);
    let out = tdvrp(&[
        "export-trace",
        "--checkpoint",
        path(&run.join("policy.json")),
        "--instance",
        path(&inst_dir.join("instance_0000.json")),
        "--out",
        path(&dir.path().join("t.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("interval"));
}
