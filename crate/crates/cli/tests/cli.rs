use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dynamo_core::dataset::{DatasetFormat, OfflineDataset};
use serde_json::Value;

fn dynamo(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynamo"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DYNAMO_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const FAST: [&str; 10] = ["--n", "120", "--max-iterations", "2", "--b", "8", "--k", "8", "--jobs", "2"];

#[test]
fn gen_data_applies_ceiling() {
    let dir = tempfile::tempdir().unwrap();
    let o = dynamo(&["gen-data", "--task", "branin", "--n", "800", "--ceiling", "0.9", "--out", "d.csv"], dir.path());
    ok(&o);
    let ds = OfflineDataset::load(&dir.path().join("d.csv"), DatasetFormat::Csv).unwrap();
    assert_eq!(ds.len(), 720);
    assert_eq!(ds.dim(), 2);
    assert!(String::from_utf8_lossy(&o.stdout).contains("n = 720"));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(dynamo(&["gen-data", "--n", "10"], dir.path()).status.code(), Some(2));
    assert_eq!(dynamo(&["gen-data", "--task", "nope"], dir.path()).status.code(), Some(2));
    assert_eq!(dynamo(&["run", "--task", "nope"], dir.path()).status.code(), Some(2));
    assert_eq!(dynamo(&["run", "--seeds", "9..1"], dir.path()).status.code(), Some(2));
    assert_eq!(dynamo(&["run", "--beta", "-1", "--out", "r"], dir.path()).status.code(), Some(2));
}

#[test]
fn gen_data_is_deterministic_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.csv", "b.csv"] {
        ok(&dynamo(&["gen-data", "--task", "seq-toy", "--n", "64", "--seed", "3", "--out", name], dir.path()));
    }
    let a = fs::read_to_string(dir.path().join("a.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(dir.path().join("b.csv")).unwrap());
    let ds = OfflineDataset::from_csv_str(&a).unwrap();
    assert_eq!(ds.to_csv_string(), a);
}

#[test]
fn ten_seeds_give_ten_results_and_one_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["run", "--task", "branin", "--baseline", "--seeds", "0..9", "--out", "res"];
    args.extend(FAST);
    ok(&dynamo(&args, dir.path()));
    let cell = dir.path().join("res/branin/cma-es");
    let jsons = fs::read_dir(&cell)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "json"))
        .count();
    assert_eq!(jsons, 10);
    let agg = fs::read_to_string(dir.path().join("res/aggregate.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(agg.as_bytes());
    let best: Vec<csv::StringRecord> = rdr
        .records()
        .map(|r| r.unwrap())
        .filter(|r| &r[2] == "best_at_k")
        .collect();
    assert_eq!(best.len(), 1);
    assert_eq!(&best[0][7], "10");

    // The aggregate mean and interval follow from the per-seed files.
    let vals: Vec<f64> = (0..10)
        .map(|s| json(&cell.join(format!("seed-{s}.json")))["metrics"]["best_at_k"].as_f64().unwrap())
        .collect();
    let mean = vals.iter().sum::<f64>() / 10.0;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0).sqrt();
    let got_mean: f64 = best[0][3].parse().unwrap();
    let got_hw: f64 = best[0][4].parse().unwrap();
    assert!((got_mean - mean).abs() < 1e-12);
    assert!((got_hw - 1.96 * sd / 10f64.sqrt()).abs() < 1e-12);
}

#[test]
fn zero_beta_matches_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = vec!["run", "--task", "gaussian-modes", "--beta", "0", "--seeds", "4", "--out", "zero"];
    a.extend(FAST);
    ok(&dynamo(&a, dir.path()));
    let mut b = vec!["run", "--task", "gaussian-modes", "--baseline", "--seeds", "4", "--out", "base"];
    b.extend(FAST);
    ok(&dynamo(&b, dir.path()));
    let x = json(&dir.path().join("zero/gaussian-modes/cma-es/seed-4.json"));
    let y = json(&dir.path().join("base/gaussian-modes/cma-es/seed-4.json"));
    assert_eq!(x["metrics"]["best_at_k"], y["metrics"]["best_at_k"]);
    assert_eq!(x["candidates"], y["candidates"]);
}

#[test]
fn repeated_runs_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["r1", "r2"] {
        let mut a = vec!["run", "--task", "branin", "--dynamo", "--seeds", "2", "--out", out];
        a.extend(FAST);
        ok(&dynamo(&a, dir.path()));
    }
    let x = json(&dir.path().join("r1/branin/dynamo-cma-es/seed-2.json"));
    let y = json(&dir.path().join("r2/branin/dynamo-cma-es/seed-2.json"));
    assert_eq!(x["candidates"], y["candidates"]);
    assert_eq!(x["log"], y["log"]);
    assert_eq!(x["config"]["seed"], 2);
    assert_eq!(x["config"]["batch_size"], 8);
}

#[test]
fn config_file_with_sweep() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("exp.toml"),
        r#"
task = "gaussian-modes"
optimizer = "adam"
batch_size = 8
k = 8
max_iterations = 2

[data]
n = 100

[experiment]
seeds = "0..1"
beta = [0.5, 2.0]
tie_tau = true
variants = ["dynamo"]
"#,
    )
    .unwrap();
    ok(&dynamo(&["run", "--config", "exp.toml", "--out", "res"], dir.path()));
    for (label, tau) in [("dynamo-adam-beta0.5", 0.5), ("dynamo-adam-beta2", 2.0)] {
        let v = json(&dir.path().join(format!("res/gaussian-modes/{label}/seed-1.json")));
        assert_eq!(v["method"], label);
        assert_eq!(v["config"]["penalty"]["tau"], tau);
        assert_eq!(v["config"]["optimizer"]["kind"], "adam");
    }
}

fn fixture(dir: &Path, method: &str, task: &str, seed: u64, best: f64, pd: f64) {
    let v = serde_json::json!({
        "method": method,
        "task": task,
        "seed": seed,
        "metrics": { "best_at_k": best, "pairwise_diversity": pd },
        "dataset_best": 0.5,
        "dataset_pd": 1.0,
    });
    let p = dir.join(task).join(method);
    fs::create_dir_all(&p).unwrap();
    fs::write(p.join(format!("seed-{seed}.json")), v.to_string()).unwrap();
}

#[test]
fn report_matches_hand_computation() {
    let dir = tempfile::tempdir().unwrap();
    let r = dir.path().join("res");
    // Task t1: A best (0.9 vs 0.8), B more diverse. Task t2: B best, A more diverse.
    fixture(&r, "A", "t1", 0, 0.9, 2.0);
    fixture(&r, "A", "t1", 1, 0.9, 2.0);
    fixture(&r, "B", "t1", 0, 0.8, 3.0);
    fixture(&r, "A", "t2", 0, 0.6, 5.0);
    fixture(&r, "B", "t2", 0, 0.7, 1.0);
    fs::write(r.join("not-a-result.json"), "{}").unwrap();
    let o = dynamo(&["report", "--results", "res"], dir.path());
    ok(&o);
    let text = fs::read_to_string(r.join("report.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let rows: Vec<csv::StringRecord> = rdr.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    let get = |m: &str| rows.iter().find(|r| &r[0] == m).unwrap().clone();
    let a = get("A");
    assert_eq!((&a[1], &a[2], &a[3], &a[4], &a[5]), ("1.500", "1.500", "0.2500", "2.5000", "2"));
    let b = get("B");
    assert_eq!((&b[1], &b[2], &b[3], &b[4], &b[5]), ("1.500", "1.500", "0.2500", "1.0000", "2"));
    assert!(String::from_utf8_lossy(&o.stdout).contains("rank_best"));
}

#[test]
fn report_forces_distinct_ranks_per_task() {
    let dir = tempfile::tempdir().unwrap();
    let r = dir.path().join("res");
    fixture(&r, "A", "t", 0, 0.9, 1.0);
    fixture(&r, "B", "t", 0, 0.8, 2.0);
    fixture(&r, "C", "t", 0, 0.7, 3.0);
    ok(&dynamo(&["report", "--results", "res"], dir.path()));
    let text = fs::read_to_string(r.join("report.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let ranks: Vec<(String, String, String)> =
        rdr.records().map(|x| x.unwrap()).map(|x| (x[0].into(), x[1].into(), x[2].into())).collect();
    assert_eq!(
        ranks,
        [
            ("A".into(), "1.000".into(), "3.000".into()),
            ("B".into(), "2.000".into(), "2.000".into()),
            ("C".into(), "3.000".into(), "1.000".into())
        ]
    );
}

#[test]
fn report_on_empty_directory_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("empty")).unwrap();
    assert_eq!(dynamo(&["report", "--results", "empty"], dir.path()).status.code(), Some(2));
    assert_eq!(dynamo(&["report", "--results", "missing"], dir.path()).status.code(), Some(2));
}

#[test]
fn check_suite_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = dynamo(&["check"], dir.path());
    ok(&o);
    assert_eq!(String::from_utf8_lossy(&o.stdout).matches("PASS").count(), 5);
}
