use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use dynamo_core::metrics::{rank_and_gap, MethodSummary, MethodTaskScore};
use serde::Deserialize;

use crate::output::{csv_string, text_table, write_atomic};
use crate::UsageError;

/// The subset of a run result the report needs.
#[derive(Debug, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub task: String,
    pub seed: u64,
    pub metrics: SummaryMetrics,
    pub dataset_best: f64,
    pub dataset_pd: f64,
}

#[derive(Debug, Deserialize)]
pub struct SummaryMetrics {
    pub best_at_k: f64,
    pub pairwise_diversity: f64,
}

fn collect_json(dir: &Path, out: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            collect_json(&p, out)?;
        } else if p.extension().is_some_and(|x| x == "json") {
            out.push(p);
        }
    }
    Ok(())
}

/// Loads every result file under `dir`; files of other shapes are skipped.
pub fn load_runs(dir: &Path) -> anyhow::Result<Vec<RunSummary>> {
    if !dir.is_dir() {
        return Err(UsageError(format!("results directory {} does not exist", dir.display())).into());
    }
    let mut files = Vec::new();
    collect_json(dir, &mut files)?;
    let mut runs = Vec::new();
    for f in files {
        let text = std::fs::read_to_string(&f)?;
        match serde_json::from_str::<RunSummary>(&text) {
            Ok(r) => runs.push(r),
            Err(e) => log::warn!("skipping {}: {e}", f.display()),
        }
    }
    Ok(runs)
}

/// Averages seeds within each (method, task) pair.
pub fn method_task_scores(runs: &[RunSummary]) -> Vec<MethodTaskScore> {
    let mut groups: BTreeMap<(&str, &str), Vec<&RunSummary>> = BTreeMap::new();
    for r in runs {
        groups.entry((r.task.as_str(), r.method.as_str())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((task, method), rs)| {
            let m = rs.len() as f64;
            let mean = |f: fn(&RunSummary) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / m;
            MethodTaskScore {
                method: method.to_string(),
                task: task.to_string(),
                best_at_k: mean(|r| r.metrics.best_at_k),
                pairwise_diversity: mean(|r| r.metrics.pairwise_diversity),
                dataset_best: mean(|r| r.dataset_best),
                dataset_pd: mean(|r| r.dataset_pd),
            }
        })
        .collect()
}

fn summary_rows(s: &[MethodSummary]) -> Vec<Vec<String>> {
    s.iter()
        .map(|m| {
            vec![
                m.method.clone(),
                format!("{:.3}", m.rank_best),
                format!("{:.3}", m.rank_pd),
                format!("{:.4}", m.gap_best),
                format!("{:.4}", m.gap_pd),
                m.tasks.to_string(),
            ]
        })
        .collect()
}

const HEADER: [&str; 6] = ["method", "rank_best", "rank_pd", "gap_best", "gap_pd", "tasks"];

pub fn run(results: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let runs = load_runs(results)?;
    if runs.is_empty() {
        return Err(UsageError(format!("no result files found under {}", results.display())).into());
    }
    let mut keys: Vec<(&str, &str, u64)> = runs.iter().map(|r| (r.task.as_str(), r.method.as_str(), r.seed)).collect();
    keys.sort();
    for w in keys.windows(2).filter(|w| w[0] == w[1]) {
        log::warn!("duplicate result for {} {} seed {}", w[0].0, w[0].1, w[0].2);
    }
    let per_task = method_task_scores(&runs);
    let tasks: BTreeMap<&str, usize> = per_task.iter().fold(BTreeMap::new(), |mut m, r| {
        *m.entry(r.task.as_str()).or_default() += 1;
        m
    });
    let methods = per_task.iter().map(|r| r.method.as_str()).collect::<std::collections::BTreeSet<_>>();
    for (t, n) in &tasks {
        if *n != methods.len() {
            log::warn!("task {t} has results for {n} of {} methods; ranks are not comparable", methods.len());
        }
    }
    let mut summary = rank_and_gap(&per_task);
    summary.sort_by(|a, b| a.rank_best.total_cmp(&b.rank_best).then(a.method.cmp(&b.method)));

    let rows = summary_rows(&summary);
    let out_dir = out.unwrap_or(results);
    write_atomic(&out_dir.join("report.csv"), csv_string(&HEADER, &rows)?.as_bytes())?;
    let per_rows: Vec<Vec<String>> = per_task
        .iter()
        .map(|r| {
            vec![
                r.task.clone(),
                r.method.clone(),
                r.best_at_k.to_string(),
                r.pairwise_diversity.to_string(),
                r.dataset_best.to_string(),
                r.dataset_pd.to_string(),
            ]
        })
        .collect();
    write_atomic(
        &out_dir.join("report_per_task.csv"),
        csv_string(&["task", "method", "best_at_k", "pairwise_diversity", "dataset_best", "dataset_pd"], &per_rows)?
            .as_bytes(),
    )?;
    let table = text_table(&HEADER, &rows);
    write_atomic(&out_dir.join("report.txt"), table.as_bytes())?;
    println!("{} runs, {} tasks, {} methods", runs.len(), tasks.len(), methods.len());
    print!("{table}");
    Ok(())
}
