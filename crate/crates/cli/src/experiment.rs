use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use dynamo_core::dataset::tau_weight;
use dynamo_core::duality::Divergence;
use dynamo_core::metrics::MeanCi;
use dynamo_core::optimizers::OptimizerKind;
use dynamo_core::runner::{self, iteration_log_csv, RunConfig, RunResult};
use rayon::prelude::*;
use serde::Deserialize;

use crate::output::{csv_string, write_atomic};
use crate::UsageError;

const HIST_BINS: usize = 20;

#[derive(Args, Debug, Default)]
pub struct RunArgs {
    /// TOML file with run settings and an optional [experiment] table.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<String>,
    /// grad, adam, cma-es, bo-qucb or bo-qei.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Run the regularized method (combine with --baseline to run both).
    #[arg(long)]
    pub dynamo: bool,
    /// Run the plain backbone on the surrogate.
    #[arg(long)]
    pub baseline: bool,
    /// Seeds as a range `0..9` (inclusive), a list `0,3,5` or a single value.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Comma-separated sweep over the diversity strength.
    #[arg(long, value_delimiter = ',')]
    pub beta: Vec<f64>,
    /// Comma-separated sweep over the temperature.
    #[arg(long, value_delimiter = ',')]
    pub tau: Vec<f64>,
    /// Set the temperature equal to beta in every cell.
    #[arg(long)]
    pub tie_tau: bool,
    /// Comma-separated sweep over the batch size.
    #[arg(long, value_delimiter = ',')]
    pub b: Vec<usize>,
    /// Comma-separated sweep over the number of returned designs.
    #[arg(long, value_delimiter = ',')]
    pub k: Vec<usize>,
    /// Critic budget offset.
    #[arg(long)]
    pub w0: Option<f64>,
    /// kl or mixed-chi2.
    #[arg(long)]
    pub divergence: Option<String>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Load the offline dataset from CSV or JSON instead of generating it.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Size of the generated dataset.
    #[arg(long)]
    pub n: Option<usize>,
    /// Keep only the lowest-scoring fraction of the generated dataset.
    #[arg(long)]
    pub ceiling: Option<f64>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// Fix the multiplier instead of solving for it.
    #[arg(long)]
    pub pin_lambda: Option<f64>,
    #[arg(long, env = "DYNAMO_OUT_DIR", default_value = "results")]
    pub out: PathBuf,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long)]
    pub jobs: Option<usize>,
}

/// Sweep settings read from the `[experiment]` table of a config file.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ExperimentTable {
    seeds: Option<SeedSpec>,
    beta: Vec<f64>,
    tau: Vec<f64>,
    tie_tau: bool,
    b: Vec<usize>,
    k: Vec<usize>,
    variants: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum SeedSpec {
    List(Vec<u64>),
    Text(String),
}

/// Parses `0..9`, `0,3,5` or `7`.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, UsageError> {
    let bad = || UsageError(format!("invalid seed list '{text}'"));
    let t = text.trim();
    if let Some((a, b)) = t.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if b < a {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    let seeds = t
        .split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|_| bad()))
        .collect::<Result<Vec<_>, _>>()?;
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

fn usage<E: std::fmt::Display>(e: E) -> anyhow::Error {
    UsageError(e.to_string()).into()
}

fn load_config(path: &Path) -> anyhow::Result<(RunConfig, ExperimentTable)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut table: toml::Table = text.parse().map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let exp = match table.remove("experiment") {
        Some(v) => v.try_into().map_err(|e| usage(format!("[experiment]: {e}")))?,
        None => ExperimentTable::default(),
    };
    // Accept a bare optimizer name as shorthand for its default settings.
    if let Some(toml::Value::String(name)) = table.get("optimizer") {
        let kind = OptimizerKind::from_name(name).map_err(usage)?;
        let value = toml::Value::try_from(kind)?;
        table.insert("optimizer".into(), value);
    }
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok((cfg, exp))
}

/// One point of the sweep grid.
#[derive(Clone, Debug)]
pub struct Cell {
    pub name: String,
    pub method: String,
    pub config: RunConfig,
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

/// Expands the base configuration into the cartesian product of variants
/// and swept parameters. Swept parameters appear in the method label.
pub fn expand_cells(
    base: &RunConfig,
    variants: &[bool],
    betas: &[f64],
    taus: &[f64],
    tie_tau: bool,
    bs: &[usize],
    ks: &[usize],
) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &baseline in variants {
        for &beta in betas {
            let tau_list: Vec<f64> = if tie_tau { vec![beta] } else { taus.to_vec() };
            for &tau in &tau_list {
                for &b in bs {
                    for &k in ks {
                        let mut cfg = base.clone();
                        cfg.baseline = baseline;
                        cfg.penalty.beta = beta;
                        cfg.penalty.tau = tau;
                        cfg.batch_size = b;
                        cfg.k = k;
                        let mut label = cfg.method_name();
                        if !baseline {
                            if betas.len() > 1 {
                                label.push_str(&format!("-beta{}", fmt_num(beta)));
                            }
                            if taus.len() > 1 && !tie_tau {
                                label.push_str(&format!("-tau{}", fmt_num(tau)));
                            }
                        }
                        if bs.len() > 1 {
                            label.push_str(&format!("-b{b}"));
                        }
                        if ks.len() > 1 {
                            label.push_str(&format!("-k{k}"));
                        }
                        if cells.iter().any(|c: &Cell| c.method == label) {
                            continue;
                        }
                        let name = format!("{}/{}", cfg.task, label);
                        cells.push(Cell { name, method: label, config: cfg });
                    }
                }
            }
        }
    }
    cells
}

struct Outcome {
    cell: usize,
    seed: u64,
    result: Result<RunResult, String>,
}

pub fn run(args: &RunArgs) -> anyhow::Result<()> {
    let (mut base, exp) = match &args.config {
        Some(p) => load_config(p)?,
        None => (RunConfig::default(), ExperimentTable::default()),
    };
    if let Some(t) = &args.task {
        base.task = t.clone();
    }
    if let Some(o) = &args.optimizer {
        base.optimizer = OptimizerKind::from_name(o).map_err(usage)?;
    }
    if let Some(v) = args.w0 {
        base.penalty.w0 = v;
    }
    if let Some(d) = &args.divergence {
        base.penalty.divergence = match d.as_str() {
            "kl" => Divergence::Kl,
            "mixed-chi2" | "chi2" => Divergence::MixedChi2,
            other => return Err(usage(format!("unknown divergence '{other}'"))),
        };
    }
    if let Some(g) = args.gamma {
        base.penalty.gamma = g;
    }
    if let Some(p) = &args.data {
        base.data.path = Some(p.clone());
    }
    if let Some(n) = args.n {
        base.data.n = n;
    }
    if let Some(c) = args.ceiling {
        base.data.ceiling = Some(c);
    }
    if let Some(m) = args.max_iterations {
        base.max_iterations = m;
    }
    if let Some(l) = args.pin_lambda {
        base.pin_lambda = Some(l);
    }
    dynamo_core::tasks::Task::by_name(&base.task).map_err(usage)?;

    let seeds = match (&args.seeds, &exp.seeds) {
        (Some(s), _) => parse_seeds(s)?,
        (None, Some(SeedSpec::Text(s))) => parse_seeds(s)?,
        (None, Some(SeedSpec::List(l))) if !l.is_empty() => l.clone(),
        _ => vec![base.seed],
    };
    let pick_f = |cli: &[f64], file: &[f64], dflt: f64| -> Vec<f64> {
        if !cli.is_empty() {
            cli.to_vec()
        } else if !file.is_empty() {
            file.to_vec()
        } else {
            vec![dflt]
        }
    };
    let pick_u = |cli: &[usize], file: &[usize], dflt: usize| -> Vec<usize> {
        if !cli.is_empty() {
            cli.to_vec()
        } else if !file.is_empty() {
            file.to_vec()
        } else {
            vec![dflt]
        }
    };
    let betas = pick_f(&args.beta, &exp.beta, base.penalty.beta);
    let taus = pick_f(&args.tau, &exp.tau, base.penalty.tau);
    let bs = pick_u(&args.b, &exp.b, base.batch_size);
    let ks = pick_u(&args.k, &exp.k, base.k);
    let tie_tau = args.tie_tau || exp.tie_tau;
    let variants: Vec<bool> = if args.dynamo || args.baseline {
        let mut v = Vec::new();
        if args.baseline {
            v.push(true);
        }
        if args.dynamo {
            v.push(false);
        }
        v
    } else if !exp.variants.is_empty() {
        exp.variants
            .iter()
            .map(|v| match v.as_str() {
                "baseline" => Ok(true),
                "dynamo" => Ok(false),
                other => Err(usage(format!("unknown variant '{other}'"))),
            })
            .collect::<anyhow::Result<_>>()?
    } else {
        vec![base.baseline]
    };

    let cells = expand_cells(&base, &variants, &betas, &taus, tie_tau, &bs, &ks);
    for c in &cells {
        c.config.validate().map_err(|e| usage(format!("{}: {e}", c.name)))?;
    }
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    log::info!("{} cells x {} seeds", cells.len(), seeds.len());

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.unwrap_or(0))
        .build()
        .context("building worker pool")?;
    let out = &args.out;
    let mut outcomes: Vec<Outcome> = pool.install(|| {
        jobs.par_iter()
            .map(|&(ci, seed)| {
                let cell = &cells[ci];
                let mut cfg = cell.config.clone();
                cfg.seed = seed;
                let result = runner::run(&cfg)
                    .map(|mut r| {
                        r.method = cell.method.clone();
                        r
                    })
                    .map_err(|e| e.to_string());
                let dir = out.join(&cell.name);
                let written = match &result {
                    Ok(r) => write_run(&dir, seed, r),
                    Err(msg) => write_atomic(&dir.join(format!("seed-{seed}.error.txt")), msg.as_bytes()),
                };
                let result = match (result, written) {
                    (Ok(r), Ok(())) => Ok(r),
                    (Ok(_), Err(e)) => Err(format!("writing results: {e:#}")),
                    (Err(m), _) => Err(m),
                };
                match &result {
                    Ok(r) => log::info!(
                        "{} seed {seed}: best {:.4} pd {:.4}",
                        cell.name,
                        r.metrics.best_at_k,
                        r.metrics.pairwise_diversity
                    ),
                    Err(m) => log::warn!("{} seed {seed} failed: {m}", cell.name),
                }
                Outcome { cell: ci, seed, result }
            })
            .collect()
    });
    outcomes.sort_by_key(|o| (o.cell, o.seed));

    write_atomic(&out.join("aggregate.csv"), aggregate_csv(&cells, &outcomes)?.as_bytes())?;
    write_atomic(&out.join("score_histograms.csv"), score_histograms(&cells, &outcomes)?.as_bytes())?;
    write_atomic(&out.join("tau_weight_histograms.csv"), tau_histograms(&cells, &outcomes)?.as_bytes())?;
    let errors: Vec<Vec<String>> = outcomes
        .iter()
        .filter_map(|o| o.result.as_ref().err().map(|m| vec![cells[o.cell].name.clone(), o.seed.to_string(), m.clone()]))
        .collect();
    write_atomic(&out.join("errors.csv"), csv_string(&["cell", "seed", "error"], &errors)?.as_bytes())?;

    let ok = outcomes.iter().filter(|o| o.result.is_ok()).count();
    println!("{ok}/{} runs succeeded; results in {}", outcomes.len(), out.display());
    for e in &errors {
        eprintln!("failed: {} seed {}: {}", e[0], e[1], e[2]);
    }
    if ok == 0 {
        anyhow::bail!("all runs failed");
    }
    Ok(())
}

fn write_run(dir: &Path, seed: u64, r: &RunResult) -> anyhow::Result<()> {
    let json = serde_json::to_string_pretty(r)?;
    write_atomic(&dir.join(format!("seed-{seed}.json")), json.as_bytes())?;
    write_atomic(&dir.join(format!("seed-{seed}.log.csv")), iteration_log_csv(&r.log).as_bytes())?;
    Ok(())
}

fn per_run_metrics(r: &RunResult) -> Vec<(String, f64)> {
    let m = &r.metrics;
    let mut v = vec![
        ("best_at_k".to_string(), m.best_at_k),
        ("median_at_k".to_string(), m.median_at_k),
        ("pairwise_diversity".to_string(), m.pairwise_diversity),
        ("minimum_novelty".to_string(), m.minimum_novelty),
        ("l1_coverage".to_string(), m.l1_coverage),
    ];
    if let Some(s) = &m.secondary_stds {
        v.extend(s.iter().map(|(k, x)| (format!("{k}_std"), *x)));
    }
    v.extend([
        ("dataset_best".to_string(), r.dataset_best),
        ("dataset_pd".to_string(), r.dataset_pd),
        ("iterations".to_string(), r.iterations as f64),
        ("restarts".to_string(), r.restarts as f64),
        ("wall_time_s".to_string(), r.wall_time_s),
    ]);
    v
}

/// Long-format table: one row per (cell, metric) with the mean and a 95%
/// interval across seeds.
fn aggregate_csv(cells: &[Cell], outcomes: &[Outcome]) -> anyhow::Result<String> {
    let mut rows = Vec::new();
    for (ci, cell) in cells.iter().enumerate() {
        let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut order: Vec<String> = Vec::new();
        let mut failed = 0;
        for o in outcomes.iter().filter(|o| o.cell == ci) {
            match &o.result {
                Ok(r) => {
                    for (name, x) in per_run_metrics(r) {
                        if !values.contains_key(&name) {
                            order.push(name.clone());
                        }
                        values.entry(name).or_default().push(x);
                    }
                }
                Err(_) => failed += 1,
            }
        }
        for name in &order {
            let ci95 = MeanCi::from_values(&values[name])?;
            rows.push(vec![
                cell.config.task.clone(),
                cell.method.clone(),
                name.clone(),
                ci95.mean.to_string(),
                ci95.half_width.to_string(),
                ci95.lower().to_string(),
                ci95.upper().to_string(),
                ci95.n.to_string(),
                failed.to_string(),
            ]);
        }
        if order.is_empty() {
            rows.push(vec![
                cell.config.task.clone(),
                cell.method.clone(),
                "none".into(),
                "NaN".into(),
                "NaN".into(),
                "NaN".into(),
                "NaN".into(),
                "0".into(),
                failed.to_string(),
            ]);
        }
    }
    csv_string(
        &["task", "method", "metric", "mean", "ci_half_width", "ci_lower", "ci_upper", "seeds", "failed"],
        &rows,
    )
}

fn histogram(values: &[f64], lo: f64, hi: f64, weights: Option<&[f64]>) -> Vec<(f64, f64, f64)> {
    let width = if hi > lo { (hi - lo) / HIST_BINS as f64 } else { 1.0 };
    let mut mass = vec![0.0; HIST_BINS];
    for (i, &v) in values.iter().enumerate() {
        let bin = (((v - lo) / width).floor().max(0.0) as usize).min(HIST_BINS - 1);
        mass[bin] += weights.map_or(1.0, |w| w[i]);
    }
    mass.into_iter()
        .enumerate()
        .map(|(i, m)| (lo + i as f64 * width, lo + (i + 1) as f64 * width, m))
        .collect()
}

/// Normalized dataset scores against normalized candidate scores, per run.
fn score_histograms(cells: &[Cell], outcomes: &[Outcome]) -> anyhow::Result<String> {
    let mut rows = Vec::new();
    for o in outcomes {
        let Ok(r) = &o.result else { continue };
        let cand = r.candidates.oracle_scores.clone().unwrap_or_default();
        let lo = cand.iter().copied().fold(0.0_f64, f64::min);
        let hi = cand.iter().copied().fold(1.0_f64, f64::max);
        let (_, ds) = runner::prepare(&r.config)?;
        for (source, vals) in [("dataset", ds.norm_scores().to_vec()), ("candidates", cand)] {
            for (a, b, m) in histogram(&vals, lo, hi, None) {
                rows.push(vec![
                    cells[o.cell].method.clone(),
                    r.task.clone(),
                    o.seed.to_string(),
                    source.to_string(),
                    a.to_string(),
                    b.to_string(),
                    m.to_string(),
                ]);
            }
        }
    }
    csv_string(&["method", "task", "seed", "source", "bin_lower", "bin_upper", "count"], &rows)
}

/// Mass the temperature-weighted data distribution puts on each band of
/// normalized scores, one block per distinct (task, tau).
fn tau_histograms(cells: &[Cell], outcomes: &[Outcome]) -> anyhow::Result<String> {
    let mut rows = Vec::new();
    let mut seen: Vec<(String, u64)> = Vec::new();
    for o in outcomes {
        let Ok(r) = &o.result else { continue };
        let tau = cells[o.cell].config.penalty.tau;
        let key = (r.task.clone(), tau.to_bits());
        if seen.contains(&key) {
            continue;
        }
        seen.push(key);
        let (_, ds) = runner::prepare(&r.config)?;
        let tw = tau_weight(&ds, tau)?;
        for (a, b, m) in histogram(ds.norm_scores(), 0.0, 1.0, Some(tw.weights())) {
            rows.push(vec![r.task.clone(), tau.to_string(), a.to_string(), b.to_string(), m.to_string()]);
        }
    }
    csv_string(&["task", "tau", "bin_lower", "bin_upper", "mass"], &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_specs() {
        assert_eq!(parse_seeds("0..9").unwrap(), (0..=9).collect::<Vec<_>>());
        assert_eq!(parse_seeds("0..=2").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("4, 2,7").unwrap(), vec![4, 2, 7]);
        assert_eq!(parse_seeds("5").unwrap(), vec![5]);
        assert!(parse_seeds("3..1").is_err());
        assert!(parse_seeds("a").is_err());
        assert!(parse_seeds("").is_err());
    }

    #[test]
    fn swept_params_enter_labels() {
        let base = RunConfig::default();
        let cells = expand_cells(&base, &[true, false], &[0.1, 1.0], &[1.0], false, &[64], &[128]);
        let names: Vec<&str> = cells.iter().map(|c| c.method.as_str()).collect();
        assert_eq!(names, ["cma-es", "dynamo-cma-es-beta0.1", "dynamo-cma-es-beta1"]);
        assert_eq!(cells[0].name, "branin/cma-es");
    }

    #[test]
    fn tied_tau_follows_beta() {
        let base = RunConfig::default();
        let cells = expand_cells(&base, &[false], &[0.5, 2.0], &[1.0], true, &[64], &[128]);
        assert_eq!(cells.len(), 2);
        for c in &cells {
            assert_eq!(c.config.penalty.tau, c.config.penalty.beta);
        }
    }

    #[test]
    fn histogram_mass_is_conserved() {
        let v = [0.0, 0.2, 0.5, 1.0, 1.0];
        let h = histogram(&v, 0.0, 1.0, None);
        assert_eq!(h.len(), HIST_BINS);
        assert_eq!(h.iter().map(|x| x.2).sum::<f64>(), 5.0);
        assert_eq!(h[HIST_BINS - 1].2, 2.0);
    }
}
