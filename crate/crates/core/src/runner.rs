//! End-to-end optimization loop: surrogate fit, per-iteration multiplier
//! solve, batch acquisition, critic retraining, candidate caching, the
//! failure/restart protocol, and final top-k evaluation.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetFormat, DesignKind, OfflineDataset, TauWeights};
use crate::density::{chi2_estimate, fit_kde, kl_estimate, BandwidthRule, KdeModel};
use crate::duality::{solve_lambda, PenaltyConfig, SolverConfig};
use crate::error::{DynamoError, Result};
use crate::matrix::Matrix;
use crate::metrics::{self, CandidateSet, DistanceMetric, MetricReport};
use crate::neural::{fit_surrogate, train_critic, Critic, CriticConfig, Mlp, SurrogateConfig};
use crate::objective::{PenalizedObjective, ScoreFn};
use crate::optimizers::{sobol_init, Backbone, OptimizerKind};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::tasks::{generate_offline, secondary_eval, Sampler, Task};

/// Where the offline dataset comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Load from file instead of generating.
    pub path: Option<PathBuf>,
    pub n: usize,
    pub ceiling: Option<f64>,
    pub sampler: Sampler,
    /// Generation seed; the run seed when unset.
    pub seed: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            n: 800,
            ceiling: None,
            sampler: Sampler::Sobol,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: String,
    pub optimizer: OptimizerKind,
    pub penalty: PenaltyConfig,
    /// Runs the plain backbone on the surrogate (`beta` forced to 0).
    pub baseline: bool,
    /// Fixes the multiplier instead of solving for it.
    pub pin_lambda: Option<f64>,
    pub batch_size: usize,
    pub k: usize,
    pub max_failures: usize,
    pub max_restarts: usize,
    pub max_iterations: usize,
    pub seed: u64,
    pub data: DataConfig,
    pub surrogate: SurrogateConfig,
    pub critic: CriticConfig,
    pub solver: SolverConfig,
    pub bandwidth: BandwidthRule,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: "branin".into(),
            optimizer: OptimizerKind::from_name("cma-es").expect("built-in optimizer"),
            penalty: PenaltyConfig::default(),
            baseline: false,
            pin_lambda: None,
            batch_size: 64,
            k: 128,
            max_failures: 10,
            max_restarts: 3,
            max_iterations: 64,
            seed: 0,
            data: DataConfig::default(),
            surrogate: SurrogateConfig::default(),
            critic: CriticConfig::default(),
            solver: SolverConfig::default(),
            bandwidth: BandwidthRule::Silverman,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(DynamoError::precondition("k must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(DynamoError::precondition("batch size must be >= 1"));
        }
        if self.max_failures == 0 {
            return Err(DynamoError::precondition("max_failures must be >= 1"));
        }
        if self.max_iterations == 0 {
            return Err(DynamoError::precondition("max_iterations must be >= 1"));
        }
        if let Some(l) = self.pin_lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(DynamoError::domain(format!("pinned lambda must be finite and >= 0, got {l}")));
            }
        }
        self.effective_penalty().validate()?;
        let p = self.effective_penalty();
        if p.beta > 0.0 && p.tau == 0.0 {
            return Err(DynamoError::domain("tau must be positive when beta > 0"));
        }
        Ok(())
    }

    pub fn effective_penalty(&self) -> PenaltyConfig {
        let mut p = self.penalty.clone();
        if self.baseline {
            p.beta = 0.0;
        }
        p
    }

    /// A label such as `dynamo-cma-es` or `cma-es`.
    pub fn method_name(&self) -> String {
        if self.effective_penalty().beta > 0.0 {
            format!("dynamo-{}", self.optimizer.name())
        } else {
            self.optimizer.name().to_string()
        }
    }

    fn distance(&self, ds: &OfflineDataset) -> DistanceMetric {
        match ds.kind() {
            DesignKind::Continuous => DistanceMetric::Euclidean,
            DesignKind::DiscreteRelaxed { .. } => DistanceMetric::NormalizedLevenshtein,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub design: Vec<f64>,
    pub score: f64,
    pub phase: usize,
    pub iteration: usize,
}

/// Append-only record of every acquired design with the penalized score it
/// received in its own iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    entries: Vec<PoolEntry>,
    max: Option<f64>,
}

impl CandidatePool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, design: Vec<f64>, score: f64, phase: usize, iteration: usize) -> Result<()> {
        if !score.is_finite() {
            return Err(DynamoError::numeric(format!("penalized score {score} is not finite")));
        }
        self.max = Some(self.max.map_or(score, |m| m.max(score)));
        self.entries.push(PoolEntry {
            design,
            score,
            phase,
            iteration,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn max_score(&self) -> Option<f64> {
        self.max
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub designs: Matrix,
    pub scores: Vec<f64>,
    /// Set when the pool held fewer than `k` designs.
    pub padded: bool,
}

/// The `k` highest-scoring pool entries, ties going to earlier insertions.
/// A pool smaller than `k` yields all entries with `padded` set.
pub fn select_top_k(pool: &CandidatePool, k: usize) -> Result<Selection> {
    if pool.is_empty() {
        return Err(DynamoError::precondition("candidate pool is empty"));
    }
    let e = pool.entries();
    let mut order: Vec<usize> = (0..e.len()).collect();
    order.sort_by(|&a, &b| e[b].score.total_cmp(&e[a].score).then(a.cmp(&b)));
    let padded = e.len() < k;
    if padded {
        log::warn!("pool holds {} designs, fewer than k = {k}; returning all", e.len());
    }
    order.truncate(k);
    let rows: Vec<&[f64]> = order.iter().map(|&i| e[i].design.as_slice()).collect();
    Ok(Selection {
        designs: Matrix::from_rows(&rows)?,
        scores: order.iter().map(|&i| e[i].score).collect(),
        indices: order,
        padded,
    })
}

/// One row of the per-iteration log. Penalty diagnostics are `None` when
/// the run is unpenalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub phase: usize,
    pub iteration: usize,
    pub lambda: f64,
    pub g_value: Option<f64>,
    pub lambda_converged: Option<bool>,
    /// Critic objective trace of this iteration's retraining.
    pub w_trace: Vec<f64>,
    pub kl_estimate: Option<f64>,
    pub chi2_estimate: Option<f64>,
    /// Batch max under the critic used while sampling.
    pub batch_max_pre: f64,
    /// Batch max as cached, under the retrained critic.
    pub batch_max: f64,
    pub failure: bool,
}

impl IterationLog {
    pub const CSV_HEADER: &'static str =
        "phase,iteration,lambda,g_value,w,kl_estimate,chi2_estimate,batch_max_pre,batch_max,failure";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.phase,
            self.iteration,
            self.lambda,
            opt(self.g_value),
            opt(self.w_trace.last().copied()),
            opt(self.kl_estimate),
            opt(self.chi2_estimate),
            self.batch_max_pre,
            self.batch_max,
            self.failure
        )
    }
}

pub fn iteration_log_csv(log: &[IterationLog]) -> String {
    let mut s = String::from(IterationLog::CSV_HEADER);
    s.push('\n');
    for r in log {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: String,
    pub task: String,
    pub seed: u64,
    /// The effective configuration, for provenance.
    pub config: RunConfig,
    /// Top-k designs with normalized oracle scores.
    pub candidates: CandidateSet,
    pub raw_scores: Vec<f64>,
    pub penalized_scores: Vec<f64>,
    pub metrics: MetricReport,
    pub log: Vec<IterationLog>,
    pub phases: usize,
    pub restarts: usize,
    pub iterations: usize,
    pub pool_size: usize,
    pub padded: bool,
    pub oracle_calls: u64,
    pub dataset_best: f64,
    pub dataset_pd: f64,
    pub wall_time_s: f64,
}

/// State handed to an observer after every iteration.
pub struct IterationView<'a> {
    pub log: &'a IterationLog,
    /// Critic outputs on the dataset used for this iteration's solve.
    pub critic_on_data: &'a [f64],
    pub weights: &'a TauWeights,
    pub penalty: &'a PenaltyConfig,
    pub batch: &'a Matrix,
}

/// Loads or generates the dataset for `config`.
pub fn prepare(config: &RunConfig) -> Result<(Task, OfflineDataset)> {
    let task = Task::by_name(&config.task)?;
    let ds = match &config.data.path {
        Some(p) => OfflineDataset::load(p, DatasetFormat::from_path(p))?,
        None => generate_offline(
            &task,
            config.data.n,
            &config.data.sampler,
            config.data.ceiling,
            config.data.seed.unwrap_or(config.seed),
        )?,
    };
    if ds.dim() != task.dim() {
        return Err(DynamoError::domain(format!(
            "dataset has dimension {}, task '{}' expects {}",
            ds.dim(),
            task.name(),
            task.dim()
        )));
    }
    Ok((task, ds))
}

pub fn run(config: &RunConfig) -> Result<RunResult> {
    let (task, ds) = prepare(config)?;
    run_on(config, &task, &ds)
}

pub fn run_on(config: &RunConfig, task: &Task, ds: &OfflineDataset) -> Result<RunResult> {
    let backbone = config.optimizer.build(ds.lower_bound(), ds.upper_bound(), config.seed)?;
    run_with(config, task, ds, backbone, &mut |_| {})
}

/// Initial designs of a phase: a scrambled Sobol batch whose scramble
/// depends on the run seed and the phase.
pub fn phase_init(config: &RunConfig, ds: &OfflineDataset, phase: usize) -> Result<Matrix> {
    sobol_init(
        ds.dim(),
        config.batch_size,
        ds.lower_bound(),
        ds.upper_bound(),
        derive_seed(config.seed, Stream::Sobol, phase as u64),
    )
}

pub fn fit_run_surrogate(config: &RunConfig, ds: &OfflineDataset) -> Result<Mlp> {
    fit_surrogate(ds, &config.surrogate, derive_seed(config.seed, Stream::Surrogate, 0))
}

struct PhaseState {
    critic: Critic,
}

fn uniform_kde(batch: &Matrix, rule: BandwidthRule) -> Result<KdeModel> {
    fit_kde(batch, &vec![1.0; batch.rows()], rule)
}

/// Runs the loop with an explicit backbone and an observer called after
/// every iteration.
pub fn run_with(
    config: &RunConfig,
    task: &Task,
    ds: &OfflineDataset,
    mut backbone: Box<dyn Backbone>,
    observer: &mut dyn FnMut(&IterationView),
) -> Result<RunResult> {
    config.validate()?;
    let started = Instant::now();
    let penalty = config.effective_penalty();
    let penalized = penalty.beta > 0.0;
    let b = config.batch_size;
    let d = ds.dim();
    let data = ds.designs();
    let tw = if penalized {
        TauWeights::from_scores(ds.norm_scores(), penalty.tau)?
    } else {
        TauWeights::uniform(ds.len())
    };

    let surrogate = fit_run_surrogate(config, ds).map_err(|e| e.context("fitting surrogate"))?;
    let mut objective = PenalizedObjective::new(
        surrogate,
        penalty.clone(),
        ds.lower_bound().to_vec(),
        ds.upper_bound().to_vec(),
    )?;
    let p_kde = if penalized {
        let k = fit_kde(data, tw.weights(), config.bandwidth)?;
        objective.set_p_kde(k.clone());
        Some(k)
    } else {
        None
    };

    let mut pool = CandidatePool::new();
    let mut log = Vec::new();
    let mut phase = 0usize;
    let mut failures = 0usize;
    let mut iteration = 0usize;

    let start_phase = |phase: usize, objective: &mut PenalizedObjective, backbone: &mut Box<dyn Backbone>| -> Result<Option<PhaseState>> {
        let init = phase_init(config, ds, phase)?;
        backbone.reset(&init, phase as u64)?;
        if !penalized {
            return Ok(None);
        }
        let mut rng = stream_rng(config.seed, Stream::Critic, phase as u64);
        let mut critic = Critic::new(d, &config.critic, &mut rng)?;
        train_critic(&mut critic, data, &tw, &init, &config.critic)?;
        objective.set_critic(critic.clone(), data, &tw)?;
        objective.set_q_kde(if init.rows() >= 2 {
            Some(uniform_kde(&init, config.bandwidth)?)
        } else {
            None
        });
        Ok(Some(PhaseState { critic }))
    };

    let ctx = |phase: usize, iteration: usize| move |e: DynamoError| e.context(format!("phase {phase}, iteration {iteration}"));
    let mut state = start_phase(0, &mut objective, &mut backbone).map_err(ctx(0, 0))?;

    while iteration < config.max_iterations {
        let wrap = ctx(phase, iteration);
        let critic_on_data = match &state {
            Some(s) => s.critic.values(data).map_err(&wrap)?,
            None => Vec::new(),
        };
        let (lambda, g_value, lambda_converged) = if !penalized {
            (config.pin_lambda.unwrap_or(0.0), None, None)
        } else if let Some(l) = config.pin_lambda {
            (l, None, None)
        } else {
            let sol = solve_lambda(&critic_on_data, &tw, &penalty, &config.solver).map_err(&wrap)?;
            (sol.lambda_star, Some(sol.g_value), Some(sol.converged))
        };
        objective.set_lambda(lambda).map_err(&wrap)?;

        let batch = backbone.propose(&objective, b).map_err(&wrap)?;
        if batch.rows() != b || batch.cols() != d {
            return Err(wrap(DynamoError::precondition(format!(
                "optimizer returned a {}x{} batch, expected {b}x{d}",
                batch.rows(),
                batch.cols()
            ))));
        }
        let batch_max_pre = max_of(&objective.score_batch(&batch).map_err(&wrap)?);

        let mut w_trace = Vec::new();
        let (mut kl, mut chi2) = (None, None);
        if let (Some(s), Some(p)) = (state.as_mut(), &p_kde) {
            let trace = train_critic(&mut s.critic, data, &tw, &batch, &config.critic).map_err(&wrap)?;
            w_trace = trace.w;
            objective.set_critic(s.critic.clone(), data, &tw).map_err(&wrap)?;
            if b >= 2 {
                let q = uniform_kde(&batch, config.bandwidth).map_err(&wrap)?;
                kl = Some(kl_estimate(&batch, p, &q).map_err(&wrap)?);
                chi2 = Some(chi2_estimate(&batch, p, &q).map_err(&wrap)?);
                objective.set_q_kde(Some(q));
            }
        }

        let scores = objective.score_batch(&batch).map_err(&wrap)?;
        let batch_max = max_of(&scores);
        let failure = pool.max_score().is_some_and(|m| batch_max <= m);
        for (x, s) in batch.iter_rows().zip(&scores) {
            pool.push(x.to_vec(), *s, phase, iteration).map_err(&wrap)?;
        }
        let entry = IterationLog {
            phase,
            iteration,
            lambda,
            g_value,
            lambda_converged,
            w_trace,
            kl_estimate: kl,
            chi2_estimate: chi2,
            batch_max_pre,
            batch_max,
            failure,
        };
        log::debug!(
            "phase {phase} iter {iteration}: lambda {lambda:.4e}, batch max {batch_max:.5}, failure {failure}"
        );
        observer(&IterationView {
            log: &entry,
            critic_on_data: &critic_on_data,
            weights: &tw,
            penalty: &penalty,
            batch: &batch,
        });
        log.push(entry);
        iteration += 1;

        failures = if failure { failures + 1 } else { 0 };
        if failures >= config.max_failures {
            if phase >= config.max_restarts {
                break;
            }
            phase += 1;
            failures = 0;
            state = start_phase(phase, &mut objective, &mut backbone).map_err(ctx(phase, iteration))?;
        }
    }

    let selection = select_top_k(&pool, config.k)?;
    let calls_before = task.oracle_calls();
    let raw = task.evaluate_batch(&selection.designs)?;
    let oracle_calls = task.oracle_calls() - calls_before;
    if oracle_calls != selection.designs.rows() as u64 {
        return Err(DynamoError::precondition(format!(
            "oracle audit failed: {oracle_calls} calls for {} designs",
            selection.designs.rows()
        )));
    }
    let mut candidates = CandidateSet::new(selection.designs.clone());
    candidates.oracle_scores = Some(raw.iter().map(|&y| ds.normalize(y)).collect());
    if let DesignKind::DiscreteRelaxed { .. } = ds.kind() {
        candidates.decoded_sequences = Some(
            selection
                .designs
                .iter_rows()
                .map(|x| ds.kind().decode_string(x).unwrap_or_default())
                .collect(),
        );
    }
    let metric = config.distance(ds);
    let mut report = metrics::report(&candidates, ds, metric)?;
    if task.has_secondaries() {
        let values = secondary_eval(task, &selection.designs)?;
        report.secondary_stds = Some(
            values
                .iter()
                .enumerate()
                .map(|(i, v)| (format!("secondary_{i}"), metrics::std_dev(v)))
                .collect(),
        );
    }
    let dataset_pd = dataset_diversity(ds, metric)?;
    Ok(RunResult {
        method: config.method_name(),
        task: task.name().to_string(),
        seed: config.seed,
        config: config.clone(),
        candidates,
        raw_scores: raw,
        penalized_scores: selection.scores,
        metrics: report,
        log,
        phases: phase + 1,
        restarts: phase,
        iterations: iteration,
        pool_size: pool.len(),
        padded: selection.padded,
        oracle_calls,
        dataset_best: ds.norm_scores().iter().copied().fold(f64::NEG_INFINITY, f64::max),
        dataset_pd,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Pairwise diversity of the offline designs, the reference for diversity
/// gaps.
pub fn dataset_diversity(ds: &OfflineDataset, metric: DistanceMetric) -> Result<f64> {
    let mut cs = CandidateSet::new(ds.designs().clone());
    if metric == DistanceMetric::NormalizedLevenshtein {
        cs.decoded_sequences = Some(
            ds.designs()
                .iter_rows()
                .map(|x| ds.kind().decode_string(x).unwrap_or_default())
                .collect(),
        );
    }
    metrics::pairwise_diversity(&cs, metric)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pool_of(scores: &[f64]) -> CandidatePool {
        let mut p = CandidatePool::new();
        for (i, s) in scores.iter().enumerate() {
            p.push(vec![i as f64], *s, 0, i).unwrap();
        }
        p
    }

    #[test]
    fn distinct_scores_give_sorted_prefix() {
        let sel = select_top_k(&pool_of(&[0.3, 0.9, 0.1, 0.5]), 2).unwrap();
        assert_eq!(sel.indices, vec![1, 3]);
        assert_eq!(sel.scores, vec![0.9, 0.5]);
        assert!(!sel.padded);
    }

    #[test]
    fn equal_scores_keep_insertion_order() {
        let sel = select_top_k(&pool_of(&[1.0; 6]), 3).unwrap();
        assert_eq!(sel.indices, vec![0, 1, 2]);
    }

    #[test]
    fn small_pool_is_padded() {
        let sel = select_top_k(&pool_of(&[1.0, 2.0]), 5).unwrap();
        assert!(sel.padded);
        assert_eq!(sel.indices, vec![1, 0]);
    }

    #[test]
    fn non_finite_scores_rejected() {
        assert!(CandidatePool::new().push(vec![0.0], f64::NAN, 0, 0).is_err());
    }

    #[test]
    fn config_validation() {
        let ok = RunConfig::default();
        assert!(ok.validate().is_ok());
        assert!(RunConfig { k: 0, ..ok.clone() }.validate().is_err());
        assert!(RunConfig { batch_size: 0, ..ok.clone() }.validate().is_err());
        assert!(RunConfig { max_failures: 0, ..ok.clone() }.validate().is_err());
        let mut zero_tau = ok.clone();
        zero_tau.penalty.tau = 0.0;
        assert!(zero_tau.validate().is_err());
        zero_tau.baseline = true;
        assert!(zero_tau.validate().is_ok());
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    proptest! {
        #[test]
        fn top_k_matches_full_sort(scores in prop::collection::vec(-5i32..5, 1..60), k in 1usize..70) {
            let s: Vec<f64> = scores.iter().map(|&v| v as f64 * 0.5).collect();
            let sel = select_top_k(&pool_of(&s), k).unwrap();
            let mut idx: Vec<usize> = (0..s.len()).collect();
            // stable sort keeps insertion order among equal scores
            idx.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap());
            idx.truncate(k);
            prop_assert_eq!(sel.indices, idx);
        }
    }
}
