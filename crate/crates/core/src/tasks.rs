//! Synthetic tasks with exact analytic oracles and offline-dataset
//! generators. Oracle calls are counted so callers can audit the budget.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{decode_one_hot, DesignKind, OfflineDataset, DEFAULT_LOWER, DEFAULT_UPPER};
use crate::error::{DynamoError, Result};
use crate::matrix::{euclidean, Matrix};
use crate::optimizers::sobol_init;
use crate::rng::{stream_rng, Stream};

pub const BRANIN_LOWER: [f64; 2] = [-5.0, 0.0];
pub const BRANIN_UPPER: [f64; 2] = [10.0, 15.0];

/// Negated Branin function on `[-5, 10] x [0, 15]`; its three global maxima
/// all equal about `-0.397887`.
pub fn branin_max(x: &[f64]) -> Result<f64> {
    if x.len() != 2 {
        return Err(DynamoError::domain(format!("Branin takes 2 inputs, got {}", x.len())));
    }
    for j in 0..2 {
        if !(x[j] >= BRANIN_LOWER[j] && x[j] <= BRANIN_UPPER[j]) {
            return Err(DynamoError::domain(format!(
                "Branin input {j} = {} outside [{}, {}]",
                x[j], BRANIN_LOWER[j], BRANIN_UPPER[j]
            )));
        }
    }
    Ok(branin_unchecked(x[0], x[1]))
}

fn branin_unchecked(x1: f64, x2: f64) -> f64 {
    let b = 5.1 / (4.0 * PI * PI);
    let c = 5.0 / PI;
    let t = 1.0 / (8.0 * PI);
    let q = x2 - b * x1 * x1 + c * x1 - 6.0;
    -(q * q + 10.0 * (1.0 - t) * x1.cos() + 10.0)
}

/// One Gaussian bump of a multi-modal landscape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub center: Vec<f64>,
    pub height: f64,
    pub width: f64,
}

/// `sum_k height_k * exp(-|x - center_k|^2 / (2 width_k^2))`.
pub fn gaussian_modes(x: &[f64], modes: &[Mode]) -> Result<f64> {
    let mut total = 0.0;
    for m in modes {
        if !(m.width > 0.0) {
            return Err(DynamoError::domain("mode widths must be positive"));
        }
        if m.center.len() != x.len() {
            return Err(DynamoError::domain("mode center dimension mismatch"));
        }
        let r2: f64 = x.iter().zip(&m.center).map(|(a, b)| (a - b) * (a - b)).sum();
        total += m.height * (-r2 / (2.0 * m.width * m.width)).exp();
    }
    Ok(total)
}

/// Three equal, well separated peaks in `[-4, 4]^2`.
pub fn default_modes() -> Vec<Mode> {
    [[-2.5, -2.5], [2.5, -2.5], [0.0, 2.5]]
        .iter()
        .map(|c| Mode {
            center: c.to_vec(),
            height: 1.0,
            width: 1.2,
        })
        .collect()
}

/// Position-weight-matrix plus motif-count scoring of short sequences,
/// normalized by the largest value either part could contribute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqToy {
    pub alphabet: String,
    pub pwm: Vec<Vec<f64>>,
    pub motif: Vec<usize>,
    pub bonus: f64,
}

impl Default for SeqToy {
    fn default() -> Self {
        SeqToy {
            alphabet: "ACGT".into(),
            pwm: vec![
                vec![0.1, 0.9, 0.3, 0.5],
                vec![0.7, 0.2, 0.6, 0.1],
                vec![0.4, 0.3, 0.8, 0.2],
                vec![0.2, 0.6, 0.1, 0.9],
                vec![0.9, 0.1, 0.4, 0.3],
                vec![0.3, 0.8, 0.2, 0.5],
                vec![0.5, 0.4, 0.7, 0.1],
                vec![0.1, 0.3, 0.5, 0.8],
            ],
            motif: vec![3, 0, 3, 0],
            bonus: 0.55,
        }
    }
}

impl SeqToy {
    pub fn length(&self) -> usize {
        self.pwm.len()
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet.chars().count()
    }

    fn motif_hits(&self, seq: &[usize]) -> usize {
        let m = self.motif.len();
        if m == 0 || seq.len() < m {
            return 0;
        }
        seq.windows(m).filter(|w| *w == self.motif.as_slice()).count()
    }

    /// Upper bound used for normalization: best PWM entry per position plus
    /// the bonus for as many (overlapping) motif placements as fit.
    pub fn bound(&self) -> f64 {
        let pwm: f64 = self.pwm.iter().map(|r| r.iter().copied().fold(f64::MIN, f64::max)).sum();
        let slots = (self.length() + 1).saturating_sub(self.motif.len());
        let period = self.motif_period();
        let max_hits = if slots == 0 { 0 } else { 1 + (slots - 1) / period };
        pwm + self.bonus * max_hits as f64
    }

    /// Smallest shift at which the motif can overlap itself.
    fn motif_period(&self) -> usize {
        let m = self.motif.len();
        (1..m)
            .find(|&p| self.motif[p..] == self.motif[..m - p])
            .unwrap_or(m.max(1))
    }

    pub fn score_sequence(&self, seq: &[usize]) -> f64 {
        let pwm: f64 = seq.iter().zip(&self.pwm).map(|(a, row)| row[*a]).sum();
        (pwm + self.bonus * self.motif_hits(seq) as f64) / self.bound()
    }

    pub fn decode(&self, x: &[f64]) -> Vec<usize> {
        decode_one_hot(x, self.length(), self.alphabet_size())
    }
}

/// Scores a relaxed one-hot design by decoding it first.
pub fn seq_toy(x: &[f64], params: &SeqToy) -> Result<f64> {
    let expect = params.length() * params.alphabet_size();
    if x.len() != expect {
        return Err(DynamoError::domain(format!("expected {expect} relaxed entries, got {}", x.len())));
    }
    Ok(params.score_sequence(&params.decode(x)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Oracle {
    Branin,
    GaussianModes { modes: Vec<Mode> },
    SeqToy(SeqToy),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum SecondaryOracle {
    DistanceTo { point: Vec<f64> },
    GaussianModes { modes: Vec<Mode> },
}

impl SecondaryOracle {
    fn eval(&self, x: &[f64]) -> Result<f64> {
        match self {
            SecondaryOracle::DistanceTo { point } => Ok(euclidean(x, point)),
            SecondaryOracle::GaussianModes { modes } => gaussian_modes(x, modes),
        }
    }
}

/// A named optimization task. The oracle is reachable only through
/// [`Task::evaluate`], which counts calls.
#[derive(Debug)]
pub struct Task {
    name: String,
    lower: Vec<f64>,
    upper: Vec<f64>,
    kind: DesignKind,
    oracle: Oracle,
    secondaries: Vec<SecondaryOracle>,
    calls: AtomicU64,
}

impl Clone for Task {
    fn clone(&self) -> Self {
        Task {
            name: self.name.clone(),
            lower: self.lower.clone(),
            upper: self.upper.clone(),
            kind: self.kind.clone(),
            oracle: self.oracle.clone(),
            secondaries: self.secondaries.clone(),
            calls: AtomicU64::new(0),
        }
    }
}

pub const TASK_NAMES: [&str; 3] = ["branin", "gaussian-modes", "seq-toy"];

impl Task {
    pub fn new(
        name: impl Into<String>,
        lower: Vec<f64>,
        upper: Vec<f64>,
        kind: DesignKind,
        oracle: Oracle,
        secondaries: Vec<SecondaryOracle>,
    ) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(DynamoError::domain("task bounds must be non-empty and equal length"));
        }
        Ok(Task {
            name: name.into(),
            lower,
            upper,
            kind,
            oracle,
            secondaries,
            calls: AtomicU64::new(0),
        })
    }

    pub fn branin() -> Self {
        Task::new(
            "branin",
            BRANIN_LOWER.to_vec(),
            BRANIN_UPPER.to_vec(),
            DesignKind::Continuous,
            Oracle::Branin,
            Vec::new(),
        )
        .expect("static task is valid")
    }

    pub fn gaussian_modes(modes: Vec<Mode>) -> Result<Self> {
        let d = modes.first().map(|m| m.center.len()).unwrap_or(0);
        if d == 0 {
            return Err(DynamoError::domain("at least one mode is required"));
        }
        let first = modes[0].center.clone();
        let rest: Vec<Mode> = modes[1..].to_vec();
        let mut secondaries = vec![SecondaryOracle::DistanceTo { point: first }];
        if !rest.is_empty() {
            secondaries.push(SecondaryOracle::GaussianModes { modes: rest });
        }
        Task::new(
            "gaussian-modes",
            vec![DEFAULT_LOWER; d],
            vec![DEFAULT_UPPER; d],
            DesignKind::Continuous,
            Oracle::GaussianModes { modes },
            secondaries,
        )
    }

    pub fn seq_toy(params: SeqToy) -> Self {
        let d = params.length() * params.alphabet_size();
        let kind = DesignKind::DiscreteRelaxed {
            alphabet: params.alphabet.clone(),
            length: params.length(),
        };
        Task::new("seq-toy", vec![0.0; d], vec![1.0; d], kind, Oracle::SeqToy(params), Vec::new())
            .expect("static task is valid")
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "branin" => Ok(Task::branin()),
            "gaussian-modes" => Task::gaussian_modes(default_modes()),
            "seq-toy" => Ok(Task::seq_toy(SeqToy::default())),
            other => Err(DynamoError::Unsupported(format!(
                "unknown task '{other}' (known: {})",
                TASK_NAMES.join(", ")
            ))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn kind(&self) -> &DesignKind {
        &self.kind
    }

    pub fn has_secondaries(&self) -> bool {
        !self.secondaries.is_empty()
    }

    /// Mode list for Gaussian-mode tasks.
    pub fn modes(&self) -> Option<&[Mode]> {
        match &self.oracle {
            Oracle::GaussianModes { modes } => Some(modes),
            _ => None,
        }
    }

    /// Number of oracle evaluations made so far.
    pub fn oracle_calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    /// Evaluates the oracle on one design.
    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(DynamoError::domain(format!(
                "design has length {}, task '{}' has dimension {}",
                x.len(),
                self.name,
                self.dim()
            )));
        }
        for (j, ((v, lo), hi)) in x.iter().zip(&self.lower).zip(&self.upper).enumerate() {
            if !(*v >= *lo && *v <= *hi) {
                return Err(DynamoError::domain(format!("coordinate {j} = {v} outside [{lo}, {hi}]")));
            }
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        match &self.oracle {
            Oracle::Branin => branin_max(x),
            Oracle::GaussianModes { modes } => gaussian_modes(x, modes),
            Oracle::SeqToy(p) => seq_toy(x, p),
        }
    }

    pub fn evaluate_batch(&self, xs: &Matrix) -> Result<Vec<f64>> {
        xs.iter_rows().map(|x| self.evaluate(x)).collect()
    }
}

/// Values of every secondary objective on every design, one list per
/// objective.
pub fn secondary_eval(task: &Task, designs: &Matrix) -> Result<Vec<Vec<f64>>> {
    if task.secondaries.is_empty() {
        return Err(DynamoError::Unsupported(format!(
            "task '{}' has no secondary objectives",
            task.name
        )));
    }
    task.secondaries
        .iter()
        .map(|s| designs.iter_rows().map(|x| s.eval(x)).collect())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Sampler {
    Sobol,
    Gaussian { center: Vec<f64>, sigma: f64 },
}

/// Samples `n` designs, scores them with the oracle and optionally keeps
/// only the `floor(ceiling * n)` lowest-scoring ones (in sampling order).
pub fn generate_offline(
    task: &Task,
    n: usize,
    sampler: &Sampler,
    ceiling: Option<f64>,
    seed: u64,
) -> Result<OfflineDataset> {
    if n < 2 {
        return Err(DynamoError::precondition("dataset needs n >= 2"));
    }
    let d = task.dim();
    let designs = match sampler {
        Sampler::Sobol => sobol_init(d, n, task.lower(), task.upper(), seed)?,
        Sampler::Gaussian { center, sigma } => {
            if center.len() != d {
                return Err(DynamoError::domain("sampler center dimension mismatch"));
            }
            let normal = Normal::new(0.0, *sigma)
                .map_err(|e| DynamoError::domain(format!("invalid sampler width: {e}")))?;
            let mut rng = stream_rng(seed, Stream::Dataset, 0);
            let mut data = Vec::with_capacity(n * d);
            for _ in 0..n {
                for j in 0..d {
                    let v: f64 = center[j] + normal.sample(&mut rng);
                    data.push(v.clamp(task.lower()[j], task.upper()[j]));
                }
            }
            Matrix::from_vec(n, d, data)?
        }
    };
    let scores = task.evaluate_batch(&designs)?;
    let (designs, scores) = match ceiling {
        None => (designs, scores),
        Some(q) => {
            if !(q > 0.0 && q <= 1.0) {
                return Err(DynamoError::domain(format!("ceiling quantile must lie in (0, 1], got {q}")));
            }
            let keep = (q * n as f64).floor() as usize;
            if keep < 2 {
                return Err(DynamoError::DegenerateDataset(format!(
                    "ceiling {q} leaves {keep} of {n} designs"
                )));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
            let mut kept = order[..keep].to_vec();
            kept.sort_unstable();
            let s = kept.iter().map(|&i| scores[i]).collect();
            (designs.select_rows(&kept), s)
        }
    };
    OfflineDataset::new(
        designs,
        scores,
        task.lower().to_vec(),
        task.upper().to_vec(),
        task.kind().clone(),
    )
}
