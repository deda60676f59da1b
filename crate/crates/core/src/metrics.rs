//! Quality and diversity metrics over a final candidate set, plus
//! aggregation across seeds, methods and tasks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::OfflineDataset;
use crate::error::{DynamoError, Result};
use crate::matrix::{euclidean, Matrix};

/// The final designs of a run; scores are filled only at final evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub designs: Matrix,
    pub oracle_scores: Option<Vec<f64>>,
    pub decoded_sequences: Option<Vec<String>>,
}

impl CandidateSet {
    pub fn new(designs: Matrix) -> Self {
        CandidateSet {
            designs,
            oracle_scores: None,
            decoded_sequences: None,
        }
    }

    pub fn len(&self) -> usize {
        self.designs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.designs.rows() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMetric {
    Euclidean,
    NormalizedLevenshtein,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub best_at_k: f64,
    pub median_at_k: f64,
    pub pairwise_diversity: f64,
    pub minimum_novelty: f64,
    pub l1_coverage: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub secondary_stds: Option<BTreeMap<String, f64>>,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "best_at_k,median_at_k,pairwise_diversity,minimum_novelty,l1_coverage";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.best_at_k, self.median_at_k, self.pairwise_diversity, self.minimum_novelty, self.l1_coverage
        )
    }
}

fn nonempty(scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(DynamoError::domain("score list is empty"));
    }
    Ok(())
}

pub fn best_at_k(scores: &[f64]) -> Result<f64> {
    nonempty(scores)?;
    Ok(scores.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Lower median: element `floor((k - 1) / 2)` of the ascending sort.
pub fn median_at_k(scores: &[f64]) -> Result<f64> {
    nonempty(scores)?;
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s[(s.len() - 1) / 2])
}

/// Edit distance between two sequences (unit costs).
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance divided by the longer length; two empty strings give 0.
pub fn levenshtein_norm(a: &str, b: &str) -> f64 {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let m = a.len().max(b.len());
    if m == 0 {
        return 0.0;
    }
    levenshtein(&a, &b) as f64 / m as f64
}

fn sequences(cs: &CandidateSet) -> Result<&[String]> {
    cs.decoded_sequences
        .as_deref()
        .ok_or_else(|| DynamoError::domain("Levenshtein distance needs decoded sequences"))
}

/// Mean distance over all ordered pairs `i != j`.
pub fn pairwise_diversity(cs: &CandidateSet, metric: DistanceMetric) -> Result<f64> {
    let k = cs.len();
    if k < 2 {
        return Err(DynamoError::domain("pairwise diversity needs at least two candidates"));
    }
    let mut total = 0.0;
    match metric {
        DistanceMetric::Euclidean => {
            for i in 0..k {
                for j in i + 1..k {
                    total += euclidean(cs.designs.row(i), cs.designs.row(j));
                }
            }
        }
        DistanceMetric::NormalizedLevenshtein => {
            let s = sequences(cs)?;
            for i in 0..k {
                for j in i + 1..k {
                    total += levenshtein_norm(&s[i], &s[j]);
                }
            }
        }
    }
    Ok(2.0 * total / (k * (k - 1)) as f64)
}

/// Mean over candidates of the distance to the nearest dataset design.
pub fn minimum_novelty(cs: &CandidateSet, ds: &OfflineDataset, metric: DistanceMetric) -> Result<f64> {
    if cs.is_empty() {
        return Err(DynamoError::domain("candidate set is empty"));
    }
    let mut total = 0.0;
    match metric {
        DistanceMetric::Euclidean => {
            for x in cs.designs.iter_rows() {
                total += ds
                    .designs()
                    .iter_rows()
                    .map(|y| euclidean(x, y))
                    .fold(f64::INFINITY, f64::min);
            }
        }
        DistanceMetric::NormalizedLevenshtein => {
            let s = sequences(cs)?;
            let data: Vec<String> = ds
                .designs()
                .iter_rows()
                .map(|x| {
                    ds.kind()
                        .decode_string(x)
                        .ok_or_else(|| DynamoError::domain("dataset designs are not sequences"))
                })
                .collect::<Result<_>>()?;
            for a in s {
                total += data.iter().map(|b| levenshtein_norm(a, b)).fold(f64::INFINITY, f64::min);
            }
        }
    }
    Ok(total / cs.len() as f64)
}

/// `(1/d) sum_j max_{i, i'} |x_ij - x_i'j|`.
pub fn l1_coverage(cs: &CandidateSet) -> Result<f64> {
    if cs.len() < 2 {
        return Err(DynamoError::domain("L1 coverage needs at least two candidates"));
    }
    let d = cs.designs.cols();
    let mut total = 0.0;
    for j in 0..d {
        let (lo, hi) = cs
            .designs
            .iter_rows()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r[j]), hi.max(r[j])));
        total += hi - lo;
    }
    Ok(total / d as f64)
}

/// Population standard deviation; a single value has zero spread.
pub fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Computes every metric for a scored candidate set.
pub fn report(cs: &CandidateSet, ds: &OfflineDataset, metric: DistanceMetric) -> Result<MetricReport> {
    let scores = cs
        .oracle_scores
        .as_deref()
        .ok_or_else(|| DynamoError::precondition("candidate set has not been scored"))?;
    let k = cs.len();
    Ok(MetricReport {
        best_at_k: best_at_k(scores)?,
        median_at_k: median_at_k(scores)?,
        pairwise_diversity: if k >= 2 { pairwise_diversity(cs, metric)? } else { 0.0 },
        minimum_novelty: minimum_novelty(cs, ds, metric)?,
        l1_coverage: if k >= 2 { l1_coverage(cs)? } else { 0.0 },
        secondary_stds: None,
    })
}

/// Sample mean with a normal-approximation 95% interval
/// `mean +- 1.96 * s / sqrt(m)`; the half-width is 0 for one value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub half_width: f64,
    pub n: usize,
}

impl MeanCi {
    pub fn from_values(v: &[f64]) -> Result<Self> {
        nonempty(v)?;
        let m = v.len() as f64;
        let mean = v.iter().sum::<f64>() / m;
        let half_width = if v.len() < 2 {
            0.0
        } else {
            let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1.0);
            1.96 * var.sqrt() / m.sqrt()
        };
        Ok(MeanCi {
            mean,
            half_width,
            n: v.len(),
        })
    }

    pub fn lower(&self) -> f64 {
        self.mean - self.half_width
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.half_width
    }
}

/// Mean result of one method on one task, with the offline-dataset
/// reference values used for optimality gaps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodTaskScore {
    pub method: String,
    pub task: String,
    pub best_at_k: f64,
    pub pairwise_diversity: f64,
    pub dataset_best: f64,
    pub dataset_pd: f64,
}

/// Average rank (1 = best, ties share the mean rank) and average gap to the
/// dataset, for quality and for diversity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub rank_best: f64,
    pub rank_pd: f64,
    pub gap_best: f64,
    pub gap_pd: f64,
    pub tasks: usize,
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            out[o] = r;
        }
        i = j + 1;
    }
    out
}

pub fn rank_and_gap(rows: &[MethodTaskScore]) -> Vec<MethodSummary> {
    let mut tasks: BTreeMap<&str, Vec<&MethodTaskScore>> = BTreeMap::new();
    for r in rows {
        tasks.entry(r.task.as_str()).or_default().push(r);
    }
    let mut acc: BTreeMap<&str, [f64; 5]> = BTreeMap::new();
    for entries in tasks.values() {
        let rb = ranks(&entries.iter().map(|e| e.best_at_k).collect::<Vec<_>>());
        let rp = ranks(&entries.iter().map(|e| e.pairwise_diversity).collect::<Vec<_>>());
        for (i, e) in entries.iter().enumerate() {
            let a = acc.entry(e.method.as_str()).or_default();
            a[0] += rb[i];
            a[1] += rp[i];
            a[2] += e.best_at_k - e.dataset_best;
            a[3] += e.pairwise_diversity - e.dataset_pd;
            a[4] += 1.0;
        }
    }
    acc.into_iter()
        .map(|(m, a)| MethodSummary {
            method: m.to_string(),
            rank_best: a[0] / a[4],
            rank_pd: a[1] / a[4],
            gap_best: a[2] / a[4],
            gap_pd: a[3] / a[4],
            tasks: a[4] as usize,
        })
        .collect()
}
