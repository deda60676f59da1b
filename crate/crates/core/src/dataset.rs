//! Offline datasets, score normalization and the τ-weighted reference
//! distribution over dataset designs.
//!
//! Raw oracle scores are normalized once, at construction, to
//! `(y - y_min) / (y_max - y_min)` using the dataset's own extremes. Every
//! downstream quantity (τ-weights, surrogate targets, reported oracle scores)
//! is expressed in these normalized units.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DynamoError, Result};
use crate::matrix::Matrix;

/// Default per-dimension search bounds for tasks that do not declare any.
pub const DEFAULT_LOWER: f64 = -4.0;
pub const DEFAULT_UPPER: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum DesignKind {
    Continuous,
    /// Sequences stored as concatenated one-hot blocks, one block of
    /// `alphabet.len()` entries per position.
    DiscreteRelaxed { alphabet: String, length: usize },
}

impl DesignKind {
    /// Decodes a relaxed one-hot vector to symbol indices by per-position
    /// argmax. Ties resolve to the lowest symbol index.
    pub fn decode(&self, x: &[f64]) -> Option<Vec<usize>> {
        match self {
            DesignKind::Continuous => None,
            DesignKind::DiscreteRelaxed { alphabet, length } => {
                let a = alphabet.chars().count();
                Some(decode_one_hot(x, *length, a))
            }
        }
    }

    /// Like [`DesignKind::decode`] but maps indices back to alphabet symbols.
    pub fn decode_string(&self, x: &[f64]) -> Option<String> {
        match self {
            DesignKind::Continuous => None,
            DesignKind::DiscreteRelaxed { alphabet, .. } => {
                let symbols: Vec<char> = alphabet.chars().collect();
                self.decode(x).map(|idx| idx.into_iter().map(|i| symbols[i]).collect())
            }
        }
    }
}

pub(crate) fn decode_one_hot(x: &[f64], length: usize, alphabet: usize) -> Vec<usize> {
    (0..length)
        .map(|p| {
            let block = &x[p * alphabet..(p + 1) * alphabet];
            let mut best = 0;
            for (j, &v) in block.iter().enumerate().skip(1) {
                if v > block[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OfflineDataset {
    designs: Matrix,
    raw_scores: Vec<f64>,
    norm_scores: Vec<f64>,
    y_min: f64,
    y_max: f64,
    lower_bound: Vec<f64>,
    upper_bound: Vec<f64>,
    kind: DesignKind,
}

impl OfflineDataset {
    pub fn new(
        designs: Matrix,
        raw_scores: Vec<f64>,
        lower_bound: Vec<f64>,
        upper_bound: Vec<f64>,
        kind: DesignKind,
    ) -> Result<Self> {
        let n = designs.rows();
        let d = designs.cols();
        if n < 2 {
            return Err(DynamoError::DegenerateDataset(format!(
                "need at least 2 designs, got {n}"
            )));
        }
        if d == 0 {
            return Err(DynamoError::domain("designs must have at least one dimension"));
        }
        if raw_scores.len() != n {
            return Err(DynamoError::domain(format!(
                "{} scores for {n} designs",
                raw_scores.len()
            )));
        }
        if lower_bound.len() != d || upper_bound.len() != d {
            return Err(DynamoError::domain("bounds must have one entry per dimension"));
        }
        for j in 0..d {
            if !(lower_bound[j] < upper_bound[j]) {
                return Err(DynamoError::domain(format!(
                    "dimension {j}: lower bound {} not below upper bound {}",
                    lower_bound[j], upper_bound[j]
                )));
            }
        }
        for (i, row) in designs.iter_rows().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() || v < lower_bound[j] || v > upper_bound[j] {
                    return Err(DynamoError::domain(format!(
                        "design {i} coordinate {j} = {v} outside [{}, {}]",
                        lower_bound[j], upper_bound[j]
                    )));
                }
            }
        }
        if let Some(i) = raw_scores.iter().position(|y| !y.is_finite()) {
            return Err(DynamoError::domain(format!("score {i} is not finite")));
        }
        let y_min = raw_scores.iter().copied().fold(f64::INFINITY, f64::min);
        let y_max = raw_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(y_max > y_min) {
            return Err(DynamoError::DegenerateDataset(
                "all scores are equal; normalization is undefined".into(),
            ));
        }
        let span = y_max - y_min;
        let norm_scores = raw_scores.iter().map(|y| (y - y_min) / span).collect();
        Ok(OfflineDataset {
            designs,
            raw_scores,
            norm_scores,
            y_min,
            y_max,
            lower_bound,
            upper_bound,
            kind,
        })
    }

    pub fn len(&self) -> usize {
        self.designs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.designs.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.designs.cols()
    }

    pub fn designs(&self) -> &Matrix {
        &self.designs
    }

    pub fn raw_scores(&self) -> &[f64] {
        &self.raw_scores
    }

    pub fn norm_scores(&self) -> &[f64] {
        &self.norm_scores
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn lower_bound(&self) -> &[f64] {
        &self.lower_bound
    }

    pub fn upper_bound(&self) -> &[f64] {
        &self.upper_bound
    }

    pub fn kind(&self) -> &DesignKind {
        &self.kind
    }

    /// Maps a raw oracle value into this dataset's normalized units.
    pub fn normalize(&self, raw: f64) -> f64 {
        (raw - self.y_min) / (self.y_max - self.y_min)
    }

    pub fn denormalize(&self, norm: f64) -> f64 {
        norm * (self.y_max - self.y_min) + self.y_min
    }

    /// Loads a dataset from CSV or JSON.
    pub fn load(path: &Path, format: DatasetFormat) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        match format {
            DatasetFormat::Csv => Self::from_csv_str(&text),
            DatasetFormat::Json => Self::from_json_str(&text),
        }
    }

    pub fn save(&self, path: &Path, format: DatasetFormat) -> Result<()> {
        let text = match format {
            DatasetFormat::Csv => self.to_csv_string(),
            DatasetFormat::Json => self.to_json_string()?,
        };
        fs::write(path, text)?;
        Ok(())
    }

    /// Parses the CSV format: optional `#` directive lines, a header
    /// `x0,...,x{d-1},y`, then one row per design. Recognized directives:
    ///
    /// ```text
    /// # bounds: -5:10,0:15
    /// # discrete: alphabet=ACGT length=8
    /// ```
    ///
    /// Row indices in parse errors count data rows from 0.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut bounds: Option<(Vec<f64>, Vec<f64>)> = None;
        let mut kind = DesignKind::Continuous;
        for line in text.lines() {
            let Some(directive) = line.trim().strip_prefix('#') else {
                continue;
            };
            let directive = directive.trim();
            if let Some(spec) = directive.strip_prefix("bounds:") {
                bounds = Some(parse_bounds(spec)?);
            } else if let Some(spec) = directive.strip_prefix("discrete:") {
                kind = parse_discrete(spec)?;
            }
        }

        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| DynamoError::Parse {
                row: 0,
                message: format!("bad header: {e}"),
            })?
            .clone();
        if header.len() < 2 {
            return Err(DynamoError::Parse {
                row: 0,
                message: "header must list at least one design column and a score".into(),
            });
        }
        let d = header.len() - 1;
        let mut rows: Vec<f64> = Vec::new();
        let mut scores = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| DynamoError::Parse {
                row: i,
                message: e.to_string(),
            })?;
            if record.len() != d + 1 {
                return Err(DynamoError::Parse {
                    row: i,
                    message: format!("expected {} fields, found {}", d + 1, record.len()),
                });
            }
            for (j, field) in record.iter().enumerate() {
                let v: f64 = field.parse().map_err(|_| DynamoError::Parse {
                    row: i,
                    message: format!("field {j} is not a number: {field:?}"),
                })?;
                if j < d {
                    rows.push(v);
                } else {
                    scores.push(v);
                }
            }
        }
        let n = scores.len();
        let designs = Matrix::from_vec(n, d, rows)?;
        let (lower, upper) =
            bounds.unwrap_or_else(|| (vec![DEFAULT_LOWER; d], vec![DEFAULT_UPPER; d]));
        if lower.len() != d {
            return Err(DynamoError::Parse {
                row: 0,
                message: format!("bounds declare {} dimensions, header has {d}", lower.len()),
            });
        }
        Self::new(designs, scores, lower, upper, kind)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        let bounds: Vec<String> = self
            .lower_bound
            .iter()
            .zip(&self.upper_bound)
            .map(|(l, u)| format!("{l}:{u}"))
            .collect();
        let _ = writeln!(out, "# bounds: {}", bounds.join(","));
        if let DesignKind::DiscreteRelaxed { alphabet, length } = &self.kind {
            let _ = writeln!(out, "# discrete: alphabet={alphabet} length={length}");
        }
        let header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        let _ = writeln!(out, "{},y", header.join(","));
        for (row, y) in self.designs.iter_rows().zip(&self.raw_scores) {
            for v in row {
                let _ = write!(out, "{v},");
            }
            let _ = writeln!(out, "{y}");
        }
        out
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: DatasetFile = serde_json::from_str(text)?;
        let d = file.designs.first().map(|r| r.len()).unwrap_or(0);
        for (i, r) in file.designs.iter().enumerate() {
            if r.len() != d {
                return Err(DynamoError::Parse {
                    row: i,
                    message: format!("expected {d} design values, found {}", r.len()),
                });
            }
        }
        let designs = Matrix::from_rows(&file.designs)?;
        let lower = file.lower_bound.unwrap_or_else(|| vec![DEFAULT_LOWER; d]);
        let upper = file.upper_bound.unwrap_or_else(|| vec![DEFAULT_UPPER; d]);
        Self::new(
            designs,
            file.scores,
            lower,
            upper,
            file.kind.unwrap_or(DesignKind::Continuous),
        )
    }

    pub fn to_json_string(&self) -> Result<String> {
        let file = DatasetFile {
            designs: self.designs.to_rows(),
            scores: self.raw_scores.clone(),
            lower_bound: Some(self.lower_bound.clone()),
            upper_bound: Some(self.upper_bound.clone()),
            kind: Some(self.kind.clone()),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetFormat {
    Csv,
    Json,
}

impl DatasetFormat {
    /// Picks the format from a file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => DatasetFormat::Json,
            _ => DatasetFormat::Csv,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    designs: Vec<Vec<f64>>,
    scores: Vec<f64>,
    #[serde(default)]
    lower_bound: Option<Vec<f64>>,
    #[serde(default)]
    upper_bound: Option<Vec<f64>>,
    #[serde(default)]
    kind: Option<DesignKind>,
}

fn parse_bounds(spec: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let bad = |msg: String| DynamoError::Parse { row: 0, message: msg };
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    for pair in spec.split(',') {
        let (l, u) = pair
            .trim()
            .split_once(':')
            .ok_or_else(|| bad(format!("bounds entry {pair:?} is not lo:hi")))?;
        lower.push(l.trim().parse().map_err(|_| bad(format!("bad lower bound {l:?}")))?);
        upper.push(u.trim().parse().map_err(|_| bad(format!("bad upper bound {u:?}")))?);
    }
    Ok((lower, upper))
}

fn parse_discrete(spec: &str) -> Result<DesignKind> {
    let mut alphabet = None;
    let mut length = None;
    for kv in spec.split_whitespace() {
        match kv.split_once('=') {
            Some(("alphabet", v)) => alphabet = Some(v.to_string()),
            Some(("length", v)) => length = v.parse().ok(),
            _ => {}
        }
    }
    match (alphabet, length) {
        (Some(alphabet), Some(length)) => Ok(DesignKind::DiscreteRelaxed { alphabet, length }),
        _ => Err(DynamoError::Parse {
            row: 0,
            message: "discrete directive needs alphabet=... and length=...".into(),
        }),
    }
}

/// Normalized weights `exp(τ·y_i) / Σ_j exp(τ·y_j)` over dataset designs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauWeights {
    tau: f64,
    weights: Vec<f64>,
    log_partition: f64,
}

impl TauWeights {
    /// Weights over arbitrary scores, computed with max-subtraction.
    pub fn from_scores(scores: &[f64], tau: f64) -> Result<Self> {
        if !(tau >= 0.0) || !tau.is_finite() {
            return Err(DynamoError::domain(format!("tau must be finite and >= 0, got {tau}")));
        }
        if scores.is_empty() {
            return Err(DynamoError::domain("no scores to weight"));
        }
        let max = scores
            .iter()
            .map(|y| tau * y)
            .fold(f64::NEG_INFINITY, f64::max);
        let unnorm: Vec<f64> = scores.iter().map(|y| (tau * y - max).exp()).collect();
        let sum: f64 = unnorm.iter().sum();
        let weights = unnorm.iter().map(|w| w / sum).collect();
        Ok(TauWeights {
            tau,
            weights,
            log_partition: max + sum.ln(),
        })
    }

    /// Uniform weights over `n` items.
    pub fn uniform(n: usize) -> Self {
        TauWeights {
            tau: 0.0,
            weights: vec![1.0 / n as f64; n],
            log_partition: (n as f64).ln(),
        }
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_partition(&self) -> f64 {
        self.log_partition
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `Σ_i w_i · values_i`.
    pub fn expectation(&self, values: &[f64]) -> Result<f64> {
        if values.len() != self.weights.len() {
            return Err(DynamoError::domain(format!(
                "{} values for {} weights",
                values.len(),
                self.weights.len()
            )));
        }
        Ok(self.weights.iter().zip(values).map(|(w, v)| w * v).sum())
    }
}

/// τ-weighting of a dataset's normalized scores.
pub fn tau_weight(ds: &OfflineDataset, tau: f64) -> Result<TauWeights> {
    TauWeights::from_scores(ds.norm_scores(), tau)
}

pub fn weighted_expectation(tw: &TauWeights, values: &[f64]) -> Result<f64> {
    tw.expectation(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small() -> OfflineDataset {
        let designs = Matrix::from_rows(&[[0.0, 1.0], [1.0, 2.0], [2.0, 3.0]]).unwrap();
        OfflineDataset::new(
            designs,
            vec![0.0, 5.0, 10.0],
            vec![-4.0; 2],
            vec![4.0; 2],
            DesignKind::Continuous,
        )
        .unwrap()
    }

    #[test]
    fn three_row_csv_normalizes_endpoints() {
        let csv = "x0,y\n0.5,0\n1.5,5\n2.5,10\n";
        let ds = OfflineDataset::from_csv_str(csv).unwrap();
        assert_eq!(ds.norm_scores(), &[0.0, 0.5, 1.0]);
        assert_eq!(ds.lower_bound(), &[-4.0]);
        assert_eq!(ds.upper_bound(), &[4.0]);
    }

    #[test]
    fn wrong_arity_names_the_row() {
        let csv = "x0,x1,y\n0,0,1\n1,1,2\n1,3\n";
        match OfflineDataset::from_csv_str(csv) {
            Err(DynamoError::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_field_is_a_parse_error() {
        let csv = "x0,y\n0,1\nabc,2\n";
        assert!(matches!(
            OfflineDataset::from_csv_str(csv),
            Err(DynamoError::Parse { row: 1, .. })
        ));
    }

    #[test]
    fn constant_scores_are_degenerate() {
        let csv = "x0,y\n0,3\n1,3\n";
        assert!(matches!(
            OfflineDataset::from_csv_str(csv),
            Err(DynamoError::DegenerateDataset(_))
        ));
    }

    #[test]
    fn bounds_directive_overrides_default() {
        let csv = "# bounds: -5:10,0:15\nx0,x1,y\n9,14,1\n-5,0,2\n";
        let ds = OfflineDataset::from_csv_str(csv).unwrap();
        assert_eq!(ds.lower_bound(), &[-5.0, 0.0]);
        assert_eq!(ds.upper_bound(), &[10.0, 15.0]);
    }

    #[test]
    fn out_of_bounds_design_rejected() {
        let csv = "x0,y\n5,1\n0,2\n";
        assert!(matches!(
            OfflineDataset::from_csv_str(csv),
            Err(DynamoError::Domain(_))
        ));
    }

    #[test]
    fn csv_and_json_round_trip() {
        let ds = small();
        let back = OfflineDataset::from_csv_str(&ds.to_csv_string()).unwrap();
        assert_eq!(back, ds);
        let back = OfflineDataset::from_json_str(&ds.to_json_string().unwrap()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn file_round_trip_by_extension() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small();
        for name in ["d.csv", "d.json"] {
            let p = dir.path().join(name);
            let fmt = DatasetFormat::from_path(&p);
            ds.save(&p, fmt).unwrap();
            assert_eq!(OfflineDataset::load(&p, fmt).unwrap(), ds);
        }
    }

    #[test]
    fn discrete_directive_round_trips() {
        let designs = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let kind = DesignKind::DiscreteRelaxed {
            alphabet: "AB".into(),
            length: 1,
        };
        let ds = OfflineDataset::new(designs, vec![1.0, 2.0], vec![0.0; 2], vec![1.0; 2], kind)
            .unwrap();
        let back = OfflineDataset::from_csv_str(&ds.to_csv_string()).unwrap();
        assert_eq!(back.kind(), ds.kind());
        assert_eq!(back.kind().decode(&[0.2, 0.7]), Some(vec![1]));
    }

    #[test]
    fn tau_zero_is_uniform() {
        let tw = tau_weight(&small(), 0.0).unwrap();
        for w in tw.weights() {
            assert_abs_diff_eq!(*w, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn tau_one_on_log_two() {
        let tw = TauWeights::from_scores(&[0.0, std::f64::consts::LN_2], 1.0).unwrap();
        assert_abs_diff_eq!(tw.weights()[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(tw.weights()[1], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(tw.log_partition(), 3.0f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn negative_tau_rejected() {
        assert!(matches!(
            tau_weight(&small(), -0.1),
            Err(DynamoError::Domain(_))
        ));
    }

    #[test]
    fn weighted_expectations() {
        let tw = TauWeights::uniform(3);
        assert_abs_diff_eq!(weighted_expectation(&tw, &[1.0, 2.0, 3.0]).unwrap(), 2.0);
        let tw = TauWeights::from_scores(&[0.0, std::f64::consts::LN_2], 1.0).unwrap();
        assert_abs_diff_eq!(tw.expectation(&[3.0, 0.0]).unwrap(), 1.0, epsilon = 1e-15);
        assert!(tw.expectation(&[1.0]).is_err());
    }

    #[test]
    fn large_tau_is_finite() {
        let scores: Vec<f64> = (0..200).map(|i| i as f64 / 199.0).collect();
        let tw = TauWeights::from_scores(&scores, 100.0).unwrap();
        assert!(tw.weights().iter().all(|w| w.is_finite() && *w > 0.0));
        assert!(tw.log_partition().is_finite());
        assert_abs_diff_eq!(tw.weights().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }
}
