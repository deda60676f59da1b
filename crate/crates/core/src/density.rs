//! Weighted Gaussian product-kernel density estimates and a plug-in KL
//! estimator built on them.

use serde::{Deserialize, Serialize};

use crate::error::{DynamoError, Result};
use crate::matrix::Matrix;

/// Smallest bandwidth used when a dimension has no spread.
pub const BANDWIDTH_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandwidthRule {
    Silverman,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdeModel {
    points: Matrix,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    bandwidth: Vec<f64>,
    /// Set when at least one bandwidth was raised to [`BANDWIDTH_FLOOR`].
    floored: bool,
    log_norm: f64,
}

/// Fits a weighted Gaussian KDE. Weights are renormalized to sum to one.
///
/// Silverman's rule sets `h_j = sigma_j * (4 / ((d + 2) m))^(1 / (d + 4))`
/// with `sigma_j` the weighted standard deviation of dimension `j`.
pub fn fit_kde(points: &Matrix, weights: &[f64], rule: BandwidthRule) -> Result<KdeModel> {
    let m = points.rows();
    let d = points.cols();
    if m == 0 || d == 0 {
        return Err(DynamoError::precondition("KDE needs at least one point"));
    }
    if weights.len() != m {
        return Err(DynamoError::domain(format!(
            "{} weights for {} points",
            weights.len(),
            m
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(DynamoError::domain("KDE weights must be finite and nonnegative"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(DynamoError::domain("KDE weights are all zero"));
    }
    let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let mut floored = false;
    let bandwidth = match rule {
        BandwidthRule::Fixed(h) => {
            if !(h > 0.0 && h.is_finite()) {
                return Err(DynamoError::domain(format!("fixed bandwidth must be positive, got {h}")));
            }
            vec![h; d]
        }
        BandwidthRule::Silverman => {
            if m < 2 {
                return Err(DynamoError::precondition("Silverman bandwidth needs at least two points"));
            }
            let factor = (4.0 / ((d as f64 + 2.0) * m as f64)).powf(1.0 / (d as f64 + 4.0));
            (0..d)
                .map(|j| {
                    let mean: f64 = points.iter_rows().zip(&weights).map(|(r, w)| w * r[j]).sum();
                    let var: f64 = points
                        .iter_rows()
                        .zip(&weights)
                        .map(|(r, w)| w * (r[j] - mean) * (r[j] - mean))
                        .sum();
                    let h = var.sqrt() * factor;
                    if h < BANDWIDTH_FLOOR {
                        floored = true;
                        BANDWIDTH_FLOOR
                    } else {
                        h
                    }
                })
                .collect()
        }
    };
    let log_norm = -bandwidth
        .iter()
        .map(|h| (h * (2.0 * std::f64::consts::PI).sqrt()).ln())
        .sum::<f64>();
    let log_weights = weights.iter().map(|w| w.ln()).collect();
    Ok(KdeModel {
        points: points.clone(),
        weights,
        log_weights,
        bandwidth,
        floored,
        log_norm,
    })
}

impl KdeModel {
    pub fn points(&self) -> &Matrix {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bandwidth(&self) -> &[f64] {
        &self.bandwidth
    }

    pub fn floored(&self) -> bool {
        self.floored
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    /// Per-component log terms `log w_i - sum_j (x_j - p_ij)^2 / (2 h_j^2)`.
    fn component_logs(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (p, lw) in self.points.iter_rows().zip(&self.log_weights) {
            let mut q = 0.0;
            for ((xj, pj), h) in x.iter().zip(p).zip(&self.bandwidth) {
                let z = (xj - pj) / h;
                q += z * z;
            }
            out.push(lw - 0.5 * q);
        }
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(DynamoError::domain(format!(
                "query has length {}, KDE dimension is {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        let mut logs = Vec::with_capacity(self.points.rows());
        self.component_logs(x, &mut logs);
        Ok(log_sum_exp(&logs) + self.log_norm)
    }

    /// Log-density and its analytic gradient in `x`.
    pub fn log_density_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check(x)?;
        let mut logs = Vec::with_capacity(self.points.rows());
        self.component_logs(x, &mut logs);
        let lse = log_sum_exp(&logs);
        let mut grad = vec![0.0; x.len()];
        for (p, l) in self.points.iter_rows().zip(&logs) {
            let r = (l - lse).exp();
            if r == 0.0 {
                continue;
            }
            for j in 0..x.len() {
                grad[j] -= r * (x[j] - p[j]) / (self.bandwidth[j] * self.bandwidth[j]);
            }
        }
        Ok((lse + self.log_norm, grad))
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Free-function form of [`KdeModel::log_density`].
pub fn log_density(kde: &KdeModel, x: &[f64]) -> Result<f64> {
    kde.log_density(x)
}

/// Plug-in estimate `mean_i [log q(x_i) - log p(x_i)]` of `KL(q || p)`.
pub fn kl_estimate(q_samples: &Matrix, p_kde: &KdeModel, q_kde: &KdeModel) -> Result<f64> {
    if q_samples.rows() < 2 {
        return Err(DynamoError::precondition("KL estimate needs at least two samples"));
    }
    let mut total = 0.0;
    for x in q_samples.iter_rows() {
        total += q_kde.log_density(x)? - p_kde.log_density(x)?;
    }
    Ok(total / q_samples.rows() as f64)
}

/// Plug-in estimate of the chi-squared divergence `E_p[(q/p - 1)^2] / 2`,
/// written as `mean_i (r_i - 2 + 1/r_i) / 2` over samples from `q` with
/// `r = q/p`. Log-ratios are clamped to +-50 before exponentiating.
pub fn chi2_estimate(q_samples: &Matrix, p_kde: &KdeModel, q_kde: &KdeModel) -> Result<f64> {
    if q_samples.rows() < 2 {
        return Err(DynamoError::precondition("chi-squared estimate needs at least two samples"));
    }
    let mut total = 0.0;
    for x in q_samples.iter_rows() {
        let lr = (q_kde.log_density(x)? - p_kde.log_density(x)?).clamp(-50.0, 50.0);
        total += 0.5 * (lr.exp() - 2.0 + (-lr).exp());
    }
    Ok(total / q_samples.rows() as f64)
}
