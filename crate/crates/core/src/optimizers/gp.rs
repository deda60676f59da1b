use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{DynamoError, Result};
use crate::matrix::Matrix;
use crate::neural::AdamState;

const NOISE_FLOOR: f64 = 1e-6;
const JITTERS: [f64; 6] = [0.0, 1e-10, 1e-8, 1e-6, 1e-4, 1e-2];

/// Kernel hyperparameters in standardized-target units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub lengthscales: Vec<f64>,
    pub signal_var: f64,
    pub noise_var: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpConfig {
    /// Number of log-marginal-likelihood ascent starts.
    pub restarts: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Fixes the (standardized) noise variance instead of learning it.
    pub noise: Option<f64>,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            restarts: 3,
            steps: 60,
            learning_rate: 0.05,
            noise: None,
        }
    }
}

/// Exact GP regression with an RBF kernel on standardized targets.
#[derive(Clone, Debug)]
pub struct GpModel {
    x: Matrix,
    y_mean: f64,
    y_std: f64,
    hyper: GpHyper,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    log_marginal: f64,
}

fn kernel(a: &[f64], b: &[f64], ls: &[f64], sf2: f64) -> f64 {
    let mut q = 0.0;
    for ((x, y), l) in a.iter().zip(b).zip(ls) {
        let z = (x - y) / l;
        q += z * z;
    }
    sf2 * (-0.5 * q).exp()
}

fn gram(x: &Matrix, h: &GpHyper) -> DMatrix<f64> {
    let n = x.rows();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel(x.row(i), x.row(j), &h.lengthscales, h.signal_var);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] += h.noise_var;
    }
    k
}

fn factor(mut k: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let n = k.nrows();
    let mut added = 0.0;
    for jitter in JITTERS {
        for i in 0..n {
            k[(i, i)] += jitter - added;
        }
        added = jitter;
        if let Some(c) = Cholesky::new(k.clone()) {
            return Ok(c);
        }
    }
    Err(DynamoError::IllConditioned(format!(
        "Cholesky failed on a {n}x{n} kernel matrix after jitter {added}"
    )))
}

struct Fit {
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    lml: f64,
}

fn fit_fixed(x: &Matrix, y: &DVector<f64>, h: &GpHyper) -> Result<Fit> {
    let chol = factor(gram(x, h))?;
    let alpha = chol.solve(y);
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    let n = y.len() as f64;
    let lml = -0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln();
    Ok(Fit { chol, alpha, lml })
}

/// Gradient of the log marginal likelihood in log-hyperparameter space:
/// `[log l_1 .. log l_d, log sf2, log sn2]`.
fn lml_grad(x: &Matrix, h: &GpHyper, fit: &Fit) -> Vec<f64> {
    let n = x.rows();
    let d = x.cols();
    let kinv = fit.chol.inverse();
    let a = &fit.alpha * fit.alpha.transpose() - kinv;
    let mut g = vec![0.0; d + 2];
    for i in 0..n {
        for j in 0..n {
            let aij = a[(i, j)];
            let kf = kernel(x.row(i), x.row(j), &h.lengthscales, h.signal_var);
            g[d] += aij * kf;
            for l in 0..d {
                let z = (x.get(i, l) - x.get(j, l)) / h.lengthscales[l];
                g[l] += aij * kf * z * z;
            }
        }
        g[d + 1] += a[(i, i)] * h.noise_var;
    }
    g.iter_mut().for_each(|v| *v *= 0.5);
    g
}

impl GpModel {
    /// Builds the posterior for fixed hyperparameters (standardized units).
    pub fn with_hyper(inputs: &Matrix, targets: &[f64], hyper: GpHyper) -> Result<Self> {
        let (y, y_mean, y_std) = standardize(inputs, targets)?;
        if hyper.lengthscales.len() != inputs.cols() {
            return Err(DynamoError::domain("one lengthscale per input dimension required"));
        }
        let fit = fit_fixed(inputs, &y, &hyper)?;
        Ok(GpModel {
            x: inputs.clone(),
            y_mean,
            y_std,
            hyper,
            chol: fit.chol,
            alpha: fit.alpha,
            log_marginal: fit.lml,
        })
    }

    pub fn hyper(&self) -> &GpHyper {
        &self.hyper
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_marginal
    }

    /// Prior variance of the latent function in target units.
    pub fn signal_variance(&self) -> f64 {
        self.hyper.signal_var * self.y_std * self.y_std
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    fn cross(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.x.rows(),
            self.x
                .iter_rows()
                .map(|r| kernel(x, r, &self.hyper.lengthscales, self.hyper.signal_var)),
        )
    }

    /// Posterior mean and latent variance (clamped at zero) in target units.
    pub fn posterior(&self, x: &[f64]) -> (f64, f64) {
        let k = self.cross(x);
        let mean = self.y_mean + self.y_std * k.dot(&self.alpha);
        let v = self.chol.l_dirty().solve_lower_triangular(&k).unwrap_or_else(|| k.clone());
        let var = (self.hyper.signal_var - v.dot(&v)).max(0.0) * self.y_std * self.y_std;
        (mean, var)
    }

    /// Posterior mean, variance, and their gradients in `x`.
    pub fn posterior_with_grad(&self, x: &[f64]) -> (f64, f64, Vec<f64>, Vec<f64>) {
        let d = x.len();
        let k = self.cross(x);
        let kinv_k = self.chol.solve(&k);
        let mean = self.y_mean + self.y_std * k.dot(&self.alpha);
        let raw_var = self.hyper.signal_var - k.dot(&kinv_k);
        let s2 = self.y_std * self.y_std;
        let mut gm = vec![0.0; d];
        let mut gv = vec![0.0; d];
        for (i, r) in self.x.iter_rows().enumerate() {
            for j in 0..d {
                let l = self.hyper.lengthscales[j];
                let dk = -k[i] * (x[j] - r[j]) / (l * l);
                gm[j] += self.y_std * self.alpha[i] * dk;
                gv[j] -= 2.0 * s2 * kinv_k[i] * dk;
            }
        }
        if raw_var <= 0.0 {
            gv.iter_mut().for_each(|g| *g = 0.0);
        }
        (mean, raw_var.max(0.0) * s2, gm, gv)
    }
}

fn standardize(inputs: &Matrix, targets: &[f64]) -> Result<(DVector<f64>, f64, f64)> {
    if inputs.rows() < 2 {
        return Err(DynamoError::precondition("GP needs at least two training points"));
    }
    if inputs.rows() != targets.len() {
        return Err(DynamoError::domain("inputs and targets differ in length"));
    }
    if targets.iter().any(|t| !t.is_finite()) || inputs.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(DynamoError::domain("GP training data must be finite"));
    }
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let var = targets.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n;
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
    Ok((
        DVector::from_iterator(targets.len(), targets.iter().map(|t| (t - mean) / std)),
        mean,
        std,
    ))
}

/// Fits an RBF GP, choosing hyperparameters by multi-start gradient ascent
/// on the log marginal likelihood.
pub fn gp_fit(inputs: &Matrix, targets: &[f64], cfg: &GpConfig) -> Result<GpModel> {
    let (y, _, _) = standardize(inputs, targets)?;
    let d = inputs.cols();
    let ranges: Vec<f64> = (0..d)
        .map(|j| {
            let (lo, hi) = inputs
                .iter_rows()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r[j]), hi.max(r[j])));
            (hi - lo).max(1e-3)
        })
        .collect();
    let noise_floor_log = NOISE_FLOOR.ln();
    let mut best: Option<(f64, GpHyper)> = None;
    let starts = cfg.restarts.max(1);
    for s in 0..starts {
        let frac = [0.3, 1.0, 0.1, 3.0, 0.5][s % 5];
        let mut theta: Vec<f64> = ranges.iter().map(|r| (r * frac).ln()).collect();
        theta.push(0.0);
        theta.push(cfg.noise.map(|v| v.max(NOISE_FLOOR)).unwrap_or(1e-2).ln());
        let unpack = |t: &[f64]| GpHyper {
            lengthscales: t[..d].iter().map(|v| v.exp()).collect(),
            signal_var: t[d].exp(),
            noise_var: t[d + 1].exp(),
        };
        let mut adam = AdamState::new(d + 2, cfg.learning_rate);
        let mut current = fit_fixed(inputs, &y, &unpack(&theta)).ok();
        let mut local_best = current.as_ref().map(|f| (f.lml, unpack(&theta)));
        for _ in 0..cfg.steps {
            let Some(fit) = current.as_ref() else { break };
            let h = unpack(&theta);
            let mut g = lml_grad(inputs, &h, fit);
            if cfg.noise.is_some() {
                g[d + 1] = 0.0;
            }
            adam.ascend(&mut theta, &g);
            for v in theta[..=d].iter_mut() {
                *v = v.clamp(-9.0, 9.0);
            }
            theta[d + 1] = theta[d + 1].clamp(noise_floor_log, 2.0);
            current = fit_fixed(inputs, &y, &unpack(&theta)).ok();
            if let Some(f) = &current {
                if local_best.as_ref().is_none_or(|(l, _)| f.lml > *l) {
                    local_best = Some((f.lml, unpack(&theta)));
                }
            }
        }
        if let Some((l, h)) = local_best {
            if l.is_finite() && best.as_ref().is_none_or(|(b, _)| l > *b) {
                best = Some((l, h));
            }
        }
    }
    let (_, hyper) = best.ok_or_else(|| DynamoError::IllConditioned("no hyperparameter start produced a valid fit".into()))?;
    GpModel::with_hyper(inputs, targets, hyper)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine_data(n: usize) -> (Matrix, Vec<f64>) {
        let xs: Vec<f64> = (0..n).map(|i| i as f64 * 6.0 / (n - 1) as f64).collect();
        let ys = xs.iter().map(|x| x.sin()).collect();
        (Matrix::from_vec(n, 1, xs).unwrap(), ys)
    }

    #[test]
    fn interpolates_training_points() {
        let (x, y) = sine_data(10);
        let cfg = GpConfig {
            noise: Some(1e-6),
            ..GpConfig::default()
        };
        let gp = gp_fit(&x, &y, &cfg).unwrap();
        for (r, t) in x.iter_rows().zip(&y) {
            assert!((gp.posterior(r).0 - t).abs() < 1e-2);
        }
    }

    #[test]
    fn sine_heldout_rmse() {
        let (x, y) = sine_data(30);
        let gp = gp_fit(&x, &y, &GpConfig::default()).unwrap();
        let mut se = 0.0;
        let m = 200;
        for i in 0..m {
            let t = 0.01 + i as f64 * 5.98 / m as f64;
            let e = gp.posterior(&[t]).0 - t.sin();
            se += e * e;
        }
        assert!((se / m as f64).sqrt() < 0.1);
    }

    #[test]
    fn reverts_to_prior_far_away() {
        let (x, y) = sine_data(20);
        let gp = gp_fit(&x, &y, &GpConfig::default()).unwrap();
        let (_, var) = gp.posterior(&[1e4]);
        assert!((var - gp.signal_variance()).abs() <= 0.05 * gp.signal_variance());
    }

    #[test]
    fn duplicate_inputs_survive_jitter() {
        let x = Matrix::from_rows(&[[0.0], [0.0], [1.0]]).unwrap();
        let h = GpHyper {
            lengthscales: vec![1.0],
            signal_var: 1.0,
            noise_var: 0.0,
        };
        assert!(GpModel::with_hyper(&x, &[0.0, 0.0, 1.0], h).is_ok());
    }

    #[test]
    fn posterior_gradients_match_finite_differences() {
        let x = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.5], [0.3, 1.2], [-0.8, 0.4]]).unwrap();
        let h = GpHyper {
            lengthscales: vec![0.7, 1.1],
            signal_var: 1.3,
            noise_var: 1e-3,
        };
        let gp = GpModel::with_hyper(&x, &[0.1, 0.9, -0.3, 0.5], h).unwrap();
        let p = [0.4, 0.3];
        let (_, _, gm, gv) = gp.posterior_with_grad(&p);
        for j in 0..2 {
            let eps = 1e-6;
            let mut a = p;
            let mut b = p;
            a[j] += eps;
            b[j] -= eps;
            let (ma, va) = gp.posterior(&a);
            let (mb, vb) = gp.posterior(&b);
            assert!(((ma - mb) / (2.0 * eps) - gm[j]).abs() < 1e-6);
            assert!(((va - vb) / (2.0 * eps) - gv[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn single_point_rejected() {
        let x = Matrix::from_rows(&[[0.0]]).unwrap();
        assert!(gp_fit(&x, &[1.0], &GpConfig::default()).is_err());
    }
}
