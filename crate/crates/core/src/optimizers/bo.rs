use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use super::first_order::{AscentMethod, Ascender};
use super::gp::GpModel;
use super::sobol::{scale_to_bounds, SobolSequence};
use crate::error::{DynamoError, Result};
use crate::matrix::{sq_dist, Matrix};
use crate::objective::FnScore;
use crate::rng::seeded;

/// Batch acquisition rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Acquisition {
    Qucb { beta_ucb: f64 },
    Qei { best_so_far: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoConfig {
    pub pool_size: usize,
    pub refine: usize,
    pub refine_steps: usize,
}

impl Default for BoConfig {
    fn default() -> Self {
        BoConfig {
            pool_size: 1024,
            refine: 64,
            refine_steps: 20,
        }
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal is valid")
}

/// Closed-form expected improvement over `best` for a Gaussian `(mu, sigma)`.
pub fn expected_improvement(mu: f64, sigma: f64, best: f64) -> f64 {
    if sigma <= 0.0 {
        return (mu - best).max(0.0);
    }
    let n = std_normal();
    let z = (mu - best) / sigma;
    (mu - best) * n.cdf(z) + sigma * n.pdf(z)
}

/// Acquisition value and its gradient in `x`.
pub fn acquisition_value(model: &GpModel, kind: Acquisition, x: &[f64]) -> (f64, Vec<f64>) {
    let (mu, var, gm, gv) = model.posterior_with_grad(x);
    let sigma = var.sqrt();
    let dsigma: Vec<f64> = if sigma > 0.0 {
        gv.iter().map(|g| g / (2.0 * sigma)).collect()
    } else {
        vec![0.0; x.len()]
    };
    match kind {
        Acquisition::Qucb { beta_ucb } => {
            let k = beta_ucb.sqrt();
            let g = gm.iter().zip(&dsigma).map(|(a, b)| a + k * b).collect();
            (mu + k * sigma, g)
        }
        Acquisition::Qei { best_so_far } => {
            if sigma <= 0.0 {
                let g = if mu > best_so_far { gm } else { vec![0.0; x.len()] };
                return ((mu - best_so_far).max(0.0), g);
            }
            let n = std_normal();
            let z = (mu - best_so_far) / sigma;
            let (cdf, pdf) = (n.cdf(z), n.pdf(z));
            let g = gm.iter().zip(&dsigma).map(|(a, b)| cdf * a + pdf * b).collect();
            ((mu - best_so_far) * cdf + sigma * pdf, g)
        }
    }
}

/// Builds a batch of `b` distinct designs by greedy maximization of the
/// acquisition over a Sobol pool plus locally refined points, multiplying
/// the acquisition by `prod_s (1 - k(x, s) / sf2)` for every selected `s`.
pub fn bo_acquire(
    model: &GpModel,
    kind: Acquisition,
    b: usize,
    lower: &[f64],
    upper: &[f64],
    seed: u64,
    cfg: &BoConfig,
) -> Result<Matrix> {
    if b == 0 {
        return Err(DynamoError::precondition("batch size must be >= 1"));
    }
    let d = model.dim();
    if lower.len() != d || upper.len() != d {
        return Err(DynamoError::domain("bounds do not match GP dimension"));
    }
    let mut seq = SobolSequence::scrambled(d, &mut seeded(seed))?;
    seq.skip(1);
    let mut pool = scale_to_bounds(&seq.take(cfg.pool_size.max(b)), lower, upper);
    let mut values: Vec<f64> = pool.iter_rows().map(|x| acquisition_value(model, kind, x).0).collect();

    if cfg.refine > 0 && cfg.refine_steps > 0 {
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &c| values[c].total_cmp(&values[a]).then(a.cmp(&c)));
        order.truncate(cfg.refine);
        let mut starts = pool.select_rows(&order);
        let span = lower.iter().zip(upper).map(|(l, u)| u - l).sum::<f64>() / d as f64;
        let f = FnScore::new(
            d,
            |x: &[f64]| acquisition_value(model, kind, x).0,
            |x: &[f64]| acquisition_value(model, kind, x).1,
        );
        let mut asc = Ascender::new(AscentMethod::Adam, 0.01 * span, starts.rows(), d)?;
        for _ in 0..cfg.refine_steps {
            asc.step(&f, &mut starts, lower, upper)?;
        }
        for r in starts.iter_rows() {
            values.push(acquisition_value(model, kind, r).0);
            pool.push_row(r)?;
        }
    }

    let floor = values.iter().copied().fold(f64::INFINITY, f64::min);
    let base: Vec<f64> = values.iter().map(|v| v - floor).collect();
    let ls = &model.hyper().lengthscales;
    let mut factor = vec![1.0; pool.rows()];
    let mut alive = vec![true; pool.rows()];
    let mut chosen = Matrix::zeros(0, d);
    for _ in 0..b {
        let mut pick: Option<usize> = None;
        for i in 0..pool.rows() {
            if !alive[i] {
                continue;
            }
            let v = base[i] * factor[i];
            if pick.is_none_or(|p| v > base[p] * factor[p]) {
                pick = Some(i);
            }
        }
        let Some(p) = pick else {
            return Err(DynamoError::numeric("candidate pool exhausted before batch was filled"));
        };
        let s = pool.row(p).to_vec();
        for i in 0..pool.rows() {
            if !alive[i] {
                continue;
            }
            let x = pool.row(i);
            if sq_dist(x, &s) < 1e-12 {
                alive[i] = false;
                continue;
            }
            let q: f64 = x.iter().zip(&s).zip(ls).map(|((a, c), l)| ((a - c) / l).powi(2)).sum();
            factor[i] *= 1.0 - (-0.5 * q).exp();
        }
        chosen.push_row(&s)?;
    }
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::euclidean;
    use crate::optimizers::gp::{gp_fit, GpConfig, GpHyper};

    #[test]
    fn ei_at_incumbent_with_unit_sigma() {
        assert!((expected_improvement(0.5, 1.0, 0.5) - 0.398_942_280_4).abs() < 1e-9);
        assert_eq!(expected_improvement(2.0, 0.0, 0.5), 1.5);
    }

    fn model() -> GpModel {
        let x = Matrix::from_rows(&[[0.1, 0.2], [0.8, 0.3], [0.5, 0.9], [0.3, 0.6], [0.9, 0.9]]).unwrap();
        let y: Vec<f64> = x.iter_rows().map(|r| -(r[0] - 0.6).powi(2) - (r[1] - 0.4).powi(2)).collect();
        gp_fit(&x, &y, &GpConfig::default()).unwrap()
    }

    #[test]
    fn batch_points_are_distinct_and_in_bounds() {
        let gp = model();
        for kind in [Acquisition::Qucb { beta_ucb: 4.0 }, Acquisition::Qei { best_so_far: 0.0 }] {
            let batch = bo_acquire(&gp, kind, 8, &[0.0; 2], &[1.0; 2], 4, &BoConfig::default()).unwrap();
            assert_eq!(batch.rows(), 8);
            for i in 0..8 {
                assert!(batch.row(i).iter().all(|v| (0.0..=1.0).contains(v)));
                for j in 0..i {
                    assert!(euclidean(batch.row(i), batch.row(j)) > 1e-6);
                }
            }
        }
    }

    #[test]
    fn vanishing_variance_reduces_ucb_to_mean() {
        let x = Matrix::from_rows(&[[0.0], [0.5], [1.0]]).unwrap();
        let h = GpHyper {
            lengthscales: vec![0.4],
            signal_var: 1e-14,
            noise_var: 1e-20,
        };
        let gp = GpModel::with_hyper(&x, &[0.0, 1.0, 0.2], h).unwrap();
        let cfg = BoConfig {
            refine: 0,
            ..BoConfig::default()
        };
        let pick = bo_acquire(&gp, Acquisition::Qucb { beta_ucb: 4.0 }, 1, &[0.0], &[1.0], 2, &cfg).unwrap();
        let mut seq = SobolSequence::scrambled(1, &mut seeded(2)).unwrap();
        seq.skip(1);
        let pool = seq.take(cfg.pool_size);
        let best = pool
            .iter_rows()
            .max_by(|a, b| gp.posterior(a).0.total_cmp(&gp.posterior(b).0))
            .unwrap();
        assert_eq!(pick.row(0), best);
    }

    #[test]
    fn acquisition_gradients_match_finite_differences() {
        let gp = model();
        for kind in [Acquisition::Qucb { beta_ucb: 4.0 }, Acquisition::Qei { best_so_far: -0.05 }] {
            let p = [0.45, 0.55];
            let (_, g) = acquisition_value(&gp, kind, &p);
            for j in 0..2 {
                let h = 1e-6;
                let mut a = p;
                let mut c = p;
                a[j] += h;
                c[j] -= h;
                let fd = (acquisition_value(&gp, kind, &a).0 - acquisition_value(&gp, kind, &c).0) / (2.0 * h);
                assert!((fd - g[j]).abs() < 1e-5 * fd.abs().max(1.0), "{fd} {}", g[j]);
            }
        }
    }
}
