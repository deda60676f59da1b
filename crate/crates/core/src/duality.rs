//! Fenchel conjugates, the closed-form concave lower bound on the dual
//! function, and the projected-gradient solver for the multiplier.

use serde::{Deserialize, Serialize};

use crate::dataset::TauWeights;
use crate::error::{DynamoError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Divergence {
    Kl,
    MixedChi2,
}

/// Penalty strengths of the regularized, critic-constrained objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PenaltyConfig {
    pub beta: f64,
    pub tau: f64,
    pub w0: f64,
    pub divergence: Divergence,
    /// Weight of the chi-squared term; only read for the mixed divergence.
    pub gamma: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig {
            beta: 1.0,
            tau: 1.0,
            w0: 0.0,
            divergence: Divergence::Kl,
            gamma: 1.0,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(DynamoError::domain(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(DynamoError::domain(format!("tau must be >= 0, got {}", self.tau)));
        }
        if !self.w0.is_finite() {
            return Err(DynamoError::domain("w0 must be finite"));
        }
        if self.divergence == Divergence::MixedChi2 && !(self.gamma >= 1.0 && self.gamma.is_finite()) {
            return Err(DynamoError::domain(format!("gamma must be >= 1, got {}", self.gamma)));
        }
        Ok(())
    }

    /// Factor on the multiplier term: `1 + gamma` for the mixed divergence.
    pub fn multiplier_scale(&self) -> f64 {
        match self.divergence {
            Divergence::Kl => 1.0,
            Divergence::MixedChi2 => 1.0 + self.gamma,
        }
    }
}

/// Conjugate of `u log u`: `e^{v-1}`.
pub fn fenchel_kl(v: f64) -> f64 {
    (v - 1.0).exp()
}

/// Conjugate of `(u-1)^2 / 2`: `v^2/2 + v`.
pub fn fenchel_chi2(v: f64) -> f64 {
    0.5 * v * v + v
}

struct Moments {
    mean_c: f64,
    exp_term: f64,
    exp_deriv: f64,
    chi_term: f64,
    chi_deriv: f64,
}

fn moments(lambda: f64, c: &[f64], tw: &TauWeights, mixed: bool) -> Result<Moments> {
    if !(lambda >= 0.0) {
        return Err(DynamoError::domain(format!("lambda must be >= 0, got {lambda}")));
    }
    if c.len() != tw.len() {
        return Err(DynamoError::domain(format!(
            "critic outputs have length {}, weights have length {}",
            c.len(),
            tw.len()
        )));
    }
    let mut m = Moments {
        mean_c: 0.0,
        exp_term: 0.0,
        exp_deriv: 0.0,
        chi_term: 0.0,
        chi_deriv: 0.0,
    };
    for (&ci, &w) in c.iter().zip(tw.weights()) {
        let e = fenchel_kl(lambda * ci);
        m.mean_c += w * ci;
        m.exp_term += w * e;
        m.exp_deriv += w * ci * e;
        if mixed {
            let v = lambda * ci;
            m.chi_term += w * (v + 0.5 * v * v);
            m.chi_deriv += w * (ci + lambda * ci * ci);
        }
    }
    Ok(m)
}

/// Concave lower bound on the dual function at multiplier `lambda`, with
/// expectations taken under the tau-weighted dataset distribution.
pub fn g_lower(lambda: f64, critic_on_data: &[f64], tw: &TauWeights, cfg: &PenaltyConfig) -> Result<f64> {
    let mixed = cfg.divergence == Divergence::MixedChi2;
    let m = moments(lambda, critic_on_data, tw, mixed)?;
    let slack = m.mean_c - cfg.w0;
    Ok(if mixed {
        cfg.beta * ((1.0 + cfg.gamma) * lambda * slack - m.exp_term - cfg.gamma * m.chi_term)
    } else {
        cfg.beta * (lambda * slack - m.exp_term)
    })
}

/// Derivative of [`g_lower`] with respect to `lambda`.
pub fn g_lower_grad(lambda: f64, critic_on_data: &[f64], tw: &TauWeights, cfg: &PenaltyConfig) -> Result<f64> {
    let mixed = cfg.divergence == Divergence::MixedChi2;
    let m = moments(lambda, critic_on_data, tw, mixed)?;
    let slack = m.mean_c - cfg.w0;
    Ok(if mixed {
        cfg.beta * ((1.0 + cfg.gamma) * slack - m.exp_deriv - cfg.gamma * m.chi_deriv)
    } else {
        cfg.beta * (slack - m.exp_deriv)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub lambda0: f64,
    /// Initial step size; adapted by backtracking.
    pub eta: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub lambda_max: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            lambda0: 1.0,
            eta: 0.05,
            tol: 1e-8,
            max_iters: 500,
            lambda_max: 1e6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualSolution {
    pub lambda_star: f64,
    pub g_value: f64,
    /// Accepted iterates `(lambda, g(lambda))`, starting at `lambda0`.
    pub trace: Vec<(f64, f64)>,
    pub converged: bool,
}

/// Projected gradient ascent on [`g_lower`] over `0 <= lambda <= lambda_max`.
///
/// The step starts at `eta`, halves whenever a trial step would lower `g`
/// and grows by half after every accepted step, so the recorded trace is
/// monotone. Stops once the step that would be taken is below `tol`.
pub fn solve_lambda(
    critic_on_data: &[f64],
    tw: &TauWeights,
    cfg: &PenaltyConfig,
    solver: &SolverConfig,
) -> Result<DualSolution> {
    if !(solver.eta > 0.0) {
        return Err(DynamoError::precondition("eta must be positive"));
    }
    if !(solver.lambda_max > 0.0) {
        return Err(DynamoError::precondition("lambda_max must be positive"));
    }
    let eval = |l: f64| -> Result<(f64, f64)> {
        let g = g_lower(l, critic_on_data, tw, cfg)?;
        let d = g_lower_grad(l, critic_on_data, tw, cfg)?;
        if !g.is_finite() || !d.is_finite() {
            return Err(DynamoError::numeric(format!(
                "dual objective is not finite at lambda = {l}; critic outputs too large"
            )));
        }
        Ok((g, d))
    };
    let project = |l: f64| l.clamp(0.0, solver.lambda_max);
    let mut lambda = project(solver.lambda0.max(0.0));
    let (mut g, mut d) = eval(lambda)?;
    let mut trace = vec![(lambda, g)];
    let mut eta = solver.eta;
    let mut converged = false;
    for _ in 0..solver.max_iters {
        let trial = project(lambda + eta * d);
        let step = (trial - lambda).abs();
        if step < solver.tol {
            converged = trial < solver.lambda_max || d <= 0.0;
            break;
        }
        let (g_new, d_new) = eval(trial)?;
        if g_new >= g {
            lambda = trial;
            g = g_new;
            d = d_new;
            trace.push((lambda, g));
            eta *= 1.5;
        } else {
            eta *= 0.5;
        }
    }
    Ok(DualSolution {
        lambda_star: lambda,
        g_value: g,
        trace,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::E;

    fn weights(n: usize, tau: f64, seed: u64) -> TauWeights {
        let scores: Vec<f64> = (0..n).map(|i| ((i as u64 * 7919 + seed) % 101) as f64 / 100.0).collect();
        TauWeights::from_scores(&scores, tau).unwrap()
    }

    #[test]
    fn conjugate_values() {
        assert_eq!(fenchel_kl(1.0), 1.0);
        assert!((fenchel_kl(0.0) - 1.0 / E).abs() < 1e-15);
        assert_eq!(fenchel_chi2(0.0), 0.0);
        assert_eq!(fenchel_chi2(2.0), 4.0);
    }

    #[test]
    fn g_at_zero_lambda() {
        let tw = weights(5, 1.0, 3);
        let c = [0.3, -0.1, 0.2, 0.5, -0.4];
        let cfg = PenaltyConfig {
            beta: 2.5,
            ..PenaltyConfig::default()
        };
        let g = g_lower(0.0, &c, &tw, &cfg).unwrap();
        assert!((g + 2.5 / E).abs() < 1e-15);
        let zeros = [0.0; 5];
        let g1 = g_lower(1.0, &zeros, &tw, &PenaltyConfig::default()).unwrap();
        assert!((g1 + 1.0 / E).abs() < 1e-15);
    }

    #[test]
    fn negative_lambda_rejected() {
        let tw = TauWeights::uniform(2);
        assert!(g_lower(-0.1, &[0.0, 0.0], &tw, &PenaltyConfig::default()).is_err());
        assert!(g_lower_grad(-0.1, &[0.0, 0.0], &tw, &PenaltyConfig::default()).is_err());
    }

    #[test]
    fn flat_landscape_keeps_lambda() {
        let tw = TauWeights::uniform(4);
        let sol = solve_lambda(&[0.0; 4], &tw, &PenaltyConfig::default(), &SolverConfig::default()).unwrap();
        assert_eq!(sol.lambda_star, 1.0);
        assert!(sol.converged);
        assert_eq!(g_lower_grad(3.0, &[0.0; 4], &tw, &PenaltyConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn infeasible_slack_projects_to_zero() {
        let tw = TauWeights::uniform(3);
        let c = [-0.2, -0.1, -0.3];
        let cfg = PenaltyConfig {
            w0: 0.5,
            ..PenaltyConfig::default()
        };
        assert!(g_lower_grad(0.0, &c, &tw, &cfg).unwrap() < 0.0);
        let sol = solve_lambda(&c, &tw, &cfg, &SolverConfig::default()).unwrap();
        assert_eq!(sol.lambda_star, 0.0);
        assert!(sol.converged);
    }

    #[test]
    fn large_optimum_is_reached() {
        // tiny critic outputs push the optimum far from lambda0
        let tw = TauWeights::uniform(2);
        let c = [0.003, -0.001];
        let cfg = PenaltyConfig::default();
        let sol = solve_lambda(&c, &tw, &cfg, &SolverConfig::default()).unwrap();
        assert!(sol.converged);
        assert!(g_lower_grad(sol.lambda_star, &c, &tw, &cfg).unwrap().abs() < 1e-6);
        assert!(sol.lambda_star > 100.0);
    }

    #[test]
    fn overflow_is_numeric_error() {
        let tw = TauWeights::uniform(2);
        let solver = SolverConfig {
            lambda0: 1e6,
            ..SolverConfig::default()
        };
        let err = solve_lambda(&[1000.0, 0.0], &tw, &PenaltyConfig::default(), &solver).unwrap_err();
        assert!(matches!(err, DynamoError::Numeric(_)));
    }

    proptest! {
        #[test]
        fn trace_is_monotone(cs in proptest::collection::vec(-1.0f64..1.0, 3..12), w0 in -0.5f64..0.5, beta in 0.1f64..5.0) {
            let tw = weights(cs.len(), 1.0, 1);
            let cfg = PenaltyConfig { beta, w0, ..PenaltyConfig::default() };
            let sol = solve_lambda(&cs, &tw, &cfg, &SolverConfig::default()).unwrap();
            prop_assert!(sol.lambda_star >= 0.0);
            for pair in sol.trace.windows(2) {
                prop_assert!(pair[1].1 >= pair[0].1 - 1e-10);
            }
        }

        #[test]
        fn linear_in_beta(cs in proptest::collection::vec(-1.0f64..1.0, 2..8), lambda in 0.0f64..10.0) {
            let tw = TauWeights::uniform(cs.len());
            let one = PenaltyConfig::default();
            let two = PenaltyConfig { beta: 2.0, ..PenaltyConfig::default() };
            let a = g_lower(lambda, &cs, &tw, &one).unwrap();
            let b = g_lower(lambda, &cs, &tw, &two).unwrap();
            prop_assert!((b - 2.0 * a).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}
