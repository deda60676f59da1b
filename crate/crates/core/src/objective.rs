//! Per-candidate penalized acquisition score and its input gradient.

use serde::{Deserialize, Serialize};

use crate::dataset::TauWeights;
use crate::density::KdeModel;
use crate::duality::{Divergence, PenaltyConfig};
use crate::error::{DynamoError, Result};
use crate::matrix::Matrix;
use crate::neural::{Critic, Mlp};

/// A differentiable scalar score that optimizers maximize. Implementations
/// must be pure so that a batch may be scored in any order.
pub trait ScoreFn: Sync {
    fn dim(&self) -> usize;

    fn score(&self, x: &[f64]) -> Result<f64>;

    fn score_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn score_batch(&self, xs: &Matrix) -> Result<Vec<f64>> {
        xs.iter_rows().map(|x| self.score(x)).collect()
    }
}

/// Adapts a pair of closures into a [`ScoreFn`].
pub struct FnScore<F, G> {
    dim: usize,
    f: F,
    g: G,
}

impl<F, G> FnScore<F, G>
where
    F: Fn(&[f64]) -> f64 + Sync,
    G: Fn(&[f64]) -> Vec<f64> + Sync,
{
    pub fn new(dim: usize, f: F, g: G) -> Self {
        FnScore { dim, f, g }
    }
}

impl<F, G> ScoreFn for FnScore<F, G>
where
    F: Fn(&[f64]) -> f64 + Sync,
    G: Fn(&[f64]) -> Vec<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, x: &[f64]) -> Result<f64> {
        Ok((self.f)(x))
    }

    fn score_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok(((self.f)(x), (self.g)(x)))
    }
}

impl ScoreFn for Mlp {
    fn dim(&self) -> usize {
        self.input_dim()
    }

    fn score(&self, x: &[f64]) -> Result<f64> {
        self.forward(x)
    }

    fn score_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.forward(x)?;
        Ok(self.value_and_grad_input(x))
    }
}

/// Individual contributions to a penalized score, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreTerms {
    pub surrogate: f64,
    /// `log q(x) - log p(x)`; zero while no batch density is available.
    pub log_ratio: f64,
    /// `c(x) - E_p[c] + w0`; zero while no critic is attached.
    pub critic_slack: f64,
    pub total: f64,
}

/// `-L(x; lambda)`: surrogate reward minus the scaled log-density ratio plus
/// the multiplier-weighted critic slack.
#[derive(Clone, Debug)]
pub struct PenalizedObjective {
    surrogate: Mlp,
    critic: Option<Critic>,
    p_kde: Option<KdeModel>,
    q_kde: Option<KdeModel>,
    cfg: PenaltyConfig,
    lambda: f64,
    e_p_critic: f64,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

const BOUND_SLACK: f64 = 1e-9;

impl PenalizedObjective {
    pub fn new(surrogate: Mlp, cfg: PenaltyConfig, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        if cfg.beta > 0.0 && cfg.tau == 0.0 {
            return Err(DynamoError::domain("tau must be positive when beta > 0"));
        }
        let d = surrogate.input_dim();
        if lower.len() != d || upper.len() != d {
            return Err(DynamoError::domain("bounds do not match surrogate input dimension"));
        }
        Ok(PenalizedObjective {
            surrogate,
            critic: None,
            p_kde: None,
            q_kde: None,
            cfg,
            lambda: 0.0,
            e_p_critic: 0.0,
            lower,
            upper,
        })
    }

    pub fn config(&self) -> &PenaltyConfig {
        &self.cfg
    }

    pub fn surrogate(&self) -> &Mlp {
        &self.surrogate
    }

    pub fn critic(&self) -> Option<&Critic> {
        self.critic.as_ref()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn e_p_critic(&self) -> f64 {
        self.e_p_critic
    }

    pub fn q_kde(&self) -> Option<&KdeModel> {
        self.q_kde.as_ref()
    }

    pub fn p_kde(&self) -> Option<&KdeModel> {
        self.p_kde.as_ref()
    }

    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(DynamoError::domain(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        self.lambda = lambda;
        Ok(())
    }

    /// Attaches a critic and recomputes `E_p[c]` over the weighted data.
    pub fn set_critic(&mut self, critic: Critic, data: &Matrix, tw: &TauWeights) -> Result<()> {
        let values = critic.values(data)?;
        self.e_p_critic = tw.expectation(&values)?;
        self.critic = Some(critic);
        Ok(())
    }

    /// Attaches a critic with an externally computed `E_p[c]`.
    pub fn set_critic_with_mean(&mut self, critic: Critic, e_p_critic: f64) {
        self.critic = Some(critic);
        self.e_p_critic = e_p_critic;
    }

    pub fn set_p_kde(&mut self, kde: KdeModel) {
        self.p_kde = Some(kde);
    }

    pub fn set_q_kde(&mut self, kde: Option<KdeModel>) {
        self.q_kde = kde;
    }

    fn penalized(&self) -> bool {
        self.cfg.beta > 0.0
    }

    /// Scale on the log-ratio term: `beta / tau`, times `1 + gamma` for the
    /// mixed divergence.
    pub fn ratio_scale(&self) -> f64 {
        let base = self.cfg.beta / self.cfg.tau;
        match self.cfg.divergence {
            Divergence::Kl => base,
            Divergence::MixedChi2 => base * (1.0 + self.cfg.gamma),
        }
    }

    /// Scale on the critic slack: `beta * lambda`, times `1 + gamma` for the
    /// mixed divergence.
    pub fn multiplier_scale(&self) -> f64 {
        self.cfg.beta * self.cfg.multiplier_scale() * self.lambda
    }

    fn check_bounds(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.lower.len() {
            return Err(DynamoError::domain(format!(
                "design has length {}, expected {}",
                x.len(),
                self.lower.len()
            )));
        }
        for (j, ((v, lo), hi)) in x.iter().zip(&self.lower).zip(&self.upper).enumerate() {
            if !(*v >= lo - BOUND_SLACK && *v <= hi + BOUND_SLACK) {
                return Err(DynamoError::domain(format!(
                    "coordinate {j} = {v} outside [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    pub fn terms(&self, x: &[f64]) -> Result<ScoreTerms> {
        self.check_bounds(x)?;
        let surrogate = self.surrogate.forward_unchecked(x);
        let mut t = ScoreTerms {
            surrogate,
            total: surrogate,
            ..ScoreTerms::default()
        };
        if !self.penalized() {
            return Ok(t);
        }
        if let (Some(q), Some(p)) = (&self.q_kde, &self.p_kde) {
            t.log_ratio = q.log_density(x)? - p.log_density(x)?;
            t.total -= self.ratio_scale() * t.log_ratio;
        }
        if let Some(c) = &self.critic {
            t.critic_slack = c.value(x)? - self.e_p_critic + self.cfg.w0;
            t.total += self.multiplier_scale() * t.critic_slack;
        }
        Ok(t)
    }
}

impl ScoreFn for PenalizedObjective {
    fn dim(&self) -> usize {
        self.lower.len()
    }

    fn score(&self, x: &[f64]) -> Result<f64> {
        Ok(self.terms(x)?.total)
    }

    fn score_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_bounds(x)?;
        let (mut value, mut grad) = self.surrogate.value_and_grad_input(x);
        if !self.penalized() {
            return Ok((value, grad));
        }
        if let (Some(q), Some(p)) = (&self.q_kde, &self.p_kde) {
            let s = self.ratio_scale();
            let (lq, gq) = q.log_density_and_grad(x)?;
            let (lp, gp) = p.log_density_and_grad(x)?;
            value -= s * (lq - lp);
            for j in 0..grad.len() {
                grad[j] -= s * (gq[j] - gp[j]);
            }
        }
        if let Some(c) = &self.critic {
            let s = self.multiplier_scale();
            let (cv, cg) = c.net().value_and_grad_input(x);
            value += s * (cv - self.e_p_critic + self.cfg.w0);
            for j in 0..grad.len() {
                grad[j] += s * cg[j];
            }
        }
        Ok((value, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{fit_kde, BandwidthRule};
    use crate::neural::{Activation, CriticConfig};
    use crate::rng::seeded;

    fn parts(beta: f64, divergence: Divergence) -> PenalizedObjective {
        let mut rng = seeded(3);
        let sur = Mlp::new(&[2, 8, 1], Activation::leaky_relu(), &mut rng).unwrap();
        let cfg = PenaltyConfig {
            beta,
            tau: 0.7,
            w0: 0.1,
            divergence,
            gamma: 1.5,
        };
        let mut obj = PenalizedObjective::new(sur, cfg, vec![-4.0; 2], vec![4.0; 2]).unwrap();
        let data = Matrix::from_rows(&[[0.0, 0.5], [1.0, -1.0], [-2.0, 0.3], [0.7, 0.7]]).unwrap();
        let tw = TauWeights::from_scores(&[0.1, 0.9, 0.4, 0.6], 0.7).unwrap();
        obj.set_p_kde(fit_kde(&data, tw.weights(), BandwidthRule::Silverman).unwrap());
        let batch = Matrix::from_rows(&[[2.0, 2.0], [1.5, 2.5], [2.5, 1.0]]).unwrap();
        obj.set_q_kde(Some(fit_kde(&batch, &[1.0; 3], BandwidthRule::Silverman).unwrap()));
        let critic = Critic::new(2, &CriticConfig::default(), &mut rng).unwrap();
        obj.set_critic(critic, &data, &tw).unwrap();
        obj.set_lambda(40.0).unwrap();
        obj
    }

    #[test]
    fn zero_beta_is_surrogate() {
        let obj = parts(0.0, Divergence::Kl);
        let x = [0.3, -1.2];
        assert_eq!(obj.score(&x).unwrap(), obj.surrogate().forward(&x).unwrap());
        let (_, g) = obj.score_and_grad(&x).unwrap();
        assert_eq!(g, obj.surrogate().grad_input(&x).unwrap());
    }

    #[test]
    fn hand_summed_score() {
        for div in [Divergence::Kl, Divergence::MixedChi2] {
            let obj = parts(1.3, div);
            let x = [0.9, 1.1];
            let r = obj.surrogate().forward(&x).unwrap();
            let lq = obj.q_kde().unwrap().log_density(&x).unwrap();
            let lp = obj.p_kde().unwrap().log_density(&x).unwrap();
            let c = obj.critic().unwrap().value(&x).unwrap();
            let m = if div == Divergence::Kl { 1.0 } else { 2.5 };
            let expect = r - m * (1.3 / 0.7) * (lq - lp) + 1.3 * m * 40.0 * (c - obj.e_p_critic() + 0.1);
            assert!((obj.score(&x).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn no_penalty_when_lambda_zero_and_densities_match() {
        let mut obj = parts(1.0, Divergence::Kl);
        obj.set_lambda(0.0).unwrap();
        let p = obj.p_kde().unwrap().clone();
        obj.set_q_kde(Some(p));
        let x = [0.1, 0.2];
        assert_eq!(obj.score(&x).unwrap(), obj.surrogate().forward(&x).unwrap());
    }

    #[test]
    fn out_of_bounds_rejected() {
        let obj = parts(1.0, Divergence::Kl);
        assert!(matches!(obj.score(&[5.0, 0.0]), Err(DynamoError::Domain(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let obj = parts(1.0, Divergence::MixedChi2);
        let x = [0.4, 0.8];
        let (_, g) = obj.score_and_grad(&x).unwrap();
        for j in 0..2 {
            let h = 1e-5;
            let mut a = x;
            let mut b = x;
            a[j] += h;
            b[j] -= h;
            let fd = (obj.score(&a).unwrap() - obj.score(&b).unwrap()) / (2.0 * h);
            assert!((fd - g[j]).abs() <= 1e-4 * fd.abs().max(1e-3), "{fd} {}", g[j]);
        }
    }

    #[test]
    fn constant_critic_shift_preserves_argmax() {
        let obj = parts(1.0, Divergence::Kl);
        let mut shifted = obj.clone();
        shifted.set_critic_with_mean(obj.critic().unwrap().clone(), obj.e_p_critic() - 0.37);
        let xs = [[0.1, 0.2], [2.0, 2.0], [-1.0, 3.0], [3.5, -3.5]];
        let a: Vec<f64> = xs.iter().map(|x| obj.score(x).unwrap()).collect();
        let b: Vec<f64> = xs.iter().map(|x| shifted.score(x).unwrap()).collect();
        let offset = b[0] - a[0];
        for (u, v) in a.iter().zip(&b) {
            assert!((v - u - offset).abs() < 1e-9);
        }
    }

    #[test]
    fn penalty_pushes_toward_reference_mode() {
        // flat surrogate; q sits at +2, p at -2, so the gradient at 0 points toward p
        let sur = Mlp::zeros(&[1, 1], Activation::leaky_relu()).unwrap();
        let cfg = PenaltyConfig {
            beta: 0.5,
            tau: 0.5,
            ..PenaltyConfig::default()
        };
        let mut obj = PenalizedObjective::new(sur, cfg, vec![-4.0], vec![4.0]).unwrap();
        let p = Matrix::from_rows(&[[-2.0]]).unwrap();
        let q = Matrix::from_rows(&[[2.0]]).unwrap();
        obj.set_p_kde(fit_kde(&p, &[1.0], BandwidthRule::Fixed(1.0)).unwrap());
        obj.set_q_kde(Some(fit_kde(&q, &[1.0], BandwidthRule::Fixed(1.0)).unwrap()));
        let (_, g) = obj.score_and_grad(&[0.0]).unwrap();
        assert!(g[0] < 0.0);
    }
}
