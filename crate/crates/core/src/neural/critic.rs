use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Activation, Mlp};
use crate::dataset::TauWeights;
use crate::error::{DynamoError, Result};
use crate::matrix::Matrix;

/// Source critic whose parameters are clamped to `[-clip_bound, clip_bound]`
/// after every update, a crude proxy for a Lipschitz constraint.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    net: Mlp,
    clip_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CriticConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub clip_bound: f64,
    pub learning_rate: f64,
    pub tol: f64,
    pub max_steps: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig {
            hidden: vec![32, 32],
            activation: Activation::leaky_relu(),
            clip_bound: 0.01,
            learning_rate: 0.01,
            tol: 1e-6,
            max_steps: 200,
        }
    }
}

/// Wasserstein estimates `E_real[c] - E_fake[c]` recorded during training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CriticTrace {
    /// `w[0]` is the estimate before the first update; `w[k]` after `k` updates.
    pub w: Vec<f64>,
    /// Running maximum of `w`.
    pub best: Vec<f64>,
    pub steps: usize,
    pub converged: bool,
}

impl CriticTrace {
    pub fn final_w(&self) -> f64 {
        self.w.last().copied().unwrap_or(0.0)
    }
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, cfg: &CriticConfig, rng: &mut R) -> Result<Self> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(&cfg.hidden);
        dims.push(1);
        Self::from_net(Mlp::new(&dims, cfg.activation, rng)?, cfg.clip_bound)
    }

    /// Wraps a network, clamping its parameters into the clip box.
    pub fn from_net(mut net: Mlp, clip_bound: f64) -> Result<Self> {
        if !(clip_bound > 0.0) {
            return Err(DynamoError::precondition("clip bound must be positive"));
        }
        clamp(net.params_mut(), clip_bound);
        Ok(Critic { net, clip_bound })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn clip_bound(&self) -> f64 {
        self.clip_bound
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        self.net.forward(x)
    }

    pub fn grad_input(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.net.grad_input(x)
    }

    /// Critic outputs on every row.
    pub fn values(&self, xs: &Matrix) -> Result<Vec<f64>> {
        xs.iter_rows().map(|x| self.net.forward(x)).collect()
    }

    pub fn max_abs_param(&self) -> f64 {
        self.net.params().iter().fold(0.0, |m, p| m.max(p.abs()))
    }

    /// Wasserstein estimate and its parameter gradient at the current
    /// parameters.
    fn objective_and_grad(
        &self,
        real: &Matrix,
        real_weights: &TauWeights,
        fake: &Matrix,
        grad: &mut [f64],
    ) -> Result<f64> {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let tw = real_weights.weights();
        let real_out = self.net.accumulate_param_grad_batch(real, tw, grad)?;
        let inv_b = 1.0 / fake.rows() as f64;
        let fake_out = self.net.accumulate_param_grad_batch(fake, &vec![-inv_b; fake.rows()], grad)?;
        let w = tw.iter().zip(&real_out).map(|(a, c)| a * c).sum::<f64>() - inv_b * fake_out.iter().sum::<f64>();
        Ok(w)
    }
}

fn clamp(params: &mut [f64], bound: f64) {
    for p in params {
        *p = p.clamp(-bound, bound);
    }
}

/// Gradient ascent on `E_{real~weights}[c] - E_fake[c]` with the critic's
/// parameters clamped after every step. Stops when successive estimates
/// differ by less than `cfg.tol` or after `cfg.max_steps` updates.
pub fn train_critic(
    critic: &mut Critic,
    real: &Matrix,
    real_weights: &TauWeights,
    fake: &Matrix,
    cfg: &CriticConfig,
) -> Result<CriticTrace> {
    if fake.rows() == 0 {
        return Err(DynamoError::precondition("fake batch must be non-empty"));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(DynamoError::precondition("critic learning rate must be positive"));
    }
    if real.rows() != real_weights.len() {
        return Err(DynamoError::domain("real samples and weights differ in length"));
    }
    let mut grad = vec![0.0; critic.net.num_params()];
    let mut trace = CriticTrace::default();
    let mut w = critic.objective_and_grad(real, real_weights, fake, &mut grad)?;
    let mut best = w;
    trace.w.push(w);
    trace.best.push(best);
    for _ in 0..cfg.max_steps {
        for (p, g) in critic.net.params_mut().iter_mut().zip(&grad) {
            *p += cfg.learning_rate * g;
        }
        clamp(critic.net.params_mut(), critic.clip_bound);
        trace.steps += 1;
        let next = critic.objective_and_grad(real, real_weights, fake, &mut grad)?;
        if !next.is_finite() {
            return Err(DynamoError::TrainingDiverged(format!(
                "critic objective is not finite after {} steps",
                trace.steps
            )));
        }
        best = best.max(next);
        trace.w.push(next);
        trace.best.push(best);
        let delta = (next - w).abs();
        w = next;
        if delta < cfg.tol {
            trace.converged = true;
            break;
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn identical_batches_with_zero_critic_stay_at_zero() {
        let net = Mlp::zeros(&[2, 8, 8, 1], Activation::leaky_relu()).unwrap();
        let mut critic = Critic::from_net(net, 0.01).unwrap();
        let real = Matrix::from_rows(&[[0.1, 0.2], [0.3, -0.4], [1.0, 1.0]]).unwrap();
        let tw = TauWeights::uniform(3);
        let trace = train_critic(&mut critic, &real, &tw, &real, &CriticConfig::default()).unwrap();
        assert!(trace.w.iter().all(|w| w.abs() < 1e-6));
    }

    #[test]
    fn separates_real_from_fake_in_one_dimension() {
        let cfg = CriticConfig {
            hidden: vec![8, 8],
            ..CriticConfig::default()
        };
        let mut critic = Critic::new(1, &cfg, &mut seeded(4)).unwrap();
        let real = Matrix::from_rows(&[[1.0]; 4]).unwrap();
        let fake = Matrix::from_rows(&[[-1.0]; 4]).unwrap();
        let tw = TauWeights::uniform(4);
        let trace = train_critic(&mut critic, &real, &tw, &fake, &cfg).unwrap();
        assert!(critic.value(&[1.0]).unwrap() > critic.value(&[-1.0]).unwrap());
        assert!(trace.final_w() > 0.0);
        assert!(critic.max_abs_param() <= 0.01);
    }

    #[test]
    fn empty_fake_batch_rejected() {
        let mut critic = Critic::new(1, &CriticConfig::default(), &mut seeded(0)).unwrap();
        let real = Matrix::from_rows(&[[1.0]]).unwrap();
        let fake = Matrix::zeros(0, 1);
        assert!(train_critic(&mut critic, &real, &TauWeights::uniform(1), &fake, &CriticConfig::default()).is_err());
    }
}
