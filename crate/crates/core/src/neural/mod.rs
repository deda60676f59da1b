//! Feed-forward networks with exact backpropagation: the regression
//! surrogate and the weight-clipped Wasserstein source critic.

mod critic;
mod mlp;

pub use critic::{train_critic, Critic, CriticConfig, CriticTrace};
pub use mlp::{Activation, Checkpoint, Mlp};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::OfflineDataset;
use crate::error::{DynamoError, Result};
use crate::rng::seeded;

/// Adam moment estimates for a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Descent step: `params -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn descend(&mut self, params: &mut [f64], grad: &[f64]) {
        self.update(params, grad, -1.0);
    }

    /// Ascent step on a maximization objective.
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64]) {
        self.update(params, grad, 1.0);
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], sign: f64) {
        debug_assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] += sign * self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Minibatch size; `None` trains full-batch.
    pub batch_size: Option<usize>,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            hidden: vec![64, 64],
            activation: Activation::leaky_relu(),
            epochs: 100,
            learning_rate: 3e-4,
            batch_size: Some(16),
        }
    }
}

impl SurrogateConfig {
    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(&self.hidden);
        dims.push(1);
        dims
    }

    /// The untrained network `fit_surrogate` starts from for this seed.
    pub fn init(&self, input_dim: usize, seed: u64) -> Result<Mlp> {
        Mlp::new(&self.layer_dims(input_dim), self.activation, &mut seeded(seed))
    }
}

/// Mean squared error of `net` against the dataset's normalized scores.
pub fn mse(net: &Mlp, ds: &OfflineDataset) -> Result<f64> {
    let mut total = 0.0;
    for (x, y) in ds.designs().iter_rows().zip(ds.norm_scores()) {
        let e = net.forward(x)? - y;
        total += e * e;
    }
    Ok(total / ds.len() as f64)
}

/// Trains a regression surrogate on `(designs, norm_scores)` with Adam on
/// the mean squared error. Deterministic for a given seed.
pub fn fit_surrogate(ds: &OfflineDataset, cfg: &SurrogateConfig, seed: u64) -> Result<Mlp> {
    if cfg.epochs == 0 {
        return Err(DynamoError::precondition("epochs must be >= 1"));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(DynamoError::precondition("learning rate must be positive"));
    }
    let mut net = cfg.init(ds.dim(), seed)?;
    // shuffling draws from a separate stream so the init matches `cfg.init`
    let mut rng = seeded(seed ^ 0x5eed_5eed_5eed_5eed);
    let mut adam = AdamState::new(net.num_params(), cfg.learning_rate);
    let n = ds.len();
    let batch = cfg.batch_size.unwrap_or(n).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut grad = vec![0.0; net.num_params()];
    let xs = ds.designs();
    let ys = ds.norm_scores();
    for epoch in 0..cfg.epochs {
        if batch < n {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let x = xs.row(i);
                let out = net.forward_unchecked(x);
                let err = out - ys[i];
                epoch_loss += err * err;
                net.accumulate_param_grad(x, 2.0 * err * scale, &mut grad)?;
            }
            adam.descend(net.params_mut(), &grad);
        }
        if !epoch_loss.is_finite() {
            return Err(DynamoError::TrainingDiverged(format!(
                "surrogate loss is not finite at epoch {epoch}"
            )));
        }
    }
    if net.params().iter().any(|p| !p.is_finite()) {
        return Err(DynamoError::TrainingDiverged("surrogate parameters are not finite".into()));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DesignKind;
    use crate::matrix::Matrix;
    use rand::Rng;

    fn linear_dataset() -> OfflineDataset {
        let mut rng = seeded(5);
        let rows: Vec<[f64; 2]> = (0..64)
            .map(|_| [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)])
            .collect();
        let scores = rows.iter().map(|r| 0.3 * r[0] - 0.2 * r[1] + 1.0).collect();
        OfflineDataset::new(
            Matrix::from_rows(&rows).unwrap(),
            scores,
            vec![-4.0; 2],
            vec![4.0; 2],
            DesignKind::Continuous,
        )
        .unwrap()
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut adam = AdamState::new(2, 0.05);
        for _ in 0..2000 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            adam.descend(&mut x, &g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2), "{x:?}");
        assert_eq!(adam.step_count(), 2000);
    }

    #[test]
    fn linear_surrogate_fits_linear_data() {
        let ds = linear_dataset();
        let cfg = SurrogateConfig {
            hidden: vec![],
            epochs: 3000,
            learning_rate: 0.01,
            batch_size: None,
            ..SurrogateConfig::default()
        };
        let net = fit_surrogate(&ds, &cfg, 1).unwrap();
        assert!(mse(&net, &ds).unwrap() < 1e-6);
    }

    #[test]
    fn zero_epochs_rejected() {
        let cfg = SurrogateConfig {
            epochs: 0,
            ..SurrogateConfig::default()
        };
        assert!(matches!(
            fit_surrogate(&linear_dataset(), &cfg, 0),
            Err(DynamoError::Precondition(_))
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let ds = linear_dataset();
        let cfg = SurrogateConfig {
            hidden: vec![8, 8],
            epochs: 5,
            ..SurrogateConfig::default()
        };
        let a = fit_surrogate(&ds, &cfg, 9).unwrap();
        let b = fit_surrogate(&ds, &cfg, 9).unwrap();
        let bits = |n: &Mlp| n.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
