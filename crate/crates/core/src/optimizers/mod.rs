//! Backbone samplers that consume any [`ScoreFn`]: Sobol initialization,
//! first-order ascent, CMA-ES, and GP-based batch Bayesian optimization.

mod bo;
mod cma;
mod first_order;
mod gp;
mod sobol;
mod sobol_table;

pub use bo::{acquisition_value, bo_acquire, expected_improvement, Acquisition, BoConfig};
pub use cma::{default_population, reflect, CmaState};
pub use first_order::{ascend, AscentMethod, Ascender};
pub use gp::{gp_fit, GpConfig, GpHyper, GpModel};
pub use sobol::{scale_to_bounds, sobol_init, SobolSequence};
pub use sobol_table::MAX_DIM as SOBOL_MAX_DIM;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DynamoError, Result};
use crate::matrix::Matrix;
use crate::objective::ScoreFn;
use crate::rng::{stream_rng, Stream};

/// A batch sampler driven only through a score function.
pub trait Backbone {
    fn name(&self) -> &str;

    /// Starts a fresh phase from an initial batch. `phase` selects the
    /// random stream so restarts explore differently.
    fn reset(&mut self, init: &Matrix, phase: u64) -> Result<()>;

    /// Proposes the next batch of `b` designs.
    fn propose(&mut self, f: &dyn ScoreFn, b: usize) -> Result<Matrix>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    Grad {
        #[serde(default = "default_grad_lr")]
        lr: f64,
        #[serde(default = "default_steps")]
        steps_per_batch: usize,
    },
    Adam {
        #[serde(default = "default_adam_lr")]
        lr: f64,
        #[serde(default = "default_steps")]
        steps_per_batch: usize,
    },
    CmaEs {
        /// Initial step size as a fraction of the mean box width.
        #[serde(default = "default_sigma_fraction")]
        sigma_fraction: f64,
        #[serde(default)]
        population: Option<usize>,
    },
    BoQucb {
        #[serde(default = "default_beta_ucb")]
        beta_ucb: f64,
        #[serde(default)]
        gp: GpConfig,
        #[serde(default)]
        acquisition: BoConfig,
        #[serde(default = "default_history")]
        max_history: usize,
    },
    BoQei {
        #[serde(default)]
        gp: GpConfig,
        #[serde(default)]
        acquisition: BoConfig,
        #[serde(default = "default_history")]
        max_history: usize,
    },
}

fn default_grad_lr() -> f64 {
    0.05
}
fn default_adam_lr() -> f64 {
    0.05
}
fn default_steps() -> usize {
    5
}
fn default_sigma_fraction() -> f64 {
    0.3
}
fn default_beta_ucb() -> f64 {
    4.0
}
fn default_history() -> usize {
    128
}

impl OptimizerKind {
    /// Parses a short name (`grad`, `adam`, `cma-es`, `bo-qucb`, `bo-qei`)
    /// into the default configuration for that optimizer.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "grad" => OptimizerKind::Grad {
                lr: default_grad_lr(),
                steps_per_batch: default_steps(),
            },
            "adam" => OptimizerKind::Adam {
                lr: default_adam_lr(),
                steps_per_batch: default_steps(),
            },
            "cma-es" | "cma" => OptimizerKind::CmaEs {
                sigma_fraction: default_sigma_fraction(),
                population: None,
            },
            "bo-qucb" => OptimizerKind::BoQucb {
                beta_ucb: default_beta_ucb(),
                gp: GpConfig::default(),
                acquisition: BoConfig::default(),
                max_history: default_history(),
            },
            "bo-qei" => OptimizerKind::BoQei {
                gp: GpConfig::default(),
                acquisition: BoConfig::default(),
                max_history: default_history(),
            },
            other => return Err(DynamoError::Unsupported(format!("unknown optimizer '{other}'"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Grad { .. } => "grad",
            OptimizerKind::Adam { .. } => "adam",
            OptimizerKind::CmaEs { .. } => "cma-es",
            OptimizerKind::BoQucb { .. } => "bo-qucb",
            OptimizerKind::BoQei { .. } => "bo-qei",
        }
    }

    pub fn build(&self, lower: &[f64], upper: &[f64], seed: u64) -> Result<Box<dyn Backbone>> {
        let bounds = Bounds::new(lower, upper)?;
        Ok(match self {
            OptimizerKind::Grad { lr, steps_per_batch } => {
                Box::new(FirstOrderBackbone::new(AscentMethod::Grad, *lr, *steps_per_batch, bounds)?)
            }
            OptimizerKind::Adam { lr, steps_per_batch } => {
                Box::new(FirstOrderBackbone::new(AscentMethod::Adam, *lr, *steps_per_batch, bounds)?)
            }
            OptimizerKind::CmaEs {
                sigma_fraction,
                population,
            } => Box::new(CmaBackbone::new(*sigma_fraction, *population, bounds, seed)?),
            OptimizerKind::BoQucb {
                beta_ucb,
                gp,
                acquisition,
                max_history,
            } => Box::new(BoBackbone::new(
                BoRule::Ucb(*beta_ucb),
                gp.clone(),
                acquisition.clone(),
                *max_history,
                bounds,
                seed,
            )),
            OptimizerKind::BoQei {
                gp,
                acquisition,
                max_history,
            } => Box::new(BoBackbone::new(
                BoRule::Ei,
                gp.clone(),
                acquisition.clone(),
                *max_history,
                bounds,
                seed,
            )),
        })
    }
}

#[derive(Clone, Debug)]
struct Bounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Bounds {
    fn new(lower: &[f64], upper: &[f64]) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(DynamoError::domain("bounds must be non-empty and equal length"));
        }
        if lower.iter().zip(upper).any(|(l, u)| !(l < u)) {
            return Err(DynamoError::domain("lower bound must be below upper bound"));
        }
        Ok(Bounds {
            lower: lower.to_vec(),
            upper: upper.to_vec(),
        })
    }

    fn mean_width(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l).sum::<f64>() / self.lower.len() as f64
    }
}

/// Each design of the batch follows its own ascent trajectory; every call
/// advances all of them by `steps_per_batch` steps.
pub struct FirstOrderBackbone {
    method: AscentMethod,
    lr: f64,
    steps: usize,
    bounds: Bounds,
    state: Option<(Matrix, Ascender)>,
}

impl FirstOrderBackbone {
    fn new(method: AscentMethod, lr: f64, steps: usize, bounds: Bounds) -> Result<Self> {
        if steps == 0 {
            return Err(DynamoError::precondition("steps per batch must be >= 1"));
        }
        if !(lr > 0.0) {
            return Err(DynamoError::precondition("learning rate must be positive"));
        }
        Ok(FirstOrderBackbone {
            method,
            lr,
            steps,
            bounds,
            state: None,
        })
    }
}

impl Backbone for FirstOrderBackbone {
    fn name(&self) -> &str {
        match self.method {
            AscentMethod::Grad => "grad",
            AscentMethod::Adam => "adam",
        }
    }

    fn reset(&mut self, init: &Matrix, _phase: u64) -> Result<()> {
        let asc = Ascender::new(self.method, self.lr, init.rows(), init.cols())?;
        self.state = Some((init.clone(), asc));
        Ok(())
    }

    fn propose(&mut self, f: &dyn ScoreFn, b: usize) -> Result<Matrix> {
        let (xs, asc) = self
            .state
            .as_mut()
            .ok_or_else(|| DynamoError::precondition("optimizer used before reset"))?;
        if xs.rows() != b {
            return Err(DynamoError::precondition(format!(
                "first-order batch holds {} designs, {} requested",
                xs.rows(),
                b
            )));
        }
        for _ in 0..self.steps {
            asc.step(f, xs, &self.bounds.lower, &self.bounds.upper)?;
        }
        Ok(xs.clone())
    }
}

/// CMA-ES whose mean starts at the best-scoring initial design; a batch is
/// the first `b` samples of as many generations as needed.
pub struct CmaBackbone {
    sigma_fraction: f64,
    population: Option<usize>,
    bounds: Bounds,
    seed: u64,
    init: Option<Matrix>,
    state: Option<CmaState>,
    rng: ChaCha8Rng,
}

impl CmaBackbone {
    fn new(sigma_fraction: f64, population: Option<usize>, bounds: Bounds, seed: u64) -> Result<Self> {
        if !(sigma_fraction > 0.0) {
            return Err(DynamoError::precondition("sigma fraction must be positive"));
        }
        Ok(CmaBackbone {
            sigma_fraction,
            population,
            bounds,
            seed,
            init: None,
            state: None,
            rng: stream_rng(seed, Stream::Optimizer, 0),
        })
    }
}

impl Backbone for CmaBackbone {
    fn name(&self) -> &str {
        "cma-es"
    }

    fn reset(&mut self, init: &Matrix, phase: u64) -> Result<()> {
        self.init = Some(init.clone());
        self.state = None;
        self.rng = stream_rng(self.seed, Stream::Optimizer, phase);
        Ok(())
    }

    fn propose(&mut self, f: &dyn ScoreFn, b: usize) -> Result<Matrix> {
        if self.state.is_none() {
            let init = self
                .init
                .as_ref()
                .ok_or_else(|| DynamoError::precondition("optimizer used before reset"))?;
            let scores = f.score_batch(init)?;
            let best = argmax(&scores).ok_or_else(|| DynamoError::precondition("empty initial batch"))?;
            let sigma = self.sigma_fraction * self.bounds.mean_width();
            self.state = Some(CmaState::new(init.row(best), sigma, self.population)?);
        }
        let st = self.state.as_mut().expect("state initialized above");
        let mut out = Matrix::zeros(0, self.bounds.lower.len());
        while out.rows() < b {
            let (pop, _) = st.step(f, &self.bounds.lower, &self.bounds.upper, &mut self.rng)?;
            for r in pop.iter_rows() {
                if out.rows() < b {
                    out.push_row(r)?;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug)]
enum BoRule {
    Ucb(f64),
    Ei,
}

/// GP-based batch BO. The history is rescored under the current objective
/// on every call, and only the most recent `max_history` designs are kept.
pub struct BoBackbone {
    rule: BoRule,
    gp: GpConfig,
    acquisition: BoConfig,
    max_history: usize,
    bounds: Bounds,
    seed: u64,
    phase: u64,
    calls: u64,
    history: Matrix,
}

impl BoBackbone {
    fn new(rule: BoRule, gp: GpConfig, acquisition: BoConfig, max_history: usize, bounds: Bounds, seed: u64) -> Self {
        let d = bounds.lower.len();
        BoBackbone {
            rule,
            gp,
            acquisition,
            max_history: max_history.max(2),
            bounds,
            seed,
            phase: 0,
            calls: 0,
            history: Matrix::zeros(0, d),
        }
    }
}

impl Backbone for BoBackbone {
    fn name(&self) -> &str {
        match self.rule {
            BoRule::Ucb(_) => "bo-qucb",
            BoRule::Ei => "bo-qei",
        }
    }

    fn reset(&mut self, init: &Matrix, phase: u64) -> Result<()> {
        self.history = init.clone();
        self.phase = phase;
        self.calls = 0;
        Ok(())
    }

    fn propose(&mut self, f: &dyn ScoreFn, b: usize) -> Result<Matrix> {
        if self.history.rows() < 2 {
            return Err(DynamoError::precondition("BO needs at least two initial designs"));
        }
        let n = self.history.rows();
        let keep: Vec<usize> = (n.saturating_sub(self.max_history)..n).collect();
        let xs = self.history.select_rows(&keep);
        let ys = f.score_batch(&xs)?;
        let model = gp_fit(&xs, &ys, &self.gp)?;
        let kind = match self.rule {
            BoRule::Ucb(beta_ucb) => Acquisition::Qucb { beta_ucb },
            BoRule::Ei => Acquisition::Qei {
                best_so_far: ys.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            },
        };
        let seed = self
            .seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add((self.phase << 32) | self.calls);
        self.calls += 1;
        let batch = bo_acquire(&model, kind, b, &self.bounds.lower, &self.bounds.upper, seed, &self.acquisition)?;
        for r in batch.iter_rows() {
            self.history.push_row(r)?;
        }
        Ok(batch)
    }
}

pub(crate) fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, x) in v.iter().enumerate() {
        if best.is_none_or(|b| *x > v[b]) {
            best = Some(i);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::FnScore;

    fn bump() -> impl ScoreFn {
        FnScore::new(
            2,
            |x: &[f64]| -((x[0] - 1.0).powi(2) + (x[1] + 0.5).powi(2)),
            |x: &[f64]| vec![-2.0 * (x[0] - 1.0), -2.0 * (x[1] + 0.5)],
        )
    }

    #[test]
    fn every_backbone_respects_bounds_and_is_deterministic() {
        let lo = [-4.0, -4.0];
        let hi = [4.0, 4.0];
        let init = sobol_init(2, 16, &lo, &hi, 1).unwrap();
        let mut kinds = vec![
            OptimizerKind::from_name("grad").unwrap(),
            OptimizerKind::from_name("adam").unwrap(),
            OptimizerKind::from_name("cma-es").unwrap(),
        ];
        for name in ["bo-qucb", "bo-qei"] {
            let mut k = OptimizerKind::from_name(name).unwrap();
            match &mut k {
                OptimizerKind::BoQucb { gp, acquisition, .. } | OptimizerKind::BoQei { gp, acquisition, .. } => {
                    gp.steps = 10;
                    acquisition.pool_size = 128;
                    acquisition.refine = 8;
                }
                _ => unreachable!(),
            }
            kinds.push(k);
        }
        let f = bump();
        for kind in kinds {
            let run = || {
                let mut bb = kind.build(&lo, &hi, 7).unwrap();
                bb.reset(&init, 0).unwrap();
                (0..3).map(|_| bb.propose(&f, 16).unwrap()).collect::<Vec<_>>()
            };
            let a = run();
            assert_eq!(a, run(), "{}", kind.name());
            for m in &a {
                assert_eq!(m.rows(), 16);
                assert!(m.as_slice().iter().all(|v| (-4.0..=4.0).contains(v)));
            }
        }
    }

    #[test]
    fn unknown_optimizer_rejected() {
        assert!(OptimizerKind::from_name("simplex").is_err());
    }

    #[test]
    fn propose_before_reset_fails() {
        let mut bb = OptimizerKind::from_name("adam").unwrap().build(&[0.0], &[1.0], 0).unwrap();
        let f = FnScore::new(1, |_: &[f64]| 0.0, |_: &[f64]| vec![0.0]);
        assert!(bb.propose(&f, 4).is_err());
    }
}
