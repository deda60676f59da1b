use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{DynamoError, Result};
use crate::matrix::Matrix;
use crate::objective::ScoreFn;

const EIGEN_FLOOR: f64 = 1e-12;

/// Default population size `4 + floor(3 ln d)`.
pub fn default_population(d: usize) -> usize {
    4 + (3.0 * (d as f64).ln()).floor() as usize
}

/// State of a (mu/mu_w, lambda) CMA-ES maximizer.
#[derive(Clone, Debug)]
pub struct CmaState {
    mean: DVector<f64>,
    sigma: f64,
    cov: DMatrix<f64>,
    p_sigma: DVector<f64>,
    p_c: DVector<f64>,
    basis: DMatrix<f64>,
    scales: DVector<f64>,
    population: usize,
    weights: Vec<f64>,
    mu_eff: f64,
    c_sigma: f64,
    d_sigma: f64,
    c_c: f64,
    c1: f64,
    c_mu: f64,
    chi_n: f64,
    generation: u64,
    repairs: u64,
}

impl CmaState {
    pub fn new(mean: &[f64], sigma: f64, population: Option<usize>) -> Result<Self> {
        let n = mean.len();
        if n == 0 {
            return Err(DynamoError::precondition("CMA-ES needs dimension >= 1"));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(DynamoError::precondition("initial step size must be positive"));
        }
        let lambda = population.unwrap_or_else(|| default_population(n)).max(2);
        let mu = lambda / 2;
        let raw: Vec<f64> = (1..=mu).map(|i| (mu as f64 + 0.5).ln() - (i as f64).ln()).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let nf = n as f64;
        let c_sigma = (mu_eff + 2.0) / (nf + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / nf) / (nf + 4.0 + 2.0 * mu_eff / nf);
        let c1 = 2.0 / ((nf + 1.3).powi(2) + mu_eff);
        let c_mu = (1.0 - c1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((nf + 2.0).powi(2) + mu_eff));
        let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));
        Ok(CmaState {
            mean: DVector::from_column_slice(mean),
            sigma,
            cov: DMatrix::identity(n, n),
            p_sigma: DVector::zeros(n),
            p_c: DVector::zeros(n),
            basis: DMatrix::identity(n, n),
            scales: DVector::from_element(n, 1.0),
            population: lambda,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c1,
            c_mu,
            chi_n,
            generation: 0,
            repairs: 0,
        })
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn population(&self) -> usize {
        self.population
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Number of times the covariance needed an eigenvalue floor.
    pub fn repairs(&self) -> u64 {
        self.repairs
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    fn decompose(&mut self) {
        let n = self.cov.nrows();
        let sym = (&self.cov + self.cov.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym.clone());
        let mut vals = eig.eigenvalues.clone();
        let mut repaired = false;
        for v in vals.iter_mut() {
            if !(*v >= EIGEN_FLOOR) {
                *v = EIGEN_FLOOR;
                repaired = true;
            }
        }
        if repaired {
            self.repairs += 1;
            log::debug!("CMA-ES covariance repaired at generation {}", self.generation);
            self.cov = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
        } else {
            self.cov = sym;
        }
        self.basis = eig.eigenvectors;
        self.scales = DVector::from_iterator(n, vals.iter().map(|v| v.sqrt()));
    }

    /// Samples a population, scores it, and applies the standard update.
    /// Returns the (reflected) population and its scores.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        f: &dyn ScoreFn,
        lower: &[f64],
        upper: &[f64],
        rng: &mut R,
    ) -> Result<(Matrix, Vec<f64>)> {
        let n = self.mean.len();
        let lambda = self.population;
        let mut pop = Matrix::zeros(lambda, n);
        for i in 0..lambda {
            let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let y = &self.basis * self.scales.component_mul(&z);
            let row = pop.row_mut(i);
            for j in 0..n {
                row[j] = reflect(self.mean[j] + self.sigma * y[j], lower[j], upper[j]);
            }
        }
        let scores = f.score_batch(&pop)?;
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(DynamoError::numeric(format!("non-finite score for population member {i}")));
        }
        self.update(&pop, &scores);
        Ok((pop, scores))
    }

    /// Updates mean, paths, covariance and step size from a scored population.
    pub fn update(&mut self, pop: &Matrix, scores: &[f64]) {
        let n = self.mean.len();
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let old_mean = self.mean.clone();
        let ys: Vec<DVector<f64>> = order
            .iter()
            .take(self.weights.len())
            .map(|&i| (DVector::from_column_slice(pop.row(i)) - &old_mean) / self.sigma)
            .collect();
        let mut y_w = DVector::zeros(n);
        for (w, y) in self.weights.iter().zip(&ys) {
            y_w += y * *w;
        }
        self.mean = &old_mean + &y_w * self.sigma;

        let inv_sqrt = &self.basis
            * DMatrix::from_diagonal(&self.scales.map(|s| 1.0 / s))
            * self.basis.transpose();
        let cs = self.c_sigma;
        self.p_sigma = &self.p_sigma * (1.0 - cs) + (&inv_sqrt * &y_w) * (cs * (2.0 - cs) * self.mu_eff).sqrt();
        self.generation += 1;
        let norm_ps = self.p_sigma.norm();
        let denom = (1.0 - (1.0 - cs).powi(2 * self.generation as i32)).sqrt();
        let h_sigma = if norm_ps / denom < (1.4 + 2.0 / (n as f64 + 1.0)) * self.chi_n {
            1.0
        } else {
            0.0
        };
        let cc = self.c_c;
        self.p_c = &self.p_c * (1.0 - cc) + &y_w * (h_sigma * (cc * (2.0 - cc) * self.mu_eff).sqrt());
        let mut rank_mu = DMatrix::zeros(n, n);
        for (w, y) in self.weights.iter().zip(&ys) {
            rank_mu += y * y.transpose() * *w;
        }
        let rank_one = &self.p_c * self.p_c.transpose();
        let correction = (1.0 - h_sigma) * cc * (2.0 - cc);
        self.cov = &self.cov * (1.0 - self.c1 - self.c_mu)
            + (rank_one + &self.cov * correction) * self.c1
            + rank_mu * self.c_mu;
        self.sigma *= ((cs / self.d_sigma) * (norm_ps / self.chi_n - 1.0)).exp();
        if !(self.sigma > 1e-300) {
            self.sigma = 1e-300;
        } else if !self.sigma.is_finite() {
            self.sigma = 1e300;
        }
        self.decompose();
    }
}

/// Folds `x` back into `[lo, hi]` by mirror reflection at the walls.
pub fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    if x >= lo && x <= hi {
        return x;
    }
    let w = hi - lo;
    let mut t = (x - lo).rem_euclid(2.0 * w);
    if t > w {
        t = 2.0 * w - t;
    }
    lo + t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::FnScore;
    use crate::rng::seeded;

    fn sphere(d: usize) -> impl ScoreFn {
        FnScore::new(
            d,
            |x: &[f64]| -x.iter().map(|v| v * v).sum::<f64>(),
            |x: &[f64]| x.iter().map(|v| -2.0 * v).collect(),
        )
    }

    #[test]
    fn population_size() {
        assert_eq!(default_population(2), 6);
        assert_eq!(default_population(5), 8);
        assert_eq!(default_population(32), 14);
    }

    #[test]
    fn solves_sphere() {
        let f = sphere(5);
        let mut st = CmaState::new(&[2.0, -1.0, 3.0, 0.5, -2.5], 2.4, None).unwrap();
        let mut rng = seeded(1);
        let mut best = f64::NEG_INFINITY;
        for _ in 0..200 {
            let (_, s) = st.step(&f, &[-4.0; 5], &[4.0; 5], &mut rng).unwrap();
            best = s.iter().copied().fold(best, f64::max);
            assert!(st.sigma() > 0.0);
        }
        assert!(best > -1e-6, "{best}");
    }

    #[test]
    fn same_seed_same_populations() {
        let f = sphere(3);
        let run = || {
            let mut st = CmaState::new(&[1.0; 3], 1.0, None).unwrap();
            let mut rng = seeded(9);
            (0..5)
                .map(|_| st.step(&f, &[-4.0; 3], &[4.0; 3], &mut rng).unwrap().0)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn reflection_stays_in_box() {
        assert_eq!(reflect(4.5, -4.0, 4.0), 3.5);
        assert_eq!(reflect(-5.0, -4.0, 4.0), -3.0);
        assert_eq!(reflect(20.0, -4.0, 4.0), 4.0);
        assert_eq!(reflect(14.0, -4.0, 4.0), -2.0);
        assert_eq!(reflect(1.0, -4.0, 4.0), 1.0);
    }

    #[test]
    fn covariance_stays_symmetric_positive_definite() {
        let f = sphere(4);
        let mut st = CmaState::new(&[0.5; 4], 1.0, None).unwrap();
        let mut rng = seeded(2);
        for _ in 0..50 {
            st.step(&f, &[-4.0; 4], &[4.0; 4], &mut rng).unwrap();
            let c = st.covariance();
            assert!((c - c.transpose()).abs().max() < 1e-12);
            assert!(SymmetricEigen::new(c.clone()).eigenvalues.min() > 0.0);
        }
    }
}
