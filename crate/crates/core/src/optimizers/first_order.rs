use serde::{Deserialize, Serialize};

use crate::error::{DynamoError, Result};
use crate::matrix::Matrix;
use crate::neural::AdamState;
use crate::objective::ScoreFn;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AscentMethod {
    Grad,
    Adam,
}

/// Per-row optimizer state carried across calls to [`Ascender::step`].
#[derive(Clone, Debug)]
pub struct Ascender {
    method: AscentMethod,
    lr: f64,
    adam: Vec<AdamState>,
}

impl Ascender {
    pub fn new(method: AscentMethod, lr: f64, rows: usize, dim: usize) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(DynamoError::precondition(format!("learning rate must be positive, got {lr}")));
        }
        let adam = match method {
            AscentMethod::Adam => (0..rows).map(|_| AdamState::new(dim, lr)).collect(),
            AscentMethod::Grad => Vec::new(),
        };
        Ok(Ascender { method, lr, adam })
    }

    /// One ascent step on every row, clipping to the box afterwards.
    pub fn step(&mut self, f: &dyn ScoreFn, xs: &mut Matrix, lower: &[f64], upper: &[f64]) -> Result<()> {
        for i in 0..xs.rows() {
            let (v, g) = f.score_and_grad(xs.row(i))?;
            if !v.is_finite() || g.iter().any(|x| !x.is_finite()) {
                return Err(DynamoError::numeric(format!("non-finite score or gradient at row {i}")));
            }
            let row = xs.row_mut(i);
            match self.method {
                AscentMethod::Grad => {
                    for (x, gj) in row.iter_mut().zip(&g) {
                        *x += self.lr * gj;
                    }
                }
                AscentMethod::Adam => self.adam[i].ascend(row, &g),
            }
            clip(row, lower, upper);
        }
        Ok(())
    }
}

pub(crate) fn clip(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, lo), hi) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(*lo, *hi);
    }
}

/// Ascends every row of `x0` independently for `steps` steps.
pub fn ascend(
    f: &dyn ScoreFn,
    x0: &Matrix,
    steps: usize,
    lr: f64,
    method: AscentMethod,
    lower: &[f64],
    upper: &[f64],
) -> Result<Matrix> {
    if steps == 0 {
        return Err(DynamoError::precondition("steps must be >= 1"));
    }
    let mut ascender = Ascender::new(method, lr, x0.rows(), x0.cols())?;
    let mut xs = x0.clone();
    for i in 0..xs.rows() {
        clip(xs.row_mut(i), lower, upper);
    }
    for _ in 0..steps {
        ascender.step(f, &mut xs, lower, upper)?;
    }
    Ok(xs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::FnScore;

    fn bowl() -> impl ScoreFn {
        FnScore::new(
            2,
            |x: &[f64]| -(x[0] * x[0] + x[1] * x[1]),
            |x: &[f64]| vec![-2.0 * x[0], -2.0 * x[1]],
        )
    }

    #[test]
    fn gradient_ascent_reaches_peak() {
        let x0 = Matrix::from_rows(&[[3.0, -2.0], [-1.0, 1.5]]).unwrap();
        let out = ascend(&bowl(), &x0, 200, 0.1, AscentMethod::Grad, &[-4.0; 2], &[4.0; 2]).unwrap();
        assert!(out.as_slice().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn adam_reaches_peak_within_500_steps() {
        let x0 = Matrix::from_rows(&[[3.0, 3.0]]).unwrap();
        let out = ascend(&bowl(), &x0, 500, 0.05, AscentMethod::Adam, &[-4.0; 2], &[4.0; 2]).unwrap();
        let norm = out.row(0).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-2, "{norm}");
    }

    #[test]
    fn zero_learning_rate_rejected() {
        let x0 = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        let err = ascend(&bowl(), &x0, 5, 0.0, AscentMethod::Grad, &[-4.0; 2], &[4.0; 2]).unwrap_err();
        assert!(matches!(err, DynamoError::Precondition(_)));
    }

    #[test]
    fn iterates_stay_in_bounds() {
        let up = FnScore::new(1, |x: &[f64]| x[0], |_: &[f64]| vec![1.0]);
        let x0 = Matrix::from_rows(&[[0.0]]).unwrap();
        let out = ascend(&up, &x0, 100, 1.0, AscentMethod::Adam, &[-1.0], &[1.0]).unwrap();
        assert_eq!(out.get(0, 0), 1.0);
    }

    #[test]
    fn nan_score_names_row() {
        let bad = FnScore::new(1, |x: &[f64]| if x[0] > 0.5 { f64::NAN } else { 0.0 }, |_: &[f64]| vec![0.0]);
        let x0 = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        let err = ascend(&bad, &x0, 1, 0.1, AscentMethod::Grad, &[-2.0], &[2.0]).unwrap_err();
        assert!(err.to_string().contains("row 1"));
    }
}
