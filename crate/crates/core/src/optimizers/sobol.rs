use rand::Rng;

use super::sobol_table::{MAX_DIM, POLY, VINIT};
use crate::error::{DynamoError, Result};
use crate::matrix::Matrix;
use crate::rng::seeded;

const BITS: usize = 32;
const SCALE: f64 = 1.0 / 4_294_967_296.0;

/// Gray-code Sobol generator with 32-bit direction numbers, optionally
/// scrambled by a random lower-triangular linear matrix and a digital shift.
#[derive(Clone, Debug)]
pub struct SobolSequence {
    dim: usize,
    directions: Vec<[u32; BITS]>,
    state: Vec<u32>,
    index: u64,
}

impl SobolSequence {
    /// The unscrambled sequence; the first point returned is index 0 (all zeros).
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(DynamoError::UnsupportedDimension {
                requested: dim,
                max: MAX_DIM,
            });
        }
        let directions = (0..dim).map(direction_numbers).collect();
        Ok(SobolSequence {
            dim,
            directions,
            state: vec![0; dim],
            index: 0,
        })
    }

    /// A scrambled sequence drawn from `rng`.
    pub fn scrambled<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<Self> {
        let mut seq = Self::new(dim)?;
        for j in 0..dim {
            let v = &mut seq.directions[j];
            let mut rows = [0u32; BITS];
            for (i, row) in rows.iter_mut().enumerate() {
                // row i maps output digit i (most significant first) to input digits <= i
                let diag = 1u32 << (BITS - 1 - i);
                let high = if i == 0 { 0 } else { !0u32 << (BITS - i) };
                *row = diag | (rng.random::<u32>() & high);
            }
            for k in 0..BITS {
                let mut out = 0u32;
                for (i, row) in rows.iter().enumerate() {
                    if (row & v[k]).count_ones() % 2 == 1 {
                        out |= 1 << (BITS - 1 - i);
                    }
                }
                v[k] = out;
            }
            seq.state[j] = rng.random::<u32>();
        }
        Ok(seq)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Index of the next point to be returned.
    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn next_point(&mut self) -> Vec<f64> {
        let out = self.state.iter().map(|&s| s as f64 * SCALE).collect();
        let c = (!self.index).trailing_zeros() as usize;
        if c < BITS {
            for (s, v) in self.state.iter_mut().zip(&self.directions) {
                *s ^= v[c];
            }
        }
        self.index += 1;
        out
    }

    pub fn skip(&mut self, n: u64) {
        for _ in 0..n {
            self.next_point();
        }
    }

    /// Next `n` points as rows of a matrix.
    pub fn take(&mut self, n: usize) -> Matrix {
        let mut data = Vec::with_capacity(n * self.dim);
        for _ in 0..n {
            data.extend(self.next_point());
        }
        Matrix::from_vec(n, self.dim, data).expect("shape is consistent")
    }
}

fn direction_numbers(j: usize) -> [u32; BITS] {
    let mut v = [0u32; BITS];
    if j == 0 {
        for (k, vk) in v.iter_mut().enumerate() {
            *vk = 1 << (BITS - 1 - k);
        }
        return v;
    }
    let p = POLY[j];
    let s = (32 - p.leading_zeros() - 1) as usize;
    let a = (p >> 1) & ((1 << (s - 1)) - 1);
    let mut m = vec![0u32; BITS];
    m[..s].copy_from_slice(&VINIT[j][..s]);
    for k in s..BITS {
        let mut val = m[k - s] ^ (m[k - s] << s);
        for i in 1..s {
            if (a >> (s - 1 - i)) & 1 == 1 {
                val ^= m[k - i] << i;
            }
        }
        m[k] = val;
    }
    for k in 0..BITS {
        v[k] = m[k] << (BITS - 1 - k);
    }
    v
}

/// Maps unit-cube rows affinely onto `[lower, upper]`.
pub fn scale_to_bounds(unit: &Matrix, lower: &[f64], upper: &[f64]) -> Matrix {
    let mut out = unit.clone();
    for i in 0..out.rows() {
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            *v = lower[j] + *v * (upper[j] - lower[j]);
        }
    }
    out
}

/// First `b` points of a seeded scrambled Sobol sequence (index 0 skipped),
/// mapped onto the box `[lower, upper]`.
pub fn sobol_init(d: usize, b: usize, lower: &[f64], upper: &[f64], seed: u64) -> Result<Matrix> {
    if b == 0 {
        return Err(DynamoError::precondition("batch size must be >= 1"));
    }
    if lower.len() != d || upper.len() != d {
        return Err(DynamoError::domain("bounds do not match dimension"));
    }
    if lower.iter().zip(upper).any(|(l, u)| !(l < u)) {
        return Err(DynamoError::domain("lower bound must be below upper bound"));
    }
    let mut seq = SobolSequence::scrambled(d, &mut seeded(seed))?;
    seq.skip(1);
    Ok(scale_to_bounds(&seq.take(b), lower, upper))
}
