//! Banded linear solves for the diagonally dominant systems that arise from
//! absorbing chains on intervals.

use crate::error::{Error, Result};

/// Square band matrix with `lower` sub- and `upper` super-diagonals, stored
/// row-wise as `rows[i][j - i + lower]`.
#[derive(Clone, Debug)]
pub struct BandMatrix {
    n: usize,
    lower: usize,
    upper: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, lower: usize, upper: usize) -> Self {
        BandMatrix { n, lower, upper, data: vec![0.0; n * (lower + upper + 1)] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn width(&self) -> usize {
        self.lower + self.upper + 1
    }

    fn in_band(&self, i: usize, j: usize) -> bool {
        j + self.lower >= i && j <= i + self.upper
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if self.in_band(i, j) {
            self.data[i * self.width() + j + self.lower - i]
        } else {
            0.0
        }
    }

    /// Adds `v` at `(i, j)`; panics outside the band.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        assert!(self.in_band(i, j), "({i}, {j}) outside band");
        let w = self.width();
        self.data[i * w + j + self.lower - i] += v;
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let lo = i.saturating_sub(self.lower);
                let hi = (i + self.upper).min(self.n - 1);
                (lo..=hi).map(|j| self.get(i, j) * x[j]).sum()
            })
            .collect()
    }

    /// Solves `A X = B` for several right-hand sides by Gaussian elimination
    /// without pivoting. Valid for diagonally dominant matrices (by rows or by
    /// columns), which is what absorbing-chain systems produce.
    pub fn solve_many(&self, rhs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let n = self.n;
        let (lo, up, w) = (self.lower, self.upper, self.width());
        let mut a = self.data.clone();
        let mut b: Vec<Vec<f64>> = rhs.to_vec();
        for col in b.iter() {
            assert_eq!(col.len(), n);
        }
        let idx = |i: usize, j: usize| i * w + j + lo - i;
        for k in 0..n {
            let pivot = a[idx(k, k)];
            if pivot.abs() < 1e-300 || !pivot.is_finite() {
                return Err(Error::Singular(format!("zero pivot at row {k}")));
            }
            let last_row = (k + lo).min(n - 1);
            let last_col = (k + up).min(n - 1);
            for i in k + 1..=last_row {
                let factor = a[idx(i, k)] / pivot;
                if factor == 0.0 {
                    continue;
                }
                a[idx(i, k)] = 0.0;
                for j in k + 1..=last_col {
                    a[idx(i, j)] -= factor * a[idx(k, j)];
                }
                for col in b.iter_mut() {
                    col[i] -= factor * col[k];
                }
            }
        }
        for col in b.iter_mut() {
            for i in (0..n).rev() {
                let last_col = (i + up).min(n - 1);
                let mut s = col[i];
                for j in i + 1..=last_col {
                    s -= a[idx(i, j)] * col[j];
                }
                col[i] = s / a[idx(i, i)];
            }
        }
        Ok(b)
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        Ok(self.solve_many(&[rhs.to_vec()])?.pop().expect("one column"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn matches_dense_lu(n in 1usize..25, lower in 0usize..4, upper in 0usize..4) {
            let mut band = BandMatrix::zeros(n, lower, upper);
            let mut dense = DMatrix::<f64>::zeros(n, n);
            for i in 0..n {
                let mut off = 0.0;
                for j in i.saturating_sub(lower)..=(i + upper).min(n - 1) {
                    if i != j {
                        let v = -(((i * 31 + j * 17) % 7) as f64) / 10.0;
                        band.add(i, j, v);
                        dense[(i, j)] = v;
                        off += v.abs();
                    }
                }
                band.add(i, i, off + 1.0);
                dense[(i, i)] = off + 1.0;
            }
            let rhs: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
            let x = band.solve(&rhs).unwrap();
            let y = dense.lu().solve(&DVector::from_vec(rhs)).unwrap();
            for i in 0..n {
                prop_assert!((x[i] - y[i]).abs() < 1e-12);
            }
        }
    }
}
