//! Dense real linear algebra, deterministic seeded randomness, activation
//! functions, and a finite-difference gradient oracle used by tests.
//!
//! Everything here is 64-bit; there is no mixed precision anywhere in the
//! crate because several contracts (timestamp masking, frozen-coordinate
//! training, exact zero removal) are checked with bitwise equality.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("finite-difference oracle evaluated to a non-finite value at coordinate {coord}")]
    NonFinite { coord: usize },
}

/// Dense row-major matrix of `f64`.
///
/// Sparsity in this crate is value-level (exact `0.0` entries produced by
/// proximal steps); storage is always dense.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from row slices, validating shape and finiteness.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        if rows.is_empty() {
            return Err(NumericsError::Shape("matrix needs at least one row".into()));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(NumericsError::Shape(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        let m = Matrix {
            rows: rows.len(),
            cols,
            data,
        };
        m.check_finite()?;
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn check_finite(&self) -> Result<(), NumericsError> {
        if self.data.len() != self.rows * self.cols {
            return Err(NumericsError::Shape(format!(
                "data length {} != {}x{}",
                self.data.len(),
                self.rows,
                self.cols
            )));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::Argument(format!(
                "non-finite entry at flat index {i}"
            )));
        }
        Ok(())
    }

    /// Standard matrix product; errors when inner dimensions disagree.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, NumericsError> {
        if self.cols != other.rows {
            return Err(NumericsError::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                for c in 0..other.cols {
                    out.data[r * other.cols + c] += a * other.get(k, c);
                }
            }
        }
        Ok(out)
    }

    /// Appends a column; `values` must have one entry per existing row.
    pub fn push_col(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.rows, "column length mismatch");
        let old_cols = self.cols;
        let mut data = Vec::with_capacity(self.rows * (old_cols + 1));
        for r in 0..self.rows {
            data.extend_from_slice(&self.data[r * old_cols..(r + 1) * old_cols]);
            data.push(values[r]);
        }
        self.cols += 1;
        self.data = data;
    }

    /// Appends a row; `values` must have one entry per existing column.
    pub fn push_row(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.cols, "row length mismatch");
        self.data.extend_from_slice(values);
        self.rows += 1;
    }

    pub fn remove_col(&mut self, c: usize) {
        assert!(c < self.cols, "column out of range");
        let old_cols = self.cols;
        let mut data = Vec::with_capacity(self.rows * (old_cols - 1));
        for r in 0..self.rows {
            for cc in 0..old_cols {
                if cc != c {
                    data.push(self.data[r * old_cols + cc]);
                }
            }
        }
        self.cols -= 1;
        self.data = data;
    }

    pub fn remove_row(&mut self, r: usize) {
        assert!(r < self.rows, "row out of range");
        self.data.drain(r * self.cols..(r + 1) * self.cols);
        self.rows -= 1;
    }
}

/// Rectified linear unit. Negative and exactly-zero inputs map to `0.0`,
/// which also canonicalizes `-0.0` so downstream bitwise comparisons see a
/// single zero representation.
#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Subgradient of [`relu`], fixed to `0.0` at the kink so gradient checks are
/// reproducible.
#[inline]
pub fn relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Numerically stable logistic function: the exponential argument is always
/// non-positive, so extreme scores saturate instead of overflowing.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Deterministic xoshiro256** generator seeded through splitmix64.
///
/// The algorithm is fixed so checkpoints can name it and identical seeds
/// yield identical streams on every platform. Not cryptographic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeededRng {
    seed: u64,
    state: [u64; 4],
}

/// Generator name recorded in checkpoints next to the serialized state.
pub const RNG_ALGORITHM: &str = "xoshiro256**";

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let mut next_sm = || {
            sm = sm.wrapping_add(0x9E3779B97F4A7C15);
            let mut z = sm;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
            z ^ (z >> 31)
        };
        let state = [next_sm(), next_sm(), next_sm(), next_sm()];
        SeededRng { seed, state }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform draw in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller. Stateless (no cached second draw) so
    /// the stream position is a pure function of the call count.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // in (0, 1], keeps ln finite
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Unbiased draw in `[0, n)` by rejection.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h`.
///
/// Lives here so tests can check every analytic gradient in the crate against
/// an oracle that never touches the backpropagation path.
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<f64>, NumericsError>
where
    F: FnMut(&[f64]) -> f64,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(NumericsError::Argument(format!("step must be positive, got {h}")));
    }
    let mut work = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        work[i] = theta[i] + h;
        let up = f(&work);
        work[i] = theta[i] - h;
        let down = f(&work);
        work[i] = theta[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(NumericsError::NonFinite { coord: i });
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let id = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(id.matmul(&a).unwrap(), a);
        assert_eq!(a.matmul(&id).unwrap(), a);
    }

    #[test]
    fn matmul_hand_example() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.rows(), 2);
        assert_eq!(c.cols(), 1);
        assert_eq!(c.get(0, 0), 3.0);
        assert_eq!(c.get(1, 0), 7.0);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let z = Matrix::zeros(3, 2);
        let a = Matrix::from_rows(&[vec![1.0, -2.0, 0.5], vec![4.0, 0.0, 1.0]]).unwrap();
        let c = z.matmul(&a).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_rejects_dimension_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(NumericsError::Shape(_))));
    }

    #[test]
    fn matmul_associative_on_random_triples() {
        let mut rng = SeededRng::new(11);
        for _ in 0..20 {
            let (m, k, n, p) = (
                1 + rng.next_below(5) as usize,
                1 + rng.next_below(5) as usize,
                1 + rng.next_below(5) as usize,
                1 + rng.next_below(5) as usize,
            );
            let mk = |r: usize, c: usize, rng: &mut SeededRng| {
                let rows: Vec<Vec<f64>> = (0..r)
                    .map(|_| (0..c).map(|_| rng.uniform(-1.0, 1.0)).collect())
                    .collect();
                Matrix::from_rows(&rows).unwrap()
            };
            let a = mk(m, k, &mut rng);
            let b = mk(k, n, &mut rng);
            let c = mk(n, p, &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                assert!((x - y).abs() < 1e-9, "associativity violated: {x} vs {y}");
            }
        }
    }

    #[test]
    fn row_and_col_edits() {
        let mut m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        m.push_col(&[5.0, 6.0]);
        assert_eq!(m.row(0), &[1.0, 2.0, 5.0]);
        m.push_row(&[7.0, 8.0, 9.0]);
        assert_eq!(m.rows(), 3);
        m.remove_col(1);
        assert_eq!(m.row(0), &[1.0, 5.0]);
        m.remove_row(0);
        assert_eq!(m.row(0), &[3.0, 6.0]);
        assert_eq!(m.rows(), 2);
    }

    #[test]
    fn relu_cases() {
        assert_eq!(relu(0.0), 0.0);
        assert_eq!(relu(-2.5), 0.0);
        assert_eq!(relu_grad(-2.5), 0.0);
        assert_eq!(relu(1.5), 1.5);
        assert_eq!(relu_grad(1.5), 1.0);
        assert_eq!(relu_grad(0.0), 0.0);
        // -0.0 canonicalizes to +0.0
        assert_eq!(relu(-0.0).to_bits(), 0.0f64.to_bits());
    }

    #[test]
    fn sigmoid_cases() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!((sigmoid(3.0f64.ln()) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn rng_streams_repeat_bit_exactly() {
        let mut a = SeededRng::new(123);
        let mut b = SeededRng::new(123);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = SeededRng::new(124);
        let first: Vec<u64> = (0..8).map(|_| SeededRng::new(123).next_u64()).collect();
        assert!(first.iter().any(|&v| v != c.next_u64()));
    }

    #[test]
    fn rng_uniform_range_and_normal_moments() {
        let mut rng = SeededRng::new(5);
        for _ in 0..1000 {
            let v = rng.next_f64();
            assert!((0.0..1.0).contains(&v));
        }
        let n = 20_000;
        let draws: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "normal mean drifted: {mean}");
        assert!((var - 1.0).abs() < 0.05, "normal variance drifted: {var}");
    }

    #[test]
    fn finite_diff_constant_is_zero() {
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 3.0], 1e-5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn finite_diff_quadratic_matches_analytic() {
        let f = |t: &[f64]| 0.5 * t.iter().map(|v| v * v).sum::<f64>();
        let g = finite_diff_grad(f, &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-9);
        assert!((g[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn finite_diff_product_matches_analytic() {
        let f = |t: &[f64]| t[0] * t[1];
        let g = finite_diff_grad(f, &[3.0, 4.0], 1e-5).unwrap();
        assert!((g[0] - 4.0).abs() < 1e-9);
        assert!((g[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn finite_diff_rejects_bad_inputs() {
        assert!(finite_diff_grad(|_| 1.0, &[0.0], 0.0).is_err());
        let err = finite_diff_grad(|t| if t[0] > 0.5 { f64::NAN } else { 1.0 }, &[0.5], 1e-2);
        assert_eq!(err, Err(NumericsError::NonFinite { coord: 0 }));
    }
}
