//! Dense linear algebra, activations and seeded randomness.
//!
//! Everything here works on `f64`. Matrices are small (the largest ones in
//! practice are `C x C` class-space scatter matrices and RBM weight
//! matrices), so the routines favour clarity over blocking or SIMD.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch { expected: rows * cols, actual: data.len() });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix whose rows are the given slices.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch { expected: cols, actual: r.len() });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Builds a matrix whose columns are the given slices.
    pub fn from_columns<R: AsRef<[f64]>>(cols: &[R]) -> Result<Self> {
        Ok(Self::from_rows(cols)?.transpose())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch { expected: self.cols, actual: other.rows });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                let dst = out.row_mut(i);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        Ok(out)
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch { expected: self.cols, actual: x.len() });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `selfᵀ · y`
    pub fn transpose_matvec(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(Error::DimensionMismatch { expected: self.rows, actual: y.len() });
        }
        let mut out = vec![0.0; self.cols];
        for (i, &yi) in y.iter().enumerate() {
            axpy(yi, self.row(i), &mut out);
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm2(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    /// Largest `|a_ij - a_ji|`; `None` for non-square input.
    pub fn asymmetry(&self) -> Option<f64> {
        if self.rows != self.cols {
            return None;
        }
        let n = self.rows;
        let mut worst = 0.0_f64;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        Some(worst)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha · x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Returns `x / ‖x‖₂`, or `None` when the norm is zero.
pub fn normalized(x: &[f64]) -> Option<Vec<f64>> {
    let n = norm2(x);
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    Some(x.iter().map(|v| v / n).collect())
}

/// Logistic function, evaluated so that it saturates instead of overflowing.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax (the maximum is subtracted before exponentiation).
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::EmptyInput);
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite);
    }
    let mut out: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// Leading eigenvalue and unit eigenvector of a symmetric matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenPair {
    pub value: f64,
    pub vector: Vec<f64>,
}

/// Default residual tolerance for [`top_eigenpair`].
pub const EIGEN_TOL: f64 = 1e-10;
/// Default iteration cap for [`top_eigenpair`].
pub const EIGEN_MAX_ITERS: usize = 10_000;

/// Largest (algebraic) eigenpair of a symmetric matrix by power iteration.
///
/// The matrix is shifted by its Gershgorin radius so every eigenvalue of the
/// iterated operator is nonnegative, which makes the dominant direction the
/// algebraically largest one. The shifted operator is first raised to a high
/// power by repeated squaring (each squaring doubles the number of power
/// steps), and the resulting direction is then polished with ordinary power
/// steps until `‖A v − λ v‖₂ ≤ tol · max(1, |λ|)`.
///
/// The returned vector has its first component with magnitude above `1e-12`
/// made positive.
pub fn top_eigenpair(a: &Matrix, tol: f64, max_iters: usize) -> Result<EigenPair> {
    let n = a.rows();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let asym = a.asymmetry().ok_or(Error::DimensionMismatch { expected: a.rows(), actual: a.cols() })?;
    if asym > 1e-10 * a.max_abs().max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    if n == 1 {
        return Ok(EigenPair { value: a.get(0, 0), vector: vec![1.0] });
    }

    let radius = (0..n)
        .map(|i| a.row(i).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0_f64, f64::max);
    if radius == 0.0 {
        let mut vector = vec![0.0; n];
        vector[0] = 1.0;
        return Ok(EigenPair { value: 0.0, vector });
    }

    let mut shifted = a.clone();
    for i in 0..n {
        shifted.set(i, i, shifted.get(i, i) + radius);
    }

    let mut power = shifted.clone();
    scale_to_unit(&mut power);
    for _ in 0..64 {
        let mut next = power.matmul(&power)?;
        if !scale_to_unit(&mut next) {
            break;
        }
        let mut change = 0.0;
        for (x, y) in next.data().iter().zip(power.data()) {
            change += (x - y) * (x - y);
        }
        power = next;
        if change.sqrt() < 1e-15 {
            break;
        }
    }

    let best_col = (0..n)
        .max_by(|&i, &j| {
            let ni = norm2(&power.column(i));
            let nj = norm2(&power.column(j));
            ni.total_cmp(&nj).then(j.cmp(&i))
        })
        .unwrap_or(0);
    let mut v = normalized(&power.column(best_col)).unwrap_or_else(|| {
        let mut e = vec![0.0; n];
        e[0] = 1.0;
        e
    });

    let mut residual = f64::INFINITY;
    for _ in 0..=max_iters {
        let av = a.matvec(&v)?;
        let value = dot(&v, &av);
        residual = av.iter().zip(&v).map(|(x, y)| (x - value * y).powi(2)).sum::<f64>().sqrt();
        if residual <= tol * value.abs().max(1.0) {
            canonicalize_sign(&mut v);
            return Ok(EigenPair { value, vector: v });
        }
        let bv = shifted.matvec(&v)?;
        v = match normalized(&bv) {
            Some(x) => x,
            None => break,
        };
    }
    Err(Error::NoConvergence { iters: max_iters, residual })
}

fn scale_to_unit(m: &mut Matrix) -> bool {
    let f = m.frobenius_norm();
    if f == 0.0 || !f.is_finite() {
        return false;
    }
    for x in m.data_mut() {
        *x /= f;
    }
    true
}

/// Flips `v` so its first component of magnitude above `1e-12` is positive.
pub fn canonicalize_sign(v: &mut [f64]) {
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
    }
}

/// Least-squares solution of `A β ≈ y` via Householder QR.
///
/// `A` must have at least as many rows as columns and full column rank; a
/// diagonal entry of `R` below `1e-10 ×` the largest column norm is treated as
/// rank deficiency.
pub fn least_squares(a: &Matrix, y: &[f64]) -> Result<Vec<f64>> {
    let (n, j) = (a.rows(), a.cols());
    if y.len() != n {
        return Err(Error::DimensionMismatch { expected: n, actual: y.len() });
    }
    if j == 0 {
        return Ok(Vec::new());
    }
    if j > n {
        return Err(Error::DegenerateAtoms);
    }
    let scale = (0..j).map(|c| norm2(&a.column(c))).fold(0.0_f64, f64::max);
    if scale == 0.0 {
        return Err(Error::DegenerateAtoms);
    }

    let mut r = a.clone();
    let mut rhs = y.to_vec();
    for col in 0..j {
        let mut alpha = 0.0;
        for i in col..n {
            alpha += r.get(i, col) * r.get(i, col);
        }
        let alpha = alpha.sqrt();
        if alpha <= 1e-10 * scale {
            return Err(Error::DegenerateAtoms);
        }
        let pivot = r.get(col, col);
        let alpha = if pivot > 0.0 { -alpha } else { alpha };
        let mut v: Vec<f64> = (col..n).map(|i| r.get(i, col)).collect();
        v[0] -= alpha;
        let vnorm2 = dot(&v, &v);
        if vnorm2 > 0.0 {
            for c in col..j {
                let s: f64 = (col..n).map(|i| v[i - col] * r.get(i, c)).sum::<f64>() * 2.0 / vnorm2;
                for i in col..n {
                    r.set(i, c, r.get(i, c) - s * v[i - col]);
                }
            }
            let s: f64 = (col..n).map(|i| v[i - col] * rhs[i]).sum::<f64>() * 2.0 / vnorm2;
            for i in col..n {
                rhs[i] -= s * v[i - col];
            }
        }
        if r.get(col, col).abs() <= 1e-10 * scale {
            return Err(Error::DegenerateAtoms);
        }
    }

    let mut beta = vec![0.0; j];
    for row in (0..j).rev() {
        let mut s = rhs[row];
        for c in (row + 1)..j {
            s -= r.get(row, c) * beta[c];
        }
        beta[row] = s / r.get(row, row);
    }
    Ok(beta)
}

/// Seeded, splittable random stream.
///
/// Backed by the ChaCha8 stream cipher used as a counter-based generator: the
/// 64-bit seed fills the first eight key bytes (little-endian, the remaining
/// key bytes are zero) and the stream id selects an independent keystream.
/// [`RngStream::new`] uses stream id 0. [`RngStream::split`] derives a child
/// whose stream id is `splitmix64(parent_stream ^ splitmix64(key))`, so
/// parallel consumers can be handed disjoint substreams by key.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Independent child stream identified by `key`.
    pub fn split(&self, key: u64) -> Self {
        Self::with_stream(self.seed, splitmix64(self.stream ^ splitmix64(key)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `0..n` (Lemire's multiply-and-reject).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal draw (Box–Muller, one value per call).
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// `m` items drawn uniformly without replacement, in draw order.
    pub fn sample<T: Clone>(&mut self, pool: &[T], m: usize) -> Vec<T> {
        let m = m.min(pool.len());
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        for i in 0..m {
            let j = i + self.below((pool.len() - i) as u64) as usize;
            idx.swap(i, j);
        }
        idx[..m].iter().map(|&i| pool[i].clone()).collect()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
