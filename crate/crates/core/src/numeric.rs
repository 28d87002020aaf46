//! Deterministic numeric substrate: dense `f64` matrices, stable reductions,
//! top-k selection, labelled RNG streams and a central-difference gradient
//! checker used as the test oracle for every analytic gradient in the crate.

use std::ops::{Index, IndexMut};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("k = {k} is out of range for {len} values")]
    KOutOfRange { k: usize, len: usize },
    #[error("function is not finite when perturbing entry ({row}, {col})")]
    NonFiniteFunction { row: usize, col: usize },
    #[error("step must be positive, got {0}")]
    NonPositiveStep(f64),
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat64 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat64 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericError> {
        if rows * cols != data.len() {
            return Err(NumericError::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, NumericError> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(NumericError::DimensionMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// `self += other`; shapes must agree.
    pub fn add_assign(&mut self, other: &Mat64) {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in add_assign");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Mat64) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `x ↦ selfᵀ x` for a matrix stored as `in × out`.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "projection input dimension");
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(i)) {
                *o += xi * w;
            }
        }
        out
    }

    /// `x ↦ self x` for a matrix stored as `out × in`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec input dimension");
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `y ↦ selfᵀ y` for a matrix stored as `out × in`.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        self.project(y)
    }

    /// `self += scale · a bᵀ`.
    pub fn add_outer(&mut self, a: &[f64], b: &[f64], scale: f64) {
        assert_eq!((a.len(), b.len()), self.shape(), "outer product shape");
        for (i, &ai) in a.iter().enumerate() {
            let s = scale * ai;
            if s == 0.0 {
                continue;
            }
            for (x, &bj) in self.row_mut(i).iter_mut().zip(b) {
                *x += s * bj;
            }
        }
    }
}

impl Index<(usize, usize)> for Mat64 {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat64 {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>, NumericError> {
    let n = norm(v);
    if !(n >= ZERO_NORM) {
        return Err(NumericError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// `out[i][j] = cos(x_i, y_j)`, clamped to `[-1, 1]`.
pub fn cosine_sim_matrix<X, Y>(xs: &[X], ys: &[Y]) -> Result<Mat64, NumericError>
where
    X: AsRef<[f64]>,
    Y: AsRef<[f64]>,
{
    let dim = xs
        .first()
        .or(None)
        .map(|x| x.as_ref().len())
        .or_else(|| ys.first().map(|y| y.as_ref().len()))
        .unwrap_or(0);
    let unit = |v: &[f64]| -> Result<Vec<f64>, NumericError> {
        if v.len() != dim {
            return Err(NumericError::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        l2_normalize(v)
    };
    let xn = xs
        .iter()
        .map(|x| unit(x.as_ref()))
        .collect::<Result<Vec<_>, _>>()?;
    let yn = ys
        .iter()
        .map(|y| unit(y.as_ref()))
        .collect::<Result<Vec<_>, _>>()?;
    let mut s = Mat64::zeros(xn.len(), yn.len());
    for (i, x) in xn.iter().enumerate() {
        for (j, y) in yn.iter().enumerate() {
            s[(i, j)] = dot(x, y).clamp(-1.0, 1.0);
        }
    }
    Ok(s)
}

/// Temperature-scaled log-sum-exp `τ·log Σ exp(v_i/τ)`, shifted by the max.
pub fn logsumexp(values: &[f64], temperature: f64) -> Result<f64, NumericError> {
    if values.is_empty() {
        return Err(NumericError::EmptyInput);
    }
    if !(temperature > 0.0) {
        return Err(NumericError::NonPositiveTemperature(temperature));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.iter().map(|v| ((v - max) / temperature).exp()).sum();
    Ok(max + temperature * sum.ln())
}

/// Softmax weights `exp(v_i/τ) / Σ exp(v_j/τ)`; these are the partial
/// derivatives of [`logsumexp`].
pub fn softmax(values: &[f64], temperature: f64) -> Result<Vec<f64>, NumericError> {
    if values.is_empty() {
        return Err(NumericError::EmptyInput);
    }
    if !(temperature > 0.0) {
        return Err(NumericError::NonPositiveTemperature(temperature));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = values
        .iter()
        .map(|v| ((v - max) / temperature).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= sum);
    Ok(w)
}

/// Indices of the `k` largest values, in descending value order. Equal values
/// are ordered by ascending index.
pub fn top_k_indices(values: &[f64], k: usize) -> Result<Vec<usize>, NumericError> {
    if k == 0 || k > values.len() {
        return Err(NumericError::KOutOfRange {
            k,
            len: values.len(),
        });
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let by_value_desc = |a: &usize, b: &usize| {
        values[*b]
            .total_cmp(&values[*a])
            .then_with(|| a.cmp(b))
    };
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, by_value_desc);
        idx.truncate(k);
    }
    idx.sort_unstable_by(by_value_desc);
    Ok(idx)
}

/// Compares an analytic gradient against central finite differences.
///
/// Returns `max_ij |fd_ij - g_ij| / max(1e-8, |g_ij|)` where
/// `fd_ij = (f(x + h E_ij) - f(x - h E_ij)) / 2h`.
pub fn check_gradient<F>(f: F, x: &Mat64, analytic: &Mat64, step: f64) -> Result<f64, NumericError>
where
    F: Fn(&Mat64) -> f64,
{
    if !(step > 0.0) {
        return Err(NumericError::NonPositiveStep(step));
    }
    if x.shape() != analytic.shape() {
        return Err(NumericError::DimensionMismatch {
            expected: x.rows() * x.cols(),
            got: analytic.rows() * analytic.cols(),
        });
    }
    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let orig = x[(i, j)];
            probe[(i, j)] = orig + step;
            let plus = f(&probe);
            probe[(i, j)] = orig - step;
            let minus = f(&probe);
            probe[(i, j)] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(NumericError::NonFiniteFunction { row: i, col: j });
            }
            let fd = (plus - minus) / (2.0 * step);
            let g = analytic[(i, j)];
            worst = worst.max((fd - g).abs() / g.abs().max(1e-8));
        }
    }
    Ok(worst)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Seeded ChaCha stream. [`Rng::split`] derives child streams from the seed
/// and a label only, so the order in which streams are consumed never
/// changes what any of them produce.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream keyed by `label`.
    pub fn split(&self, label: &str) -> Rng {
        Rng::new(splitmix64(self.seed ^ splitmix64(fnv1a(label))))
    }

    /// Independent stream keyed by `label` and an index (epoch, cell, ...).
    pub fn split_indexed(&self, label: &str, index: u64) -> Rng {
        let child = self.split(label);
        Rng::new(splitmix64(child.seed ^ splitmix64(index.wrapping_add(1))))
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Lemire's multiply-shift with rejection; unbiased.
        let n64 = n as u64;
        loop {
            let x = self.inner.next_u64();
            let m = (x as u128) * (n64 as u128);
            let low = m as u64;
            if low >= n64.wrapping_neg() % n64 {
                return (m >> 64) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, uniformly, in selection order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
