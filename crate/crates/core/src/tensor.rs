//! Dense row-major `f64` tensors.

use crate::floatsim::floor_log2;
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("{op}: expected a rank-{rank} tensor, got shape {shape:?}")]
    BadRank { op: &'static str, rank: usize, shape: Vec<usize> },
    #[error("{0}: empty tensor")]
    Empty(&'static str),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<_> = self.data.iter().take(6).collect();
        write!(f, "Tensor{:?} {:?}", self.shape, head)?;
        if self.data.len() > 6 {
            write!(f, "…")?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::BadLength { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn scalar(x: f64) -> Self {
        Self { shape: vec![], data: vec![x] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// I.i.d. `N(0, sigma^2)` entries.
    pub fn randn(shape: &[usize], sigma: f64, seed: u64) -> Self {
        Self::randn_with(shape, sigma, &mut Rng::new(seed))
    }

    pub fn randn_with(shape: &[usize], sigma: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: rng.normal_vec(n, sigma) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::BadRank { op, rank: 2, shape: self.shape.clone() }),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::BadLength { shape: shape.to_vec(), len: self.data.len() });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch { op, left: self.shape.clone(), right: other.shape.clone() });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.same_shape(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip(other, "add", |a, b| a + b)
    }
    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip(other, "sub", |a, b| a - b)
    }
    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip(other, "mul", |a, b| a * b)
    }
    pub fn scale(&self, c: f64) -> Self {
        self.map(|x| c * x)
    }

    /// `self += c * other`
    pub fn axpy(&mut self, c: f64, other: &Tensor) -> Result<()> {
        self.same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn relu(&self) -> Self {
        self.map(|x| x.max(0.0))
    }
    pub fn gelu(&self) -> Self {
        self.map(gelu)
    }
    pub fn tanh(&self) -> Self {
        self.map(f64::tanh)
    }
    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Self> {
        let s = *self.shape.last().ok_or(TensorError::Empty("softmax"))?;
        if s == 0 {
            return Err(TensorError::Empty("softmax"));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(s) {
            softmax_in_place(row);
        }
        Ok(out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `a[b×m] · w[m×n]`.
    pub fn matmul(&self, w: &Tensor) -> Result<Self> {
        let (b, m) = self.dims2("matmul")?;
        let (m2, n) = w.dims2("matmul")?;
        if m != m2 {
            return Err(self.mismatch(w, "matmul"));
        }
        Ok(Self { shape: vec![b, n], data: gemm(b, m, n, self, (m, 1), w, (n, 1)) })
    }

    /// `a[k×m]ᵀ · g[k×n]`, giving `[m×n]`.
    pub fn matmul_tn(&self, g: &Tensor) -> Result<Self> {
        let (k, m) = self.dims2("matmul_tn")?;
        let (k2, n) = g.dims2("matmul_tn")?;
        if k != k2 {
            return Err(self.mismatch(g, "matmul_tn"));
        }
        Ok(Self { shape: vec![m, n], data: gemm(m, k, n, self, (1, m), g, (n, 1)) })
    }

    /// `g[b×n] · w[m×n]ᵀ`, giving `[b×m]`.
    pub fn matmul_nt(&self, w: &Tensor) -> Result<Self> {
        let (b, n) = self.dims2("matmul_nt")?;
        let (m, n2) = w.dims2("matmul_nt")?;
        if n != n2 {
            return Err(self.mismatch(w, "matmul_nt"));
        }
        Ok(Self { shape: vec![b, m], data: gemm(b, n, m, self, (n, 1), w, (1, n)) })
    }

    fn mismatch(&self, other: &Tensor, op: &'static str) -> TensorError {
        TensorError::ShapeMismatch { op, left: self.shape.clone(), right: other.shape.clone() }
    }

    pub fn stats(&self) -> Result<ScaleStats> {
        ScaleStats::of(&self.data)
    }

    pub fn exponent_histogram(&self) -> ExponentHistogram {
        ExponentHistogram::of(&self.data)
    }

    /// Fraction of nonzero finite entries with `lo <= |x| <= hi`.
    pub fn nonzero_fraction_within(&self, lo: f64, hi: f64) -> f64 {
        let mut inside = 0usize;
        let mut nonzero = 0usize;
        for &x in &self.data {
            if x != 0.0 && x.is_finite() {
                nonzero += 1;
                if (lo..=hi).contains(&x.abs()) {
                    inside += 1;
                }
            }
        }
        if nonzero == 0 {
            1.0
        } else {
            inside as f64 / nonzero as f64
        }
    }
}

/// Row-major product of an `m×k` and a `k×n` operand given by strides.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &Tensor,
    (rsa, csa): (usize, usize),
    b: &Tensor,
    (rsb, csb): (usize, usize),
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: the caller derived `m, k, n` and the strides from the operand
    // shapes, so every index dgemm touches lies inside `a.data`, `b.data` and
    // `c`; `c` is freshly allocated and does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa as isize,
            csa as isize,
            b.data.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    std_normal_cdf(x) + x * std_normal_pdf(x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

impl ScaleStats {
    pub fn of(xs: &[f64]) -> Result<Self> {
        if xs.is_empty() {
            return Err(TensorError::Empty("stats"));
        }
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        Ok(Self { mean, std: var.sqrt(), n })
    }

    /// Statistics of the union of two samples.
    pub fn merge(&self, other: &ScaleStats) -> ScaleStats {
        let n = self.n + other.n;
        let (wa, wb) = (self.n as f64 / n as f64, other.n as f64 / n as f64);
        let mean = wa * self.mean + wb * other.mean;
        let second = wa * (self.std.powi(2) + self.mean.powi(2)) + wb * (other.std.powi(2) + other.mean.powi(2));
        ScaleStats { mean, std: (second - mean * mean).max(0.0).sqrt(), n }
    }
}

/// Lowest and highest octave exponents with their own bin.
pub const HIST_MIN_EXP: i32 = -14;
pub const HIST_MAX_EXP: i32 = 15;
/// FP16's smallest subnormal; the merged subnormal bin starts here.
pub const HIST_SUBNORMAL_EXP: i32 = -24;

/// Counts of `|x|` per power-of-two bin.
///
/// Layout: zeros; `(0, 2^-24)`; the merged subnormal bin `[2^-24, 2^-14)`;
/// one octave `[2^k, 2^(k+1))` per `k` in `-14..=15`; `[2^16, ∞)`; and
/// non-finite values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExponentHistogram {
    pub zero: u64,
    pub below: u64,
    pub subnormal: u64,
    pub octaves: Vec<u64>,
    pub above: u64,
    pub non_finite: u64,
}

impl Default for ExponentHistogram {
    fn default() -> Self {
        Self {
            zero: 0,
            below: 0,
            subnormal: 0,
            octaves: vec![0; (HIST_MAX_EXP - HIST_MIN_EXP + 1) as usize],
            above: 0,
            non_finite: 0,
        }
    }
}

impl ExponentHistogram {
    pub fn of(xs: &[f64]) -> Self {
        let mut h = Self::default();
        for &x in xs {
            h.push(x);
        }
        h
    }

    pub fn push(&mut self, x: f64) {
        let a = x.abs();
        if !a.is_finite() {
            self.non_finite += 1;
        } else if a == 0.0 {
            self.zero += 1;
        } else {
            let e = floor_log2(a);
            if e < HIST_SUBNORMAL_EXP {
                self.below += 1;
            } else if e < HIST_MIN_EXP {
                self.subnormal += 1;
            } else if e > HIST_MAX_EXP {
                self.above += 1;
            } else {
                self.octaves[(e - HIST_MIN_EXP) as usize] += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &ExponentHistogram) {
        self.zero += other.zero;
        self.below += other.below;
        self.subnormal += other.subnormal;
        for (a, b) in self.octaves.iter_mut().zip(&other.octaves) {
            *a += b;
        }
        self.above += other.above;
        self.non_finite += other.non_finite;
    }

    pub fn total(&self) -> u64 {
        self.zero + self.nonzero_finite() + self.non_finite
    }

    pub fn nonzero_finite(&self) -> u64 {
        self.below + self.subnormal + self.octaves.iter().sum::<u64>() + self.above
    }

    pub fn zero_fraction(&self) -> f64 {
        self.zero as f64 / self.total().max(1) as f64
    }

    /// Octave bin holding the most values, as `[lo, hi)`.
    pub fn mode_octave(&self) -> Option<(f64, f64)> {
        let (i, &c) = self.octaves.iter().enumerate().max_by_key(|(i, c)| (**c, usize::MAX - i))?;
        if c == 0 {
            return None;
        }
        let e = HIST_MIN_EXP + i as i32;
        Some((2f64.powi(e), 2f64.powi(e + 1)))
    }

    /// `(bin_lo, bin_hi, count)` rows, with sentinel rows for zero
    /// (`0,0`), values below the subnormal bin, the merged subnormal bin,
    /// overflow (`2^16,inf`) and non-finite values (`inf,inf`).
    pub fn rows(&self) -> Vec<(f64, f64, u64)> {
        let p = |e: i32| 2f64.powi(e);
        let mut rows = vec![
            (0.0, 0.0, self.zero),
            (0.0, p(HIST_SUBNORMAL_EXP), self.below),
            (p(HIST_SUBNORMAL_EXP), p(HIST_MIN_EXP), self.subnormal),
        ];
        for (i, &c) in self.octaves.iter().enumerate() {
            let e = HIST_MIN_EXP + i as i32;
            rows.push((p(e), p(e + 1), c));
        }
        rows.push((p(HIST_MAX_EXP + 1), f64::INFINITY, self.above));
        rows.push((f64::INFINITY, f64::INFINITY, self.non_finite));
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count\n");
        for (lo, hi, c) in self.rows() {
            s.push_str(&format!("{lo:e},{hi:e},{c}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::randn(&[5, 3], 1.0, 1);
        let w = Tensor::randn(&[3, 4], 1.0, 2);
        let z = a.matmul(&w).unwrap();
        // Naive triple loop as the oracle.
        for i in 0..5 {
            for k in 0..4 {
                let want: f64 = (0..3).map(|j| a.data[i * 3 + j] * w.data[j * 4 + k]).sum();
                assert!((z.data[i * 4 + k] - want).abs() < 1e-12);
            }
        }
        let g = Tensor::randn(&[5, 4], 1.0, 3);
        let gw = a.matmul_tn(&g).unwrap();
        let gx = g.matmul_nt(&w).unwrap();
        assert_eq!(gw.shape(), &[3, 4]);
        assert_eq!(gx.shape(), &[5, 3]);
        for j in 0..3 {
            for k in 0..4 {
                let want: f64 = (0..5).map(|i| a.data[i * 3 + j] * g.data[i * 4 + k]).sum();
                assert!((gw.data[j * 4 + k] - want).abs() < 1e-12);
            }
        }
        for i in 0..5 {
            for j in 0..3 {
                let want: f64 = (0..4).map(|k| g.data[i * 4 + k] * w.data[j * 4 + k]).sum();
                assert!((gx.data[i * 3 + j] - want).abs() < 1e-12);
            }
        }
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn identity_matmul() {
        let w = Tensor::randn(&[4, 6], 1.0, 9);
        assert_eq!(Tensor::eye(4).matmul(&w).unwrap(), w);
    }

    #[test]
    fn stats_basics() {
        let s = Tensor::zeros(&[10]).stats().unwrap();
        assert_eq!((s.mean, s.std, s.n), (0.0, 0.0, 10));
        assert!(Tensor::zeros(&[0]).stats().is_err());
        let s = Tensor::from_vec(vec![1.0, 3.0]).stats().unwrap();
        assert_eq!((s.mean, s.std), (2.0, 1.0));
    }

    #[test]
    fn histogram_bins() {
        let h = ExponentHistogram::of(&[1.5]);
        assert_eq!(h.octaves[(0 - HIST_MIN_EXP) as usize], 1);
        let h = ExponentHistogram::of(&[2f64.powi(-20), 0.0, f64::NAN, 1e9, 1e-30, 0.5]);
        assert_eq!((h.subnormal, h.zero, h.non_finite, h.above, h.below), (1, 1, 1, 1, 1));
        assert_eq!(h.octaves[(-1 - HIST_MIN_EXP) as usize], 1);
        assert_eq!(h.total(), 6);
        // Exact powers of two open their own octave.
        let h = ExponentHistogram::of(&[2f64.powi(-14), 2f64.powi(15), 2f64.powi(16)]);
        assert_eq!(h.octaves[0], 1);
        assert_eq!(*h.octaves.last().unwrap(), 1);
        assert_eq!(h.above, 1);
        let csv = h.to_csv();
        assert!(csv.starts_with("bin_lo,bin_hi,count\n0e0,0e0,0\n"));
        assert_eq!(csv.lines().count(), 1 + 3 + 30 + 2);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::randn(&[3, 7], 3.0, 4).softmax().unwrap();
        for row in t.data.chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-2.0, -0.3, 0.0, 0.7, 3.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
