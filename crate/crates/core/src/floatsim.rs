//! Low-precision floating-point emulation.
//!
//! Every format is simulated on top of `f64`: [`FloatFormat::quantize`] maps a
//! reference value to the nearest value the format can hold (ties to even),
//! and the analysis helpers measure the damage that rounding does to normally
//! distributed data.

use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FloatError {
    #[error("unknown format `{name}` (valid: {valid})")]
    UnknownFormat { name: String, valid: String },
    #[error("format `{0}` has no subnormals")]
    NoSubnormals(String),
    #[error("invalid format `{name}`: {reason}")]
    InvalidFormat { name: String, reason: String },
    #[error("need at least {min} samples, got {got}")]
    TooFewSamples { got: usize, min: usize },
    #[error("sigma must be positive and finite, got {0}")]
    BadSigma(f64),
    #[error("sigma grid must be non-empty and strictly ascending")]
    BadGrid,
    #[error("invalid interval [{lo}, {hi}]")]
    BadInterval { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverflowPolicy {
    SaturateToMax,
    ToInfinity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FloatFormat {
    pub name: String,
    pub exponent_bits: u32,
    pub mantissa_bits: u32,
    /// Added to the IEEE bias `2^(E-1) - 1`.
    pub bias_offset: i32,
    pub max_exponent: i32,
    pub min_exponent: i32,
    pub overflow_policy: OverflowPolicy,
    pub supports_subnormals: bool,
    /// Largest magnitudes withheld from use (special values), counted down
    /// from the top code of the `max_exponent` binade.
    #[serde(default)]
    pub reserved_top_codes: u32,
}

pub const MIN_SNR_SAMPLES: usize = 10_000;

fn ieee(name: &str, e: u32, m: u32, max: i32, min: i32) -> FloatFormat {
    FloatFormat {
        name: name.into(),
        exponent_bits: e,
        mantissa_bits: m,
        bias_offset: 0,
        max_exponent: max,
        min_exponent: min,
        overflow_policy: OverflowPolicy::SaturateToMax,
        supports_subnormals: true,
        reserved_top_codes: 0,
    }
}

/// The eight formats in common use for deep learning.
///
/// FP8 E4 (b) reserves its whole top binade so that its largest value is 240,
/// the E4 maximum used by the outlier analysis.
pub fn format_catalog() -> Vec<FloatFormat> {
    let plus_one = |mut f: FloatFormat| {
        f.bias_offset = 1;
        f
    };
    let mut e4b = ieee("fp8-e4b", 4, 3, 8, -6);
    e4b.reserved_top_codes = 8;
    vec![
        ieee("fp32", 8, 23, 127, -126),
        ieee("tf32", 8, 10, 127, -126),
        ieee("bf16", 8, 7, 127, -126),
        ieee("fp16", 5, 10, 15, -14),
        plus_one(ieee("fp8-e5a", 5, 2, 15, -15)),
        ieee("fp8-e5b", 5, 2, 15, -14),
        plus_one(ieee("fp8-e4a", 4, 3, 7, -7)),
        e4b,
    ]
}

pub fn format_names() -> Vec<String> {
    format_catalog().into_iter().map(|f| f.name).collect()
}

pub fn format_by_name(name: &str) -> Result<FloatFormat, FloatError> {
    let key = name.to_ascii_lowercase().replace('_', "-");
    format_catalog()
        .into_iter()
        .find(|f| f.name == key)
        .ok_or_else(|| FloatError::UnknownFormat { name: name.into(), valid: format_names().join(", ") })
}

impl FloatFormat {
    pub fn fp32() -> Self {
        format_by_name("fp32").unwrap()
    }
    pub fn fp16() -> Self {
        format_by_name("fp16").unwrap()
    }
    pub fn e4a() -> Self {
        format_by_name("fp8-e4a").unwrap()
    }
    pub fn e5a() -> Self {
        format_by_name("fp8-e5a").unwrap()
    }

    pub fn with_overflow(mut self, policy: OverflowPolicy) -> Self {
        self.overflow_policy = policy;
        self
    }

    pub fn bias(&self) -> i32 {
        (1 << (self.exponent_bits - 1)) - 1 + self.bias_offset
    }

    pub fn validate(&self) -> Result<(), FloatError> {
        let bad = |reason: &str| FloatError::InvalidFormat { name: self.name.clone(), reason: reason.into() };
        if self.exponent_bits < 2 || self.exponent_bits > 11 {
            return Err(bad("exponent_bits must be in 2..=11"));
        }
        if self.mantissa_bits > 52 {
            return Err(bad("mantissa_bits must be at most 52"));
        }
        if self.max_exponent < self.min_exponent {
            return Err(bad("max_exponent < min_exponent"));
        }
        let field_max = (1i32 << self.exponent_bits) - 1;
        if self.min_exponent < 1 - self.bias() || self.max_exponent > field_max - self.bias() {
            return Err(bad("exponent range does not fit the exponent field"));
        }
        let binade = 1u64 << self.mantissa_bits;
        let span = (self.max_exponent - self.min_exponent + 1) as u64;
        if self.reserved_top_codes as u64 >= span * binade {
            return Err(bad("every normal code is reserved"));
        }
        Ok(())
    }

    pub fn max_normal(&self) -> f64 {
        let binade = 1u32 << self.mantissa_bits;
        let drop = (self.reserved_top_codes / binade) as i32;
        let rem = (self.reserved_top_codes % binade) as f64;
        let m = self.mantissa_bits as i32;
        (2.0 - (rem + 1.0) * pow2(-m)) * pow2(self.max_exponent - drop)
    }

    pub fn min_normal(&self) -> f64 {
        pow2(self.min_exponent)
    }

    pub fn min_subnormal(&self) -> Result<f64, FloatError> {
        if !self.supports_subnormals {
            return Err(FloatError::NoSubnormals(self.name.clone()));
        }
        Ok(pow2(self.min_exponent - self.mantissa_bits as i32))
    }

    /// Smallest positive value the format can hold.
    pub fn min_positive(&self) -> f64 {
        self.min_subnormal().unwrap_or_else(|_| self.min_normal())
    }

    fn overflow(&self, sign: f64) -> f64 {
        match self.overflow_policy {
            OverflowPolicy::SaturateToMax => sign * self.max_normal(),
            OverflowPolicy::ToInfinity => sign * f64::INFINITY,
        }
    }

    /// Nearest representable value, ties to even.
    ///
    /// Zeros and NaN pass through unchanged; infinities follow the overflow
    /// policy, as do finite values that round above the largest magnitude.
    pub fn quantize(&self, x: f64) -> f64 {
        if x == 0.0 || x.is_nan() {
            return x;
        }
        let sign = x.signum();
        if x.is_infinite() {
            return self.overflow(sign);
        }
        let a = x.abs();
        let min_normal = self.min_normal();
        if !self.supports_subnormals && a < min_normal {
            // Only zero and min_normal are nearby; the midpoint goes to zero.
            return if a > 0.5 * min_normal { sign * min_normal } else { 0.0 * sign };
        }
        let e = floor_log2(a).max(self.min_exponent);
        let quantum = pow2(e - self.mantissa_bits as i32);
        let q = (a / quantum).round_ties_even() * quantum;
        if q > self.max_normal() {
            return self.overflow(sign);
        }
        sign * q
    }

    pub fn quantize_slice(&self, xs: &mut [f64]) {
        for x in xs {
            *x = self.quantize(*x);
        }
    }

    /// Decodes an `1 + E + M`-bit pattern. Returns `None` for codes the
    /// format does not use (reserved, or outside the exponent range).
    pub fn decode(&self, code: u32) -> Option<f64> {
        let (e_bits, m_bits) = (self.exponent_bits, self.mantissa_bits);
        assert!(1 + e_bits + m_bits <= 32, "decode supports at most 32-bit formats");
        let m_mask = (1u32 << m_bits) - 1;
        let e_mask = (1u32 << e_bits) - 1;
        let sign = if code >> (e_bits + m_bits) & 1 == 1 { -1.0 } else { 1.0 };
        let field = (code >> m_bits) & e_mask;
        let mant = (code & m_mask) as f64 * pow2(-(m_bits as i32));
        if field == 0 && mant == 0.0 {
            return Some(sign * 0.0);
        }
        let v = if field == 0 && self.min_exponent == 1 - self.bias() {
            if mant != 0.0 && !self.supports_subnormals {
                return None;
            }
            mant * pow2(self.min_exponent)
        } else {
            let e = field as i32 - self.bias();
            if e < self.min_exponent || e > self.max_exponent {
                return None;
            }
            (1.0 + mant) * pow2(e)
        };
        if v > self.max_normal() {
            return None;
        }
        Some(sign * v)
    }

    /// All non-negative representable values, ascending. Only for narrow
    /// formats (at most 16 bits of exponent and mantissa).
    pub fn nonnegative_values(&self) -> Vec<f64> {
        assert!(self.exponent_bits + self.mantissa_bits <= 16);
        let n = 1u32 << (self.exponent_bits + self.mantissa_bits);
        let mut vs: Vec<f64> = (0..n).filter_map(|c| self.decode(c)).collect();
        vs.sort_by(f64::total_cmp);
        vs.dedup();
        vs
    }
}

fn pow2(e: i32) -> f64 {
    // powi is exact for powers of two across the f64 normal range.
    2f64.powi(e)
}

/// floor(log2(a)) for finite a > 0, exact.
pub(crate) fn floor_log2(a: f64) -> i32 {
    let bits = a.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    if biased == 0 {
        // f64 subnormal: below every simulated format's range anyway.
        -1023 - (bits & ((1 << 52) - 1)).leading_zeros() as i32 + 12
    } else {
        biased - 1023
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrPoint {
    pub sigma: f64,
    pub snr: f64,
}

impl SnrPoint {
    pub fn db(&self) -> f64 {
        10.0 * self.snr.log10()
    }
}

fn snr_of(fmt: &FloatFormat, zs: &[f64], sigma: f64) -> f64 {
    let mut signal = 0.0;
    let mut noise = 0.0;
    for &z in zs {
        let x = sigma * z;
        let q = fmt.quantize(x);
        signal += x * x;
        noise += (q - x) * (q - x);
    }
    if noise == 0.0 {
        f64::INFINITY
    } else {
        signal / noise
    }
}

fn check_samples(samples: usize) -> Result<(), FloatError> {
    if samples < MIN_SNR_SAMPLES {
        return Err(FloatError::TooFewSamples { got: samples, min: MIN_SNR_SAMPLES });
    }
    Ok(())
}

/// Monte-Carlo SNR, `E[X^2] / E[(q(X) - X)^2]` for `X ~ N(0, sigma^2)`.
///
/// Returns `f64::INFINITY` when no sample is altered by quantisation.
pub fn snr(sigma: f64, fmt: &FloatFormat, samples: usize, seed: u64) -> Result<f64, FloatError> {
    check_samples(samples)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(FloatError::BadSigma(sigma));
    }
    let zs = Rng::new(seed).normal_vec(samples, 1.0);
    Ok(snr_of(fmt, &zs, sigma))
}

/// SNR over a grid of scales. The same standard-normal draws are reused at
/// every grid point, so the curve is smooth in sigma.
pub fn snr_curve(
    fmt: &FloatFormat,
    sigma_grid: &[f64],
    samples: usize,
    seed: u64,
) -> Result<Vec<SnrPoint>, FloatError> {
    check_samples(samples)?;
    if sigma_grid.is_empty() || sigma_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(FloatError::BadGrid);
    }
    if let Some(&bad) = sigma_grid.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(FloatError::BadSigma(bad));
    }
    let zs = Rng::new(seed).normal_vec(samples, 1.0);
    Ok(sigma_grid.iter().map(|&sigma| SnrPoint { sigma, snr: snr_of(fmt, &zs, sigma) }).collect())
}

/// `points` scales evenly spaced in log2 between `2^lo` and `2^hi`.
pub fn log2_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => vec![],
        1 => vec![lo.exp2()],
        _ => (0..points).map(|i| (lo + (hi - lo) * i as f64 / (points - 1) as f64).exp2()).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plateau {
    pub lo: f64,
    pub hi: f64,
    pub peak_snr: f64,
}

impl Plateau {
    pub fn log2_width(&self) -> f64 {
        (self.hi / self.lo).log2()
    }
}

/// The contiguous run of grid points within 3 dB of the curve's peak.
pub fn plateau(curve: &[SnrPoint]) -> Option<Plateau> {
    let (imax, peak) =
        curve.iter().enumerate().filter(|(_, p)| p.snr.is_finite()).max_by(|a, b| a.1.snr.total_cmp(&b.1.snr))?;
    let floor = peak.snr / 10f64.powf(0.3);
    let within = |p: &SnrPoint| p.snr >= floor;
    let mut lo = imax;
    while lo > 0 && within(&curve[lo - 1]) {
        lo -= 1;
    }
    let mut hi = imax;
    while hi + 1 < curve.len() && within(&curve[hi + 1]) {
        hi += 1;
    }
    Some(Plateau { lo: curve[lo].sigma, hi: curve[hi].sigma, peak_snr: peak.snr })
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

fn std_normal_pdf(x: f64) -> f64 {
    if x.is_infinite() {
        0.0
    } else {
        (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
    }
}

/// `P(lo <= |X| <= hi)` for a standard normal `X`.
pub fn folded_normal_mass(lo: f64, hi: f64) -> Result<f64, FloatError> {
    if !(lo >= 0.0 && lo < hi) || lo.is_infinite() || hi.is_nan() {
        return Err(FloatError::BadInterval { lo, hi });
    }
    let tail = |x: f64| if x.is_infinite() { 0.0 } else { erfc(x * FRAC_1_SQRT_2) };
    Ok(tail(lo) - tail(hi))
}

/// A quantiser cell: every x in `[lo, hi)` maps to `value`.
#[derive(Debug, Clone, Copy)]
struct Cell {
    lo: f64,
    hi: f64,
    value: f64,
}

impl Cell {
    fn mass(&self) -> f64 {
        std_normal_cdf(self.hi) - std_normal_cdf(self.lo)
    }

    /// `∫ (value - x)^2 φ(x) dx` over the cell.
    fn sq_error(&self) -> f64 {
        let (a, b, v) = (self.lo, self.hi, self.value);
        let dphi = self.mass();
        let (pa, pb) = (std_normal_pdf(a), std_normal_pdf(b));
        let xpa = if a.is_infinite() { 0.0 } else { a * pa };
        let xpb = if b.is_infinite() { 0.0 } else { b * pb };
        v * v * dphi - 2.0 * v * (pa - pb) + dphi + xpa - xpb
    }
}

fn snr_from_cells(cells: &[Cell]) -> f64 {
    1.0 / cells.iter().map(Cell::sq_error).sum::<f64>()
}

fn bins_for_mass(cells: &[Cell], fraction: f64) -> usize {
    let mut masses: Vec<f64> = cells.iter().map(Cell::mass).collect();
    masses.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    for (i, m) in masses.iter().enumerate() {
        acc += m;
        if acc >= fraction {
            return i + 1;
        }
    }
    masses.len()
}

/// Cells of symmetric INT8 quantisation with `q = trunc(x * scale) / scale`.
fn int8_cells(scale: f64) -> Vec<Cell> {
    let step = 1.0 / scale;
    let mut cells = vec![Cell { lo: -step, hi: step, value: 0.0 }];
    for k in 1..=127 {
        let lo = k as f64 * step;
        let hi = if k == 127 { f64::INFINITY } else { lo + step };
        cells.push(Cell { lo, hi, value: lo });
        cells.push(Cell { lo: -hi, hi: -lo, value: -lo });
    }
    cells
}

/// Cells of round-to-nearest quantisation into `fmt` (saturating).
fn float_cells(fmt: &FloatFormat) -> Vec<Cell> {
    let vs = fmt.nonnegative_values();
    let mut cells = Vec::with_capacity(2 * vs.len());
    for (i, &v) in vs.iter().enumerate() {
        let lo = if i == 0 { 0.0 } else { 0.5 * (vs[i - 1] + v) };
        let hi = vs.get(i + 1).map_or(f64::INFINITY, |&n| 0.5 * (v + n));
        if v == 0.0 {
            cells.push(Cell { lo: -hi, hi, value: 0.0 });
        } else {
            cells.push(Cell { lo, hi, value: v });
            cells.push(Cell { lo: -hi, hi: -lo, value: -v });
        }
    }
    cells
}

/// INT8 quantisation by truncation toward zero, as assumed by the outlier
/// model. Saturates at ±127 steps.
pub fn int8_quantize(x: f64, scale: f64) -> f64 {
    (x * scale).trunc().clamp(-127.0, 127.0) / scale
}

/// Non-outlier median scale the outlier model assumes for outliers; the
/// largest outlier is three times this.
pub const OUTLIER_MEDIAN: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OutlierAnalysis {
    /// INT8 scaled so the largest outlier (3 × median) just fits.
    pub snr_int8_nonoutlier: f64,
    /// INT8 scaled for the median outlier instead.
    pub snr_int8_median_scaled: f64,
    /// FP8 E4 without any rescaling.
    pub snr_fp8e4_nonoutlier: f64,
    /// Fewest INT8 bins holding 95% of the non-outlier mass.
    pub int8_bins_used: usize,
    /// Fewest FP8 E4 bins holding 95% of the non-outlier mass.
    pub fp8_bins_used: usize,
}

/// Compares INT8 and FP8 E4 on the non-outlier part of a tensor whose rare
/// outliers reach 3 × 60 while the bulk is standard normal.
///
/// Assumptions: non-outliers are exactly N(0, 1); INT8 is scaled by
/// `127 / (3 · 60)` and truncates toward zero; FP8 uses E4 (a) with
/// round-to-nearest and no scaling. The figures are exact integrals over
/// quantiser cells, not samples.
pub fn int8_outlier_analysis() -> OutlierAnalysis {
    let int8 = int8_cells(127.0 / (3.0 * OUTLIER_MEDIAN));
    let int8_median = int8_cells(127.0 / OUTLIER_MEDIAN);
    let fp8 = float_cells(&FloatFormat::e4a());
    OutlierAnalysis {
        snr_int8_nonoutlier: snr_from_cells(&int8),
        snr_int8_median_scaled: snr_from_cells(&int8_median),
        snr_fp8e4_nonoutlier: snr_from_cells(&fp8),
        int8_bins_used: bins_for_mass(&int8, 0.95),
        fp8_bins_used: bins_for_mass(&fp8, 0.95),
    }
}

/// Same cell analysis for an arbitrary narrow float format.
pub fn float_bins_used(fmt: &FloatFormat, fraction: f64) -> usize {
    bins_for_mass(&float_cells(fmt), fraction)
}
