//! Integer rounding operators and the scale / round / dequantize pipeline.
//!
//! `Int(t)` rounds `t` to `floor(t) + 1` with probability `t - floor(t)` and
//! to `floor(t)` otherwise, so `E[Int(t)] = t`. Workers scale their vectors by
//! a shared positive `alpha`, round, and ship the integers; the sum over `n`
//! workers decodes with a single division by `n * alpha`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RoundingError {
    #[error("non-finite value {value} at coordinate {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("scaling factor must be finite and positive, got {value} at coordinate {index}")]
    NonPositiveScale { index: usize, value: f64 },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("value {value} does not fit in a signed {width}-bit integer")]
    WidthOverflow { value: i64, width: u8 },
    #[error("worker count must be at least 1")]
    NoWorkers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoundingMode {
    Stochastic,
    Deterministic,
}

/// Wire width of the signed integers carried by an [`IntVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum IntWidth {
    W8,
    W32,
}

impl IntWidth {
    pub fn bits(self) -> u8 {
        match self {
            IntWidth::W8 => 8,
            IntWidth::W32 => 32,
        }
    }

    pub fn bytes(self) -> usize {
        self.bits() as usize / 8
    }

    pub fn max_value(self) -> i64 {
        match self {
            IntWidth::W8 => i8::MAX as i64,
            IntWidth::W32 => i32::MAX as i64,
        }
    }

    pub fn min_value(self) -> i64 {
        match self {
            IntWidth::W8 => i8::MIN as i64,
            IntWidth::W32 => i32::MIN as i64,
        }
    }

    pub fn fits(self, v: i64) -> bool {
        v >= self.min_value() && v <= self.max_value()
    }
}

impl TryFrom<u8> for IntWidth {
    type Error = String;

    fn try_from(bits: u8) -> Result<Self, Self::Error> {
        match bits {
            8 => Ok(IntWidth::W8),
            32 => Ok(IntWidth::W32),
            other => Err(format!("unsupported integer width {other} (expected 8 or 32)")),
        }
    }
}

impl From<IntWidth> for u8 {
    fn from(w: IntWidth) -> u8 {
        w.bits()
    }
}

/// Signed integer payload whose every value fits in `width` bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntVector {
    width: IntWidth,
    values: Vec<i32>,
}

impl IntVector {
    pub fn new(width: IntWidth, values: Vec<i64>) -> Result<Self, RoundingError> {
        let values = values
            .into_iter()
            .map(|v| {
                if width.fits(v) {
                    Ok(v as i32)
                } else {
                    Err(RoundingError::WidthOverflow { value: v, width: width.bits() })
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { width, values })
    }

    pub fn zeros(width: IntWidth, len: usize) -> Self {
        Self { width, values: vec![0; len] }
    }

    pub fn width(&self) -> IntWidth {
        self.width
    }

    pub fn values(&self) -> &[i32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max_abs(&self) -> u64 {
        self.values.iter().map(|v| v.unsigned_abs() as u64).max().unwrap_or(0)
    }
}

/// Role of a random stream; keeps rounding and sampling draws independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum StreamPurpose {
    Rounding = 1,
    Sampling = 2,
    AnchorRefresh = 3,
}

/// Deterministic stream keyed by `(global_seed, worker_id, iteration, purpose)`.
///
/// The key layout is fixed so runs reproduce regardless of thread scheduling
/// or transport.
pub fn worker_stream(seed: u64, worker_id: u32, iteration: u64, purpose: StreamPurpose) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..12].copy_from_slice(&worker_id.to_le_bytes());
    key[12..16].copy_from_slice(&(purpose as u32).to_le_bytes());
    key[16..24].copy_from_slice(&iteration.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

fn check_finite(index: usize, t: f64) -> Result<(), RoundingError> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(RoundingError::NonFinite { index, value: t })
    }
}

/// Randomized rounding `Int(t)` driven by one uniform draw from `rng`.
pub fn int_round_stochastic<R: Rng + ?Sized>(t: f64, rng: &mut R) -> Result<f64, RoundingError> {
    check_finite(0, t)?;
    Ok(stochastic_unchecked(t, rng))
}

#[inline]
fn stochastic_unchecked<R: Rng + ?Sized>(t: f64, rng: &mut R) -> f64 {
    let lower = t.floor();
    let p = t - lower;
    let u: f64 = rng.gen();
    if u < p {
        lower + 1.0
    } else {
        lower
    }
}

/// Nearest integer with ties to even.
pub fn int_round_deterministic(t: f64) -> Result<f64, RoundingError> {
    check_finite(0, t)?;
    Ok(t.round_ties_even())
}

/// Probability that `Int(t)` rounds up.
pub fn round_up_probability(t: f64) -> f64 {
    t - t.floor()
}

/// Elementwise `Int(alpha * x)`.
///
/// `alpha` is either one value per coordinate or a single broadcast scalar.
/// Results are wide integers; a value beyond `i64` saturates, and narrowing to
/// a wire width is the job of [`crate::aggregation::clip_for_width`].
pub fn quantize<R: Rng + ?Sized>(
    x: &[f64],
    alpha: &[f64],
    mode: RoundingMode,
    rng: &mut R,
) -> Result<Vec<i64>, RoundingError> {
    let broadcast = alpha.len() == 1;
    if !broadcast && alpha.len() != x.len() {
        return Err(RoundingError::DimensionMismatch { expected: x.len(), actual: alpha.len() });
    }
    check_scale(alpha)?;
    let mut out = Vec::with_capacity(x.len());
    for (j, &xj) in x.iter().enumerate() {
        check_finite(j, xj)?;
        let a = if broadcast { alpha[0] } else { alpha[j] };
        let t = a * xj;
        let r = match mode {
            RoundingMode::Stochastic => stochastic_unchecked(t, rng),
            RoundingMode::Deterministic => t.round_ties_even(),
        };
        // `as` saturates at the i64 range and never wraps.
        out.push(r as i64);
    }
    Ok(out)
}

/// Decodes an aggregated integer sum: `q / (n * alpha)` elementwise.
pub fn dequantize(q: &[i64], alpha: &[f64], n: usize) -> Result<Vec<f64>, RoundingError> {
    if n == 0 {
        return Err(RoundingError::NoWorkers);
    }
    let broadcast = alpha.len() == 1;
    if !broadcast && alpha.len() != q.len() {
        return Err(RoundingError::DimensionMismatch { expected: q.len(), actual: alpha.len() });
    }
    check_scale(alpha)?;
    let nf = n as f64;
    Ok(q.iter()
        .enumerate()
        .map(|(j, &v)| {
            let a = if broadcast { alpha[0] } else { alpha[j] };
            v as f64 / (nf * a)
        })
        .collect())
}

fn check_scale(alpha: &[f64]) -> Result<(), RoundingError> {
    for (index, &value) in alpha.iter().enumerate() {
        if !(value.is_finite() && value > 0.0) {
            return Err(RoundingError::NonPositiveScale { index, value });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        worker_stream(7, 0, 0, StreamPurpose::Rounding)
    }

    #[test]
    fn integral_input_is_exact() {
        let mut r = rng();
        for _ in 0..100 {
            assert_eq!(int_round_stochastic(2.0, &mut r).unwrap(), 2.0);
            assert_eq!(int_round_stochastic(-3.0, &mut r).unwrap(), -3.0);
        }
    }

    #[test]
    fn stochastic_outcomes_bracket_input() {
        let mut r = rng();
        let mut ups = 0usize;
        let n = 200_000;
        for _ in 0..n {
            let v = int_round_stochastic(1.25, &mut r).unwrap();
            assert!(v == 1.0 || v == 2.0);
            if v == 2.0 {
                ups += 1;
            }
        }
        let freq = ups as f64 / n as f64;
        // p = 0.25, 5 standard errors
        assert!((freq - 0.25).abs() < 5.0 * (0.25f64 * 0.75 / n as f64).sqrt());
    }

    #[test]
    fn negative_input_uses_floor() {
        assert!((round_up_probability(-0.3) - 0.7).abs() < 1e-15);
        let mut r = rng();
        let mut zeros = 0usize;
        let n = 100_000;
        for _ in 0..n {
            let v = int_round_stochastic(-0.3, &mut r).unwrap();
            assert!(v == 0.0 || v == -1.0);
            if v == 0.0 {
                zeros += 1;
            }
        }
        let freq = zeros as f64 / n as f64;
        assert!((freq - 0.7).abs() < 5.0 * (0.21f64 / n as f64).sqrt());
    }

    #[test]
    fn deterministic_ties_to_even() {
        assert_eq!(int_round_deterministic(1.4).unwrap(), 1.0);
        assert_eq!(int_round_deterministic(2.5).unwrap(), 2.0);
        assert_eq!(int_round_deterministic(-1.5).unwrap(), -2.0);
        assert_eq!(int_round_deterministic(3.5).unwrap(), 4.0);
    }

    #[test]
    fn non_finite_rejected() {
        let mut r = rng();
        assert!(int_round_stochastic(f64::NAN, &mut r).is_err());
        assert!(int_round_deterministic(f64::INFINITY).is_err());
        let err = quantize(&[1.0, f64::NAN], &[1.0], RoundingMode::Deterministic, &mut r).unwrap_err();
        assert!(matches!(err, RoundingError::NonFinite { index: 1, .. }));
    }

    #[test]
    fn quantize_examples() {
        let mut r = rng();
        for mode in [RoundingMode::Stochastic, RoundingMode::Deterministic] {
            assert_eq!(quantize(&[0.0, 0.0], &[5.0, 5.0], mode, &mut r).unwrap(), vec![0, 0]);
        }
        assert_eq!(quantize(&[0.5], &[2.0], RoundingMode::Deterministic, &mut r).unwrap(), vec![1]);
        for _ in 0..50 {
            let q = quantize(&[0.3, -0.3], &[10.0, 10.0], RoundingMode::Stochastic, &mut r).unwrap();
            assert_eq!(q, vec![3, -3]);
        }
    }

    #[test]
    fn quantize_rejects_bad_scale() {
        let mut r = rng();
        let err = quantize(&[1.0, 1.0], &[1.0, 0.0], RoundingMode::Deterministic, &mut r).unwrap_err();
        assert!(matches!(err, RoundingError::NonPositiveScale { index: 1, .. }));
        assert!(quantize(&[1.0], &[-2.0], RoundingMode::Deterministic, &mut r).is_err());
        assert!(matches!(
            quantize(&[1.0, 2.0, 3.0], &[1.0, 1.0], RoundingMode::Deterministic, &mut r),
            Err(RoundingError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn quantize_saturates_instead_of_wrapping() {
        let mut r = rng();
        let q = quantize(&[1e300, -1e300], &[1e10], RoundingMode::Deterministic, &mut r).unwrap();
        assert_eq!(q, vec![i64::MAX, i64::MIN]);
    }

    #[test]
    fn dequantize_examples() {
        assert_eq!(dequantize(&[0, 0, 0], &[3.0], 4).unwrap(), vec![0.0; 3]);
        assert_eq!(dequantize(&[6], &[2.0], 3).unwrap(), vec![1.0]);
        assert_eq!(dequantize(&[-4, 8], &[4.0, 4.0], 1).unwrap(), vec![-1.0, 2.0]);
        assert!(dequantize(&[1, 2], &[1.0, 1.0, 1.0], 1).is_err());
        assert!(dequantize(&[1], &[1.0], 0).is_err());
    }

    #[test]
    fn int_vector_enforces_width() {
        assert!(IntVector::new(IntWidth::W8, vec![127, -128]).is_ok());
        assert!(IntVector::new(IntWidth::W8, vec![128]).is_err());
        assert!(IntVector::new(IntWidth::W32, vec![i32::MAX as i64 + 1]).is_err());
        let v = IntVector::new(IntWidth::W32, vec![-7, 3]).unwrap();
        assert_eq!(v.max_abs(), 7);
    }

    #[test]
    fn streams_are_keyed() {
        let a: u64 = worker_stream(1, 2, 3, StreamPurpose::Rounding).gen();
        let b: u64 = worker_stream(1, 2, 3, StreamPurpose::Rounding).gen();
        let c: u64 = worker_stream(1, 2, 4, StreamPurpose::Rounding).gen();
        let d: u64 = worker_stream(1, 2, 3, StreamPurpose::Sampling).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
