//! Scaling-factor policies producing the shared `alpha_k`.
//!
//! Every policy is a deterministic function of state that all workers hold
//! identically (iterates, stepsize, worker count), so each worker recomputes
//! `alpha_k` locally and nothing but integers crosses the wire.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScaleError {
    /// Zero displacement with no safeguard; the caller sends uncompressed.
    #[error("degenerate scale in block {block}: zero displacement with no safeguard")]
    Degenerate { block: usize },
    #[error("invalid scaling parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid block partition: {0}")]
    InvalidPartition(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
}

/// Constant `c` in the `sqrt(c)` denominator of the adaptive rules: `2n` by
/// default, `n` for the IntDIANA convergence-theorem variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    #[default]
    TwoN,
    N,
}

impl Denominator {
    pub fn factor(self, n: usize) -> f64 {
        match self {
            Denominator::TwoN => 2.0 * n as f64,
            Denominator::N => n as f64,
        }
    }
}

/// How the heuristic baseline turns `max|g|` into an exponent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExponentRule {
    #[default]
    Ceil,
    Floor,
    Round,
}

impl ExponentRule {
    pub fn apply(self, max_abs: f64) -> i32 {
        let e = max_abs.log2();
        match self {
            ExponentRule::Ceil => e.ceil() as i32,
            ExponentRule::Floor => e.floor() as i32,
            ExponentRule::Round => e.round() as i32,
        }
    }
}

/// Contiguous blocks of coordinates, covering `0..d` exactly once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPartition {
    sizes: Vec<usize>,
}

impl BlockPartition {
    pub fn new(sizes: Vec<usize>) -> Result<Self, ScaleError> {
        if sizes.is_empty() {
            return Err(ScaleError::InvalidPartition("no blocks".into()));
        }
        if let Some(pos) = sizes.iter().position(|&s| s == 0) {
            return Err(ScaleError::InvalidPartition(format!("block {pos} is empty")));
        }
        Ok(Self { sizes })
    }

    pub fn single(d: usize) -> Self {
        Self { sizes: vec![d] }
    }

    pub fn coordinates(d: usize) -> Self {
        Self { sizes: vec![1; d] }
    }

    /// `blocks` nearly equal contiguous blocks; the first `d % blocks` get one extra.
    pub fn uniform(d: usize, blocks: usize) -> Result<Self, ScaleError> {
        if blocks == 0 || blocks > d {
            return Err(ScaleError::InvalidPartition(format!("cannot split {d} coordinates into {blocks} blocks")));
        }
        let base = d / blocks;
        let extra = d % blocks;
        Ok(Self { sizes: (0..blocks).map(|l| base + usize::from(l < extra)).collect() })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn ranges(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        self.sizes.iter().scan(0usize, |start, &s| {
            let r = *start..*start + s;
            *start += s;
            Some(r)
        })
    }

    pub fn validate_for(&self, d: usize) -> Result<(), ScaleError> {
        if self.dim() != d {
            return Err(ScaleError::InvalidPartition(format!(
                "blocks cover {} coordinates, model has {d}",
                self.dim()
            )));
        }
        Ok(())
    }

    /// Broadcasts one value per block to one value per coordinate.
    pub fn expand(&self, per_block: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for (&s, &v) in self.sizes.iter().zip(per_block) {
            out.extend(std::iter::repeat_n(v, s));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ScalingPolicy {
    /// Moving average of squared displacements with safeguard `eps`.
    MovingAverage { beta: f64, eps: f64 },
    /// `eta sqrt(d) / (sqrt(c) ||x^k - x^{k-1}||)`. A zero displacement falls
    /// back to an uncompressed step unless `fallback_eps` supplies a safeguard.
    Adaptive { fallback_eps: Option<f64> },
    /// Per-block moving average.
    BlockAdaptive { partition: BlockPartition, beta: f64, eps: f64 },
    /// `(2^nb - 1) / (n 2^max_exp)` from the largest gradient magnitude.
    Heuristic { nb: u32, rule: ExponentRule },
    /// Constant, user-supplied scale.
    Fixed { alpha: f64 },
    /// No compression: every step is an uncompressed average.
    Exact,
}

impl ScalingPolicy {
    pub const DEFAULT_BETA: f64 = 0.9;
    pub const DEFAULT_EPS: f64 = 1e-8;

    pub fn moving_average_default() -> Self {
        ScalingPolicy::MovingAverage { beta: Self::DEFAULT_BETA, eps: Self::DEFAULT_EPS }
    }

    pub fn validate(&self, d: usize) -> Result<(), ScaleError> {
        let check_beta = |beta: f64| {
            if (0.0..1.0).contains(&beta) {
                Ok(())
            } else {
                Err(ScaleError::InvalidParameter(format!("beta must lie in [0, 1), got {beta}")))
            }
        };
        let check_eps = |eps: f64| {
            if eps >= 0.0 && eps.is_finite() {
                Ok(())
            } else {
                Err(ScaleError::InvalidParameter(format!("eps must be finite and >= 0, got {eps}")))
            }
        };
        match self {
            ScalingPolicy::MovingAverage { beta, eps } => {
                check_beta(*beta)?;
                check_eps(*eps)
            }
            ScalingPolicy::Adaptive { fallback_eps } => match fallback_eps {
                Some(e) if !(*e > 0.0 && e.is_finite()) => {
                    Err(ScaleError::InvalidParameter(format!("fallback eps must be > 0, got {e}")))
                }
                _ => Ok(()),
            },
            ScalingPolicy::BlockAdaptive { partition, beta, eps } => {
                check_beta(*beta)?;
                check_eps(*eps)?;
                partition.validate_for(d)
            }
            ScalingPolicy::Heuristic { nb, .. } => {
                if (1..=62).contains(nb) {
                    Ok(())
                } else {
                    Err(ScaleError::InvalidParameter(format!("nb must be in 1..=62, got {nb}")))
                }
            }
            ScalingPolicy::Fixed { alpha } => {
                if *alpha > 0.0 && alpha.is_finite() {
                    Ok(())
                } else {
                    Err(ScaleError::InvalidParameter(format!("fixed alpha must be > 0, got {alpha}")))
                }
            }
            ScalingPolicy::Exact => Ok(()),
        }
    }

    /// Whether alpha depends only on the iterate history.
    pub fn is_history_based(&self) -> bool {
        matches!(
            self,
            ScalingPolicy::MovingAverage { .. } | ScalingPolicy::Adaptive { .. } | ScalingPolicy::BlockAdaptive { .. }
        )
    }
}

/// Shared formula behind every history-based rule:
/// `eta sqrt(d_l) / sqrt(c r_l + eta^2 (d_l / d) eps^2)`.
///
/// With a single block (`d_l = d`) this is the scalar moving-average rule, and
/// with `r = ||dx||^2, eps = 0` the plain adaptive rule, evaluated by the same
/// floating-point expression so the policies agree bit for bit.
fn history_alpha(eta: f64, block_dim: usize, d: usize, r: f64, eps: f64, c: f64, block: usize) -> Result<f64, ScaleError> {
    let dl = block_dim as f64;
    let denom = (c * r + eta * eta * (dl / d as f64) * eps * eps).sqrt();
    if denom.is_nan() || denom <= 0.0 {
        return Err(ScaleError::Degenerate { block });
    }
    let alpha = eta * dl.sqrt() / denom;
    if alpha.is_finite() && alpha > 0.0 {
        Ok(alpha)
    } else {
        Err(ScaleError::Degenerate { block })
    }
}

fn squared_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn check_eta(eta: f64) -> Result<(), ScaleError> {
    if eta > 0.0 && eta.is_finite() {
        Ok(())
    } else {
        Err(ScaleError::InvalidParameter(format!("stepsize must be > 0, got {eta}")))
    }
}

/// Replicated per-worker scaling state.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingState {
    /// Moving average of squared displacement, one entry per block.
    pub r: Vec<f64>,
    /// Iteration index of the last update.
    pub k: u64,
    /// Most recent per-coordinate scale (empty before the first compressed step).
    pub last_alpha: Vec<f64>,
}

impl ScalingState {
    pub fn new(blocks: usize) -> Self {
        Self { r: vec![0.0; blocks], k: 0, last_alpha: Vec::new() }
    }

    pub fn for_policy(policy: &ScalingPolicy) -> Self {
        match policy {
            ScalingPolicy::BlockAdaptive { partition, .. } => Self::new(partition.len()),
            _ => Self::new(1),
        }
    }

    /// Advances the state with `delta_x = x^k - x^{k-1}` and returns the
    /// per-coordinate scale for iteration `k`. Only history-based policies
    /// are handled here; heuristic, fixed and exact scales need no history.
    pub fn advance(
        &mut self,
        policy: &ScalingPolicy,
        delta_x: &[f64],
        eta: f64,
        n: usize,
        denominator: Denominator,
    ) -> Result<Vec<f64>, ScaleError> {
        let d = delta_x.len();
        self.k += 1;
        let alpha = match policy {
            ScalingPolicy::MovingAverage { beta, eps } => {
                let a = update_moving_average(self, delta_x, *beta, *eps, eta, n, denominator)?;
                vec![a; d]
            }
            ScalingPolicy::Adaptive { fallback_eps } => {
                let a = match adaptive_alpha(delta_x, eta, n, denominator) {
                    Err(ScaleError::Degenerate { .. }) if fallback_eps.is_some() => {
                        let eps = fallback_eps.unwrap_or_default();
                        history_alpha(eta, d, d, 0.0, eps, denominator.factor(n), 0)?
                    }
                    other => other?,
                };
                vec![a; d]
            }
            ScalingPolicy::BlockAdaptive { partition, beta, eps } => {
                let per_block = block_adaptive_alpha(self, delta_x, partition, *beta, *eps, eta, n, denominator)?;
                partition.expand(&per_block)
            }
            other => {
                return Err(ScaleError::InvalidParameter(format!("{other:?} does not use iterate history")));
            }
        };
        self.last_alpha.clone_from(&alpha);
        Ok(alpha)
    }
}

/// `r_k = beta r_{k-1} + (1 - beta) ||dx||^2`, then
/// `alpha_k = sqrt(d) / sqrt(c r_k / eta^2 + eps^2)`.
///
/// The recursion is applied even when the resulting scale is degenerate.
pub fn update_moving_average(
    state: &mut ScalingState,
    delta_x: &[f64],
    beta: f64,
    eps: f64,
    eta: f64,
    n: usize,
    denominator: Denominator,
) -> Result<f64, ScaleError> {
    check_eta(eta)?;
    if state.r.len() != 1 {
        return Err(ScaleError::DimensionMismatch { expected: 1, actual: state.r.len() });
    }
    let d = delta_x.len();
    state.r[0] = beta * state.r[0] + (1.0 - beta) * squared_norm(delta_x);
    history_alpha(eta, d, d, state.r[0], eps, denominator.factor(n), 0)
}

/// `alpha_k = eta sqrt(d) / (sqrt(c) ||dx||)`.
pub fn adaptive_alpha(delta_x: &[f64], eta: f64, n: usize, denominator: Denominator) -> Result<f64, ScaleError> {
    check_eta(eta)?;
    let d = delta_x.len();
    history_alpha(eta, d, d, squared_norm(delta_x), 0.0, denominator.factor(n), 0)
}

/// Per-block moving averages and scales:
/// `alpha_{k,l} = eta sqrt(d_l) / sqrt(c r_{k,l} + eta^2 (d_l/d) eps^2)`.
#[allow(clippy::too_many_arguments)]
pub fn block_adaptive_alpha(
    state: &mut ScalingState,
    delta_x: &[f64],
    partition: &BlockPartition,
    beta: f64,
    eps: f64,
    eta: f64,
    n: usize,
    denominator: Denominator,
) -> Result<Vec<f64>, ScaleError> {
    check_eta(eta)?;
    let d = delta_x.len();
    partition.validate_for(d)?;
    if state.r.len() != partition.len() {
        return Err(ScaleError::DimensionMismatch { expected: partition.len(), actual: state.r.len() });
    }
    let c = denominator.factor(n);
    for (r, range) in state.r.iter_mut().zip(partition.ranges()) {
        *r = beta * *r + (1.0 - beta) * squared_norm(&delta_x[range]);
    }
    partition
        .sizes()
        .iter()
        .zip(&state.r)
        .enumerate()
        .map(|(l, (&dl, &r))| history_alpha(eta, dl, d, r, eps, c, l))
        .collect()
}

/// Heuristic baseline `(2^nb - 1) / (n 2^max_exp)`.
///
/// `max_abs` is the largest gradient magnitude among all workers. An all-zero
/// gradient has no exponent; any scale is lossless there, so 1 is returned.
pub fn heuristic_alpha(max_abs: f64, nb: u32, n: usize, rule: ExponentRule) -> f64 {
    if !max_abs.is_finite() || max_abs <= 0.0 {
        log::warn!("heuristic scale undefined for max |g| = {max_abs}; using alpha = 1");
        return 1.0;
    }
    let max_exp = rule.apply(max_abs);
    let levels = ((1u64 << nb) - 1) as f64;
    levels / (n as f64 * 2f64.powi(max_exp))
}

/// Outcome of the runtime check of the rounding-variance budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assumption1Check {
    pub holds: bool,
    /// `sum_j eta^2 / alpha_j^2`.
    pub lhs: f64,
    /// `eta^2 eps^2 + 2n (1 - beta) sum_t beta^t ||x^{k-t} - x^{k-t-1}||^2`.
    pub bound: f64,
    /// `lhs - bound`; zero for the moving-average rule.
    pub residual: f64,
}

impl Assumption1Check {
    pub fn relative_residual(&self) -> f64 {
        self.residual.abs() / self.bound.abs().max(f64::MIN_POSITIVE)
    }
}

/// Moving average recomputed from scratch:
/// `(1 - beta) sum_{t=0}^{k-1} beta^t ||x^{k-t} - x^{k-t-1}||^2`,
/// where `history[t]` is `||x^{t+1} - x^t||^2`.
pub fn moving_average_from_history(history: &[f64], beta: f64) -> f64 {
    let mut weight = 1.0;
    let mut acc = 0.0;
    for &sq in history.iter().rev() {
        acc += weight * sq;
        weight *= beta;
    }
    (1.0 - beta) * acc
}

/// Checks `sum_j eta^2 / alpha_j^2 <= eta^2 eps^2 + 2n (1-beta) sum_t beta^t ||dx_t||^2`.
///
/// `alpha` holds one entry per coordinate.
pub fn check_assumption1(
    history: &[f64],
    alpha: &[f64],
    eta: f64,
    beta: f64,
    eps: f64,
    n: usize,
) -> Assumption1Check {
    let lhs: f64 = alpha.iter().map(|a| eta * eta / (a * a)).sum();
    let bound = eta * eta * eps * eps + 2.0 * n as f64 * moving_average_from_history(history, beta);
    let residual = lhs - bound;
    let slack = 1e-9 * bound.abs().max(f64::MIN_POSITIVE);
    Assumption1Check { holds: residual <= slack, lhs, bound, residual }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn moving_average_examples() {
        let mut s = ScalingState::new(1);
        let a = update_moving_average(&mut s, &[0.0; 4], 0.0, 2.0, 1.0, 7, Denominator::TwoN).unwrap();
        assert_eq!(s.r[0], 0.0);
        assert_eq!(a, 1.0);

        let mut s = ScalingState::new(1);
        s.r[0] = 123.0;
        let a = update_moving_average(&mut s, &[1.0], 0.0, 0.0, 1.0, 2, Denominator::TwoN).unwrap();
        assert_eq!(s.r[0], 1.0);
        assert_eq!(a, 0.5);
    }

    #[test]
    fn moving_average_degenerate() {
        let mut s = ScalingState::new(1);
        let err = update_moving_average(&mut s, &[0.0, 0.0], 0.9, 0.0, 0.1, 3, Denominator::TwoN).unwrap_err();
        assert_eq!(err, ScaleError::Degenerate { block: 0 });
    }

    #[test]
    fn adaptive_examples() {
        // d = 4, n = 2, eta = 0.1, ||dx|| = 1
        let a = adaptive_alpha(&[1.0, 0.0, 0.0, 0.0], 0.1, 2, Denominator::TwoN).unwrap();
        assert_relative_eq!(a, 0.1, max_relative = 1e-15);
        assert!(matches!(adaptive_alpha(&[0.0; 3], 0.1, 2, Denominator::TwoN), Err(ScaleError::Degenerate { .. })));
    }

    #[test]
    fn adaptive_is_moving_average_without_memory() {
        let dx = [0.3, -1.2, 0.07, 2.5, -0.01];
        let mut s = ScalingState::new(1);
        let ma = update_moving_average(&mut s, &dx, 0.0, 0.0, 0.37, 6, Denominator::TwoN).unwrap();
        let ad = adaptive_alpha(&dx, 0.37, 6, Denominator::TwoN).unwrap();
        assert_eq!(ma.to_bits(), ad.to_bits());
    }

    #[test]
    fn adaptive_homogeneity() {
        let dx = [0.5, -0.25, 1.5];
        let a = adaptive_alpha(&dx, 0.2, 3, Denominator::TwoN).unwrap();
        let scaled: Vec<f64> = dx.iter().map(|v| v * 8.0).collect();
        let b = adaptive_alpha(&scaled, 0.2, 3, Denominator::TwoN).unwrap();
        assert_relative_eq!(b, a / 8.0, max_relative = 1e-14);
    }

    #[test]
    fn denominator_variant() {
        let dx = [1.0, 1.0];
        let two_n = adaptive_alpha(&dx, 1.0, 4, Denominator::TwoN).unwrap();
        let n = adaptive_alpha(&dx, 1.0, 4, Denominator::N).unwrap();
        assert_relative_eq!(n, two_n * 2f64.sqrt(), max_relative = 1e-14);
    }

    #[test]
    fn single_block_matches_scalar_bitwise() {
        let dxs = [vec![0.1, -0.4, 2.0], vec![0.0, 0.5, 0.25], vec![1e-3, 3.0, -7.0]];
        let mut scalar = ScalingState::new(1);
        let mut block = ScalingState::new(1);
        let p = BlockPartition::single(3);
        for dx in &dxs {
            let a = update_moving_average(&mut scalar, dx, 0.9, 1e-8, 0.05, 5, Denominator::TwoN).unwrap();
            let b = block_adaptive_alpha(&mut block, dx, &p, 0.9, 1e-8, 0.05, 5, Denominator::TwoN).unwrap();
            assert_eq!(a.to_bits(), b[0].to_bits());
        }
    }

    #[test]
    fn coordinate_blocks() {
        // B = d, beta = 0, eps = 0: alpha_j = eta / (sqrt(2n) |dx_j|)
        let dx = [0.5, -2.0, 0.125];
        let (eta, n) = (0.3, 3usize);
        let mut s = ScalingState::new(3);
        let a = block_adaptive_alpha(&mut s, &dx, &BlockPartition::coordinates(3), 0.0, 0.0, eta, n, Denominator::TwoN)
            .unwrap();
        for (aj, dj) in a.iter().zip(dx) {
            assert_relative_eq!(*aj, eta / ((2.0 * n as f64).sqrt() * dj.abs()), max_relative = 1e-14);
        }
    }

    #[test]
    fn two_blocks_sum_identity() {
        let dx = [0.2, -0.7, 1.1, 0.05, -0.3];
        let p = BlockPartition::new(vec![2, 3]).unwrap();
        let (eta, n, eps) = (0.4, 4usize, 0.01);
        let mut s = ScalingState::new(2);
        let a = block_adaptive_alpha(&mut s, &dx, &p, 0.0, eps, eta, n, Denominator::TwoN).unwrap();
        let lhs: f64 = p.sizes().iter().zip(&a).map(|(&dl, al)| dl as f64 * eta * eta / (al * al)).sum();
        let rhs = 2.0 * n as f64 * squared_norm(&dx) + eta * eta * eps * eps;
        assert_relative_eq!(lhs, rhs, max_relative = 1e-13);
    }

    #[test]
    fn block_degenerate_names_block() {
        let mut s = ScalingState::new(2);
        let p = BlockPartition::new(vec![1, 1]).unwrap();
        let err = block_adaptive_alpha(&mut s, &[1.0, 0.0], &p, 0.0, 0.0, 1.0, 1, Denominator::TwoN).unwrap_err();
        assert_eq!(err, ScaleError::Degenerate { block: 1 });
    }

    #[test]
    fn heuristic_examples() {
        assert_eq!(heuristic_alpha(4.0, 8, 4, ExponentRule::Ceil), 15.9375);
        assert_eq!(heuristic_alpha(1.0, 8, 1, ExponentRule::Ceil), 255.0);
        assert_eq!(heuristic_alpha(0.0, 8, 4, ExponentRule::Ceil), 1.0);
        // ceil exponent keeps the scaled maximum within 2^nb - 1
        for &m in &[0.3, 1.7, 5.0, 1000.1] {
            let a = heuristic_alpha(m, 8, 1, ExponentRule::Ceil);
            assert!(a * m <= 255.0);
        }
    }

    #[test]
    fn partition_validation() {
        assert!(BlockPartition::new(vec![]).is_err());
        assert!(BlockPartition::new(vec![2, 0]).is_err());
        let u = BlockPartition::uniform(10, 3).unwrap();
        assert_eq!(u.sizes(), &[4, 3, 3]);
        assert_eq!(u.ranges().collect::<Vec<_>>(), vec![0..4, 4..7, 7..10]);
        assert!(u.validate_for(11).is_err());
        assert_eq!(u.expand(&[1.0, 2.0, 3.0]).len(), 10);
    }

    #[test]
    fn history_recomputation() {
        let hist = [1.0f64, 4.0, 0.25];
        let beta = 0.5;
        let mut s = ScalingState::new(1);
        for h in hist {
            // one-coordinate displacement with the given squared norm
            update_moving_average(&mut s, &[h.sqrt()], beta, 0.0, 1.0, 1, Denominator::TwoN).unwrap();
        }
        assert_relative_eq!(s.r[0], moving_average_from_history(&hist, beta), max_relative = 1e-15);
    }

    #[test]
    fn policy_validation() {
        assert!(ScalingPolicy::MovingAverage { beta: 1.0, eps: 0.0 }.validate(3).is_err());
        assert!(ScalingPolicy::MovingAverage { beta: 0.9, eps: -1.0 }.validate(3).is_err());
        let p = ScalingPolicy::BlockAdaptive { partition: BlockPartition::single(2), beta: 0.0, eps: 0.0 };
        assert!(p.validate(3).is_err());
        assert!(ScalingPolicy::Fixed { alpha: 0.0 }.validate(1).is_err());
        assert!(ScalingPolicy::moving_average_default().validate(5).is_ok());
    }
}
