use serde::{Deserialize, Serialize};

/// One row of per-iteration metrics. Row `k` describes the iterate `x^k`
/// and the communication round that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub seed: u64,
    pub iteration: u64,
    pub objective: f64,
    /// `f(x^k) - f*`, when a reference optimum is known.
    pub gap: Option<f64>,
    /// Cumulative component-gradient evaluations, summed over workers.
    pub oracle_calls: u64,
    /// Largest magnitude in the aggregated integer vector.
    pub max_int: u64,
    pub bits: u32,
    /// Largest magnitude any worker produced before clipping.
    pub max_sent: u64,
    /// Coordinates clipped in this round, summed over workers.
    pub clipped: u64,
    pub alpha: Option<f64>,
    /// The round that produced this iterate went uncompressed.
    pub exact_step: bool,
    /// `max_j |h_j - (1/n) sum_i h_ij|` when shift tracking is on.
    pub shift_residual: Option<f64>,
    /// Wall-clock microseconds since the run started. Kept out of the
    /// per-seed CSV so those files are reproducible byte for byte.
    #[serde(skip)]
    pub wall_us: u64,
}

/// Bits per coordinate needed to carry integers of magnitude up to
/// `max_int`: one sign bit plus `ceil(log2(max_int + 1))`.
pub fn bits_per_coordinate(max_int: u64) -> u32 {
    if max_int == 0 {
        return 1;
    }
    // ceil(log2(v + 1)) is the bit length of v.
    1 + (64 - max_int.leading_zeros())
}
