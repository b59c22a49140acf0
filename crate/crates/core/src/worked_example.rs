//! A hand-written digit distribution (N = 5, K = 10) whose MAP transcription
//! is "175", along with the reference length table for it.
//!
//! Used by golden tests, the `appendix-demo` CLI command and benches.

use crate::sequence::SequenceDistribution;

pub const LENGTH_PROBS: [f64; 7] = [0.002, 0.002, 0.002, 0.9, 0.09, 0.002, 0.002];

pub const CHAR_PROBS: [[f64; 10]; 5] = [
    [0.00125, 0.9, 0.00125, 0.00125, 0.00125, 0.00125, 0.00125, 0.1, 0.00125, 0.00125],
    [0.00125, 0.00125, 0.00125, 0.00125, 0.00125, 0.00125, 0.00125, 0.9, 0.00125, 0.1],
    [0.00125, 0.00125, 0.00125, 0.00125, 0.00125, 0.9, 0.1, 0.00125, 0.00125, 0.00125],
    [0.08889, 0.2, 0.08889, 0.08889, 0.08889, 0.08889, 0.08889, 0.08889, 0.08889, 0.08889],
    [0.1; 10],
];

/// Published five-figure values of `log P(L)`.
pub const REFERENCE_LENGTH_LOGP: [f64; 7] = [-6.2146, -6.2146, -6.2146, -0.10536, -2.4079, -6.2146, -6.2146];

/// Published cumulative per-position maxima, for lengths 0..=5 and overflow.
pub const REFERENCE_PREFIX: [f64; 7] = [0.0, -0.1054, -0.2107, -0.3161, -1.9255, -4.2281, -4.2281];

/// Published per-length totals `log P(S)`, lengths 0..=5 and overflow.
///
/// The entries for lengths 1 and 2 are not the sum of the corresponding
/// `REFERENCE_LENGTH_LOGP` and `REFERENCE_PREFIX` entries (that sum gives
/// -6.3200 and -6.4253); they are reproduced here as published.
pub const REFERENCE_TOTALS: [f64; 7] = [-6.2146, -7.2686, -8.3226, -0.42144, -4.3334, -10.443, -10.443];

pub const EXPECTED_TRANSCRIPTION: [usize; 3] = [1, 7, 5];
pub const EXPECTED_LOG_PROB: f64 = -0.42144;

/// Published values carry five significant figures.
pub const TOLERANCE: f64 = 1e-3;

/// The example distribution, built from the logs of the printed
/// probabilities. The printed character rows sum to 1.01 (and `S_4` to
/// 1.00001); the published log values are the logs of the printed entries,
/// so no renormalisation is applied.
pub fn distribution() -> SequenceDistribution {
    let ln = |r: &[f64]| r.iter().map(|p| p.ln()).collect::<Vec<_>>();
    SequenceDistribution::from_log_probs_unnormalized(ln(&LENGTH_PROBS), CHAR_PROBS.iter().map(|r| ln(r)).collect())
        .expect("worked example tables are finite and <= 0")
}
