//! Factorized distribution over bounded-length character sequences.
//!
//! The model scores a sequence `s` of length `n` as
//! `log P(L = n) + sum_i log P(S_i = s_i)`: one softmax over the length
//! (values `0..=N` plus an overflow bucket for "longer than N") and one
//! independent softmax over the alphabet for each of the `N` positions.
//! Because the positions are independent given the image, the most likely
//! sequence is found exactly in `O(N·K)` by taking per-position maxima and
//! prefix-summing them across candidate lengths.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::log_softmax;

const NORMALIZATION_TOL: f64 = 1e-6;

/// Log-probabilities of the length head and each character head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceDistribution {
    max_len: usize,
    alphabet_size: usize,
    /// `N + 2` entries: lengths `0..=N`, then the overflow bucket.
    length_logp: Vec<f64>,
    /// `N` rows of `K` entries.
    char_logp: Vec<Vec<f64>>,
}

impl SequenceDistribution {
    /// Builds from already-normalised log-probabilities, validating shape,
    /// finiteness and normalisation.
    pub fn from_log_probs(length_logp: Vec<f64>, char_logp: Vec<Vec<f64>>) -> Result<Self> {
        let dist = Self::from_log_probs_unnormalized(length_logp, char_logp)?;
        for row in std::iter::once(&dist.length_logp).chain(&dist.char_logp) {
            let total: f64 = row.iter().map(|v| v.exp()).sum();
            if (total - 1.0).abs() > NORMALIZATION_TOL {
                return Err(Error::InvalidArgument(format!("row sums to {total}, not 1")));
            }
        }
        Ok(dist)
    }

    /// Like [`Self::from_log_probs`] but without the sum-to-one check, for
    /// externally supplied tables that are only approximately normalised.
    pub fn from_log_probs_unnormalized(length_logp: Vec<f64>, char_logp: Vec<Vec<f64>>) -> Result<Self> {
        let max_len = char_logp.len();
        if max_len == 0 {
            return Err(Error::InvalidArgument("max_len must be >= 1".into()));
        }
        if length_logp.len() != max_len + 2 {
            return Err(Error::shape(
                "SequenceDistribution",
                format!("{} length classes", max_len + 2),
                length_logp.len(),
            ));
        }
        let alphabet_size = char_logp[0].len();
        if alphabet_size == 0 {
            return Err(Error::InvalidArgument("alphabet_size must be >= 1".into()));
        }
        if let Some(row) = char_logp.iter().find(|r| r.len() != alphabet_size) {
            return Err(Error::shape("SequenceDistribution", alphabet_size, row.len()));
        }
        for row in std::iter::once(&length_logp).chain(&char_logp) {
            if row.iter().any(|v| !v.is_finite() || *v > 0.0) {
                return Err(Error::InvalidArgument("log-probabilities must be finite and <= 0".into()));
            }
        }
        Ok(Self { max_len, alphabet_size, length_logp, char_logp })
    }

    /// Builds from probability tables (as they would be printed).
    pub fn from_probs(length_p: &[f64], char_p: &[Vec<f64>]) -> Result<Self> {
        let ln = |r: &[f64]| r.iter().map(|p| p.ln()).collect::<Vec<_>>();
        Self::from_log_probs(ln(length_p), char_p.iter().map(|r| ln(r)).collect())
    }

    /// Normalises raw head responses with a stable log-softmax.
    pub fn from_logits(logits: &HeadLogits) -> Result<Self> {
        let length_logp = log_softmax(&logits.length)?;
        let char_logp = logits.chars.iter().map(|z| log_softmax(z)).collect::<Result<Vec<_>>>()?;
        Self::from_log_probs(length_logp, char_logp)
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet_size
    }

    pub fn length_logp(&self) -> &[f64] {
        &self.length_logp
    }

    pub fn char_logp(&self) -> &[Vec<f64>] {
        &self.char_logp
    }

    /// Index of the overflow bucket in [`Self::length_logp`].
    pub fn overflow_index(&self) -> usize {
        self.max_len + 1
    }
}

/// Ground truth: up to `N` class indices, plus an overflow flag when the true
/// sequence is longer than `N` (then `chars` holds its first `N` characters).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SequenceLabel {
    pub chars: Vec<usize>,
    pub overflow: bool,
}

impl SequenceLabel {
    pub fn new(chars: Vec<usize>) -> Self {
        Self { chars, overflow: false }
    }

    /// Truncates a full-length sequence to `max_len`, flagging overflow.
    pub fn from_full(mut chars: Vec<usize>, max_len: usize) -> Self {
        let overflow = chars.len() > max_len;
        chars.truncate(max_len);
        Self { chars, overflow }
    }

    pub fn validate(&self, max_len: usize, alphabet_size: usize) -> Result<()> {
        if self.chars.len() > max_len {
            return Err(Error::InvalidArgument(format!(
                "label has {} characters but max_len is {max_len}",
                self.chars.len()
            )));
        }
        if self.overflow && self.chars.len() != max_len {
            return Err(Error::InvalidArgument("overflow label must carry exactly max_len characters".into()));
        }
        if let Some(&index) = self.chars.iter().find(|&&c| c >= alphabet_size) {
            return Err(Error::LabelIndex { index, alphabet_size });
        }
        Ok(())
    }

    /// Index into the length head's classes.
    pub fn length_class(&self, max_len: usize) -> usize {
        if self.overflow {
            max_len + 1
        } else {
            self.chars.len()
        }
    }
}

/// A decoded sequence and its joint log-probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcription {
    pub chars: Vec<usize>,
    pub log_prob: f64,
    /// The overflow length bucket won; such results are never reported.
    pub overflow: bool,
}

impl Transcription {
    /// Whole-sequence match against ground truth; overflow never matches.
    pub fn matches(&self, truth: &SequenceLabel) -> bool {
        !self.overflow && !truth.overflow && self.chars == truth.chars
    }
}

/// `log P(S = s | X)` under the factorized model.
///
/// For overflow labels the length term is the overflow bucket and all `N`
/// supervised positions contribute.
pub fn sequence_log_prob(dist: &SequenceDistribution, label: &SequenceLabel) -> Result<f64> {
    label.validate(dist.max_len, dist.alphabet_size)?;
    let mut lp = dist.length_logp[label.length_class(dist.max_len)];
    for (row, &c) in dist.char_logp.iter().zip(&label.chars) {
        lp += row[c];
    }
    Ok(lp)
}

/// Raw (pre-softmax) head responses: `N + 2` length logits and `N` rows of
/// `K` character logits. Also used for gradients w.r.t. those logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadLogits {
    pub length: Vec<f64>,
    pub chars: Vec<Vec<f64>>,
}

impl HeadLogits {
    pub fn zeros(max_len: usize, alphabet_size: usize) -> Self {
        Self {
            length: vec![0.0; max_len + 2],
            chars: vec![vec![0.0; alphabet_size]; max_len],
        }
    }

    /// Concatenation in head order: length head, then character heads 1..=N.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.length.clone();
        for row in &self.chars {
            v.extend_from_slice(row);
        }
        v
    }

    pub fn from_flat(flat: &[f64], max_len: usize, alphabet_size: usize) -> Result<Self> {
        let want = max_len + 2 + max_len * alphabet_size;
        if flat.len() != want {
            return Err(Error::shape("HeadLogits::from_flat", want, flat.len()));
        }
        let (length, rest) = flat.split_at(max_len + 2);
        Ok(Self {
            length: length.to_vec(),
            chars: rest.chunks_exact(alphabet_size).map(<[f64]>::to_vec).collect(),
        })
    }

    pub fn scale(&mut self, alpha: f64) {
        self.length.iter_mut().for_each(|v| *v *= alpha);
        self.chars.iter_mut().flatten().for_each(|v| *v *= alpha);
    }
}

/// Negative log-likelihood of `label` and its gradient w.r.t. every logit.
///
/// Each supervised head contributes `softmax(z) - onehot(target)`. Character
/// heads beyond the label's length receive an all-zero gradient: they are
/// not part of the likelihood.
pub fn nll_loss_and_grad(logits: &HeadLogits, label: &SequenceLabel) -> Result<(f64, HeadLogits)> {
    let max_len = logits.chars.len();
    let alphabet_size = logits.chars.first().map_or(0, Vec::len);
    label.validate(max_len, alphabet_size)?;

    let mut grad = HeadLogits::zeros(max_len, alphabet_size);
    let mut loss = 0.0;

    let mut supervise = |z: &[f64], target: usize, g: &mut [f64]| -> Result<()> {
        let logp = log_softmax(z)?;
        loss -= logp[target];
        for (gi, lp) in g.iter_mut().zip(&logp) {
            *gi = lp.exp();
        }
        g[target] -= 1.0;
        Ok(())
    };

    supervise(&logits.length, label.length_class(max_len), &mut grad.length)?;
    for (i, &c) in label.chars.iter().enumerate() {
        supervise(&logits.chars[i], c, &mut grad.chars[i])?;
    }
    Ok((loss, grad))
}

/// One row of the length sweep performed by [`predict_max_sequence`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthCandidate {
    /// `0..=N`, or `N + 1` for the overflow bucket.
    pub length_class: usize,
    /// Sum of the first `min(length, N)` per-position maxima.
    pub prefix_log_prob: f64,
    /// `prefix_log_prob + log P(L = length_class)`.
    pub total_log_prob: f64,
}

/// Per-position argmax and max (ties to the lowest class index).
pub fn position_maxima(dist: &SequenceDistribution) -> Vec<(usize, f64)> {
    dist.char_logp
        .iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            (best, row[best])
        })
        .collect()
}

/// Scores every candidate length (`0..=N` and overflow) using the running
/// prefix sum of per-position maxima.
pub fn length_candidates(dist: &SequenceDistribution) -> Vec<LengthCandidate> {
    let maxima = position_maxima(dist);
    let mut out = Vec::with_capacity(dist.max_len + 2);
    let mut prefix = 0.0;
    for l in 0..=dist.max_len + 1 {
        if (1..=dist.max_len).contains(&l) {
            prefix += maxima[l - 1].1;
        }
        out.push(LengthCandidate {
            length_class: l,
            prefix_log_prob: prefix,
            total_log_prob: prefix + dist.length_logp[l],
        });
    }
    out
}

/// Exact MAP sequence in `O(N·K)`.
///
/// Ties across lengths go to the shorter length (overflow ranks after `N`).
pub fn predict_max_sequence(dist: &SequenceDistribution) -> Transcription {
    predict_max_sequence_counted(dist).0
}

/// [`predict_max_sequence`] plus the number of scalar comparisons and
/// additions it performed.
pub fn predict_max_sequence_counted(dist: &SequenceDistribution) -> (Transcription, usize) {
    let mut ops = 0usize;
    let mut argmax = Vec::with_capacity(dist.max_len);
    let mut best_len = 0;
    let mut best = dist.length_logp[0];
    let mut prefix = 0.0;
    for (i, row) in dist.char_logp.iter().enumerate() {
        let mut j_best = 0;
        for (j, &v) in row.iter().enumerate().skip(1) {
            ops += 1;
            if v > row[j_best] {
                j_best = j;
            }
        }
        argmax.push(j_best);
        prefix += row[j_best];
        let total = prefix + dist.length_logp[i + 1];
        ops += 3;
        if total > best {
            best = total;
            best_len = i + 1;
        }
    }
    let overflow_total = prefix + dist.length_logp[dist.max_len + 1];
    ops += 2;
    let overflow = overflow_total > best;
    if overflow {
        best = overflow_total;
        best_len = dist.max_len;
    }
    argmax.truncate(best_len);
    (Transcription { chars: argmax, log_prob: best, overflow }, ops)
}

/// Largest number of sequences [`brute_force_max_sequence`] will score.
pub const BRUTE_FORCE_LIMIT: u128 = 5_000_000;

/// Exhaustive MAP by scoring every sequence of every length plus every
/// overflow completion. Exponential; only for cross-checking on small `N, K`.
pub fn brute_force_max_sequence(dist: &SequenceDistribution) -> Result<Transcription> {
    let (n, k) = (dist.max_len, dist.alphabet_size);
    let mut count: u128 = 0;
    let mut pow: u128 = 1;
    for _ in 0..=n {
        count = count.saturating_add(pow);
        pow = pow.saturating_mul(k as u128);
    }
    count = count.saturating_add(pow / k as u128);
    if count > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge(count));
    }

    let mut best: Option<Transcription> = None;
    let mut consider = |label: SequenceLabel| -> Result<()> {
        let lp = sequence_log_prob(dist, &label)?;
        if best.as_ref().is_none_or(|b| lp > b.log_prob) {
            best = Some(Transcription { chars: label.chars, log_prob: lp, overflow: label.overflow });
        }
        Ok(())
    };
    for len in 0..=n {
        for_each_sequence(len, k, |seq| consider(SequenceLabel::new(seq.to_vec())))?;
    }
    for_each_sequence(n, k, |seq| consider(SequenceLabel { chars: seq.to_vec(), overflow: true }))?;
    Ok(best.expect("at least the empty sequence is scored"))
}

/// Visits all `k^len` sequences in lexicographic order.
fn for_each_sequence(len: usize, k: usize, mut f: impl FnMut(&[usize]) -> Result<()>) -> Result<()> {
    let mut seq = vec![0usize; len];
    loop {
        f(&seq)?;
        let mut i = len;
        loop {
            if i == 0 {
                return Ok(());
            }
            i -= 1;
            seq[i] += 1;
            if seq[i] < k {
                break;
            }
            seq[i] = 0;
        }
    }
}

/// Probability that the transcription is correct; 0 for overflow results so
/// that any positive threshold rejects them.
pub fn confidence(t: &Transcription) -> f64 {
    if t.overflow {
        0.0
    } else {
        t.log_prob.exp().clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn peaked(max_len: usize, k: usize, len: usize, chars: &[usize]) -> SequenceDistribution {
        let tiny = -1e3;
        let row = |hot: usize, m: usize| -> Vec<f64> {
            let mut z = vec![tiny; m];
            z[hot] = 0.0;
            log_softmax(&z).unwrap()
        };
        let length = row(len, max_len + 2);
        let chars = (0..max_len).map(|i| row(*chars.get(i).unwrap_or(&0), k)).collect();
        SequenceDistribution::from_log_probs(length, chars).unwrap()
    }

    #[test]
    fn certain_event_has_zero_log_prob() {
        let d = peaked(5, 10, 2, &[3, 7]);
        let lp = sequence_log_prob(&d, &SequenceLabel::new(vec![3, 7])).unwrap();
        assert!(lp.abs() < 1e-12);
        let t = predict_max_sequence(&d);
        assert_eq!(t.chars, vec![3, 7]);
        assert!(!t.overflow);
    }

    #[test]
    fn empty_sequence_when_length_mass_at_zero() {
        let d = peaked(4, 3, 0, &[1, 1, 1, 1]);
        let t = predict_max_sequence(&d);
        assert!(t.chars.is_empty());
        assert_eq!(t.log_prob, d.length_logp()[0]);
    }

    #[test]
    fn overflow_bucket_sets_flag_and_zero_confidence() {
        let d = peaked(3, 4, 4, &[1, 2, 3]);
        let t = predict_max_sequence(&d);
        assert!(t.overflow);
        assert_eq!(t.chars, vec![1, 2, 3]);
        assert_eq!(confidence(&t), 0.0);
        assert_eq!(brute_force_max_sequence(&d).unwrap(), t);
    }

    #[test]
    fn confidence_examples() {
        let t = Transcription { chars: vec![], log_prob: 0.0, overflow: false };
        assert_eq!(confidence(&t), 1.0);
        let t = Transcription { chars: vec![1, 7, 5], log_prob: -0.42144, overflow: false };
        assert!((confidence(&t) - 0.656).abs() < 1e-3);
    }

    #[test]
    fn label_validation() {
        let d = peaked(2, 3, 1, &[0, 0]);
        assert!(matches!(
            sequence_log_prob(&d, &SequenceLabel::new(vec![3])),
            Err(Error::LabelIndex { index: 3, alphabet_size: 3 })
        ));
        assert!(sequence_log_prob(&d, &SequenceLabel::new(vec![0, 1, 2])).is_err());
        let full = SequenceLabel::from_full(vec![1, 2, 0], 2);
        assert!(full.overflow);
        assert_eq!(full.chars, vec![1, 2]);
        assert!(sequence_log_prob(&d, &full).is_ok());
    }

    #[test]
    fn distribution_rejects_unnormalized_rows() {
        assert!(SequenceDistribution::from_log_probs(vec![-0.1; 3], vec![vec![-0.69, -0.69]]).is_err());
        assert!(SequenceDistribution::from_log_probs(vec![0.0], vec![vec![0.0]]).is_err());
    }

    #[test]
    fn masked_heads_get_zero_gradient() {
        let mut logits = HeadLogits::zeros(5, 10);
        for (i, row) in logits.chars.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = ((i * 7 + j * 3) % 5) as f64 * 0.3;
            }
        }
        let (_, g) = nll_loss_and_grad(&logits, &SequenceLabel::new(vec![4, 2])).unwrap();
        for row in &g.chars[2..] {
            assert!(row.iter().all(|&v| v == 0.0));
        }
        assert!(g.chars[0].iter().any(|&v| v != 0.0));
        assert!(g.length.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn confident_correct_logits_have_vanishing_loss() {
        let mut logits = HeadLogits::zeros(3, 4);
        logits.length[2] = 40.0;
        logits.chars[0][1] = 40.0;
        logits.chars[1][3] = 40.0;
        let (loss, g) = nll_loss_and_grad(&logits, &SequenceLabel::new(vec![1, 3])).unwrap();
        assert!(loss < 1e-6);
        assert!(g.flat().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn brute_force_refuses_huge_instances() {
        let d = peaked(8, 26, 1, &[0; 8]);
        assert!(matches!(brute_force_max_sequence(&d), Err(Error::TooLarge(_))));
    }

    #[test]
    fn op_count_grows_linearly_in_length() {
        let per_len: Vec<f64> = (1..=8)
            .map(|n| {
                let (_, ops) = predict_max_sequence_counted(&peaked(n, 10, 1, &[0; 8]));
                ops as f64 / n as f64
            })
            .collect();
        let (lo, hi) = per_len.iter().fold((f64::MAX, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(hi / lo < 1.25, "ops per position drifted: {per_len:?}");
    }
}
