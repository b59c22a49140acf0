//! Whole-sequence accuracy, positional character accuracy and the
//! coverage/accuracy tradeoff under confidence thresholding.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Alphabet, PreparedDataset};
use crate::error::{Error, Result};
use crate::network::Model;
use crate::sequence::{confidence, predict_max_sequence, SequenceLabel, Transcription};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub transcription: Transcription,
    pub truth: SequenceLabel,
}

impl EvalRecord {
    pub fn confidence(&self) -> f64 {
        confidence(&self.transcription)
    }

    pub fn correct(&self) -> bool {
        self.transcription.matches(&self.truth)
    }
}

/// Transcribes the samples at `indices` (centre crop, no augmentation).
pub fn evaluate(model: &Model, data: &PreparedDataset, indices: &[usize]) -> Result<Vec<EvalRecord>> {
    indices
        .par_iter()
        .map(|&i| {
            let x = data.eval_input(i)?;
            let dist = model.forward(&x)?;
            Ok(EvalRecord {
                id: data.ids[i].clone(),
                transcription: predict_max_sequence(&dist),
                truth: data.labels[i].clone(),
            })
        })
        .collect()
}

/// Fraction of records whose length and every character are right.
/// Overflow predictions never count as correct.
pub fn sequence_accuracy(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("sequence_accuracy: no records"));
    }
    Ok(records.iter().filter(|r| r.correct()).count() as f64 / records.len() as f64)
}

/// Positional character accuracy: position `i` is correct when both
/// sequences have a character there and they agree; every position of the
/// longer sequence counts. An overflow on either side makes all of that
/// record's positions (at least one) errors.
pub fn character_accuracy(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("character_accuracy: no records"));
    }
    let (mut correct, mut total) = (0usize, 0usize);
    for r in records {
        let (p, t) = (&r.transcription.chars, &r.truth.chars);
        let n = p.len().max(t.len());
        if r.transcription.overflow || r.truth.overflow {
            total += n.max(1);
            continue;
        }
        total += n;
        correct += p.iter().zip(t).filter(|(a, b)| a == b).count();
    }
    Ok(if total == 0 { 1.0 } else { correct as f64 / total as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoveragePoint {
    pub threshold: f64,
    pub coverage: f64,
    /// Accuracy on the kept records; `None` when nothing is kept.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageCurve {
    pub points: Vec<CoveragePoint>,
}

impl CoverageCurve {
    /// CSV with columns `threshold,coverage,accuracy`; an empty kept set
    /// writes `NA` in the accuracy column.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "threshold,coverage,accuracy")?;
        for p in &self.points {
            match p.accuracy {
                Some(a) => writeln!(w, "{},{},{}", p.threshold, p.coverage, a)?,
                None => writeln!(w, "{},{},NA", p.threshold, p.coverage)?,
            }
        }
        Ok(())
    }
}

fn kept_stats(records: &[EvalRecord], t: f64) -> (usize, usize) {
    records
        .iter()
        .filter(|r| r.confidence() >= t)
        .fold((0, 0), |(k, c), r| (k + 1, c + r.correct() as usize))
}

/// Coverage and kept-set accuracy at each threshold, keeping records whose
/// confidence is at least the threshold. Thresholds must be strictly
/// increasing.
pub fn coverage_curve(records: &[EvalRecord], thresholds: &[f64]) -> Result<CoverageCurve> {
    if thresholds.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidArgument("thresholds must be strictly increasing".into()));
    }
    let n = records.len();
    let points = thresholds
        .iter()
        .map(|&t| {
            let (kept, correct) = kept_stats(records, t);
            CoveragePoint {
                threshold: t,
                coverage: if n == 0 { 0.0 } else { kept as f64 / n as f64 },
                accuracy: (kept > 0).then(|| correct as f64 / kept as f64),
            }
        })
        .collect();
    Ok(CoverageCurve { points })
}

/// Evenly spaced thresholds `0, 1/steps, ..., 1`.
pub fn uniform_thresholds(steps: usize) -> Vec<f64> {
    (0..=steps.max(1)).map(|i| i as f64 / steps.max(1) as f64).collect()
}

/// The maximum-coverage operating point whose kept-set accuracy reaches
/// `target`, or `None` if no threshold does. Among equal coverages the
/// smallest threshold wins. The returned threshold is 0 when everything is
/// kept and otherwise the lowest kept confidence.
pub fn coverage_at_accuracy(records: &[EvalRecord], target: f64) -> Option<CoveragePoint> {
    if records.is_empty() {
        return None;
    }
    let mut scored: Vec<(f64, bool)> = records.iter().map(|r| (r.confidence(), r.correct())).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n = scored.len();
    let (mut kept, mut correct) = (0usize, 0usize);
    let mut best: Option<CoveragePoint> = None;
    let mut i = 0;
    while i < n {
        // all records sharing a confidence value enter together
        let t = scored[i].0;
        while i < n && scored[i].0 == t {
            kept += 1;
            correct += scored[i].1 as usize;
            i += 1;
        }
        let acc = correct as f64 / kept as f64;
        if acc >= target {
            let threshold = if kept == n { 0.0 } else { t };
            best = Some(CoveragePoint { threshold, coverage: kept as f64 / n as f64, accuracy: Some(acc) });
        }
    }
    best
}

/// One JSON-lines record as emitted by transcription and evaluation tools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptionLine {
    pub id: String,
    pub chars: String,
    pub log_prob: f64,
    pub confidence: f64,
    pub kept: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub overflow: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
}

impl TranscriptionLine {
    /// Overflow predictions are never kept.
    pub fn new(id: &str, t: &Transcription, alphabet: &Alphabet, min_confidence: f64) -> Result<Self> {
        let conf = confidence(t);
        Ok(Self {
            id: id.to_string(),
            chars: alphabet.decode(&t.chars)?,
            log_prob: t.log_prob,
            confidence: conf,
            kept: !t.overflow && conf >= min_confidence,
            overflow: t.overflow,
            truth: None,
            correct: None,
        })
    }

    pub fn from_record(r: &EvalRecord, alphabet: &Alphabet, min_confidence: f64) -> Result<Self> {
        let mut line = Self::new(&r.id, &r.transcription, alphabet, min_confidence)?;
        let mut truth = alphabet.decode(&r.truth.chars)?;
        if r.truth.overflow {
            truth.push('+');
        }
        line.truth = Some(truth);
        line.correct = Some(r.correct());
        Ok(line)
    }

    /// Rebuilds the evaluation record; needs the `truth` field. A trailing
    /// `+` on the truth marks an overflow label.
    pub fn to_record(&self, alphabet: &Alphabet) -> Result<EvalRecord> {
        let truth = self
            .truth
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument(format!("record {} has no truth field", self.id)))?;
        let (truth, overflow) = match truth.strip_suffix('+') {
            Some(t) => (t, true),
            None => (truth, false),
        };
        Ok(EvalRecord {
            id: self.id.clone(),
            transcription: Transcription {
                chars: alphabet.encode(&self.chars)?,
                log_prob: self.log_prob,
                overflow: self.overflow,
            },
            truth: SequenceLabel { chars: alphabet.encode(truth)?, overflow },
        })
    }
}
