use proptest::prelude::*;

use seqnet::eval::{
    character_accuracy, coverage_at_accuracy, coverage_curve, sequence_accuracy, uniform_thresholds, EvalRecord,
};
use seqnet::{SequenceLabel, Transcription};

fn record(pred: Vec<usize>, truth: Vec<usize>, conf: f64, overflow: bool) -> EvalRecord {
    EvalRecord {
        id: String::new(),
        transcription: Transcription { chars: pred, log_prob: conf.ln(), overflow },
        truth: SequenceLabel::new(truth),
    }
}

fn arb_records(max: usize) -> impl Strategy<Value = Vec<EvalRecord>> {
    prop::collection::vec(
        (
            prop::collection::vec(0usize..3, 0..3),
            prop::collection::vec(0usize..3, 0..3),
            // coarse confidences so ties are common
            (1u32..=10).prop_map(|c| c as f64 / 10.0),
            prop::bool::weighted(0.1),
        )
            .prop_map(|(p, t, c, o)| record(p, t, c, o)),
        1..=max,
    )
}

/// Kept-set accuracy at every candidate threshold (0 and each confidence),
/// picking the best coverage and then the smallest threshold.
fn exhaustive(records: &[EvalRecord], target: f64) -> Option<(f64, f64)> {
    let mut candidates: Vec<f64> = records.iter().map(|r| r.confidence()).collect();
    candidates.push(0.0);
    let mut best: Option<(f64, f64)> = None;
    for &t in &candidates {
        let kept: Vec<&EvalRecord> = records.iter().filter(|r| r.confidence() >= t).collect();
        if kept.is_empty() {
            continue;
        }
        let acc = kept.iter().filter(|r| r.correct()).count() as f64 / kept.len() as f64;
        if acc < target {
            continue;
        }
        let cov = kept.len() as f64 / records.len() as f64;
        best = match best {
            Some((bc, bt)) if bc > cov || (bc == cov && bt <= t) => Some((bc, bt)),
            _ => Some((cov, t)),
        };
    }
    best
}

proptest! {
    #[test]
    fn coverage_is_monotone(records in arb_records(40)) {
        let curve = coverage_curve(&records, &uniform_thresholds(50)).unwrap();
        for w in curve.points.windows(2) {
            prop_assert!(w[0].threshold < w[1].threshold);
            prop_assert!(w[1].coverage <= w[0].coverage);
        }
        let p0 = curve.points[0];
        prop_assert_eq!(p0.coverage, 1.0);
        prop_assert_eq!(p0.accuracy, Some(sequence_accuracy(&records).unwrap()));
    }

    #[test]
    fn operating_point_matches_exhaustive_search(records in arb_records(10), target in prop::sample::select(vec![0.5, 0.75, 0.98, 1.0])) {
        let fast = coverage_at_accuracy(&records, target);
        let slow = exhaustive(&records, target);
        match (fast, slow) {
            (None, None) => {}
            (Some(p), Some((cov, _))) => {
                prop_assert_eq!(p.coverage, cov);
                // any threshold in (next lower confidence, lowest kept confidence] keeps the same set
                let kept = records.iter().filter(|r| r.confidence() >= p.threshold).count();
                prop_assert_eq!(kept as f64 / records.len() as f64, cov);
                prop_assert!(p.accuracy.unwrap() >= target);
            }
            (f, s) => prop_assert!(false, "fast {:?} vs exhaustive {:?}", f, s),
        }
    }

    #[test]
    fn perfect_characters_iff_perfect_sequences(records in arb_records(20)) {
        let seq = sequence_accuracy(&records).unwrap();
        let chr = character_accuracy(&records).unwrap();
        prop_assert_eq!(seq == 1.0, chr == 1.0);
    }
}

#[test]
fn all_wrong_has_no_operating_point() {
    let records: Vec<_> = (1..=5).map(|i| record(vec![1], vec![2], i as f64 / 5.0, false)).collect();
    assert!(coverage_at_accuracy(&records, 0.98).is_none());
}

#[test]
fn above_max_confidence_keeps_nothing() {
    let records: Vec<_> = (1..=5).map(|i| record(vec![1], vec![1], i as f64 / 10.0, false)).collect();
    let c = coverage_curve(&records, &[0.0, 0.51]).unwrap();
    assert_eq!(c.points[1].coverage, 0.0);
    assert_eq!(c.points[1].accuracy, None);
}
