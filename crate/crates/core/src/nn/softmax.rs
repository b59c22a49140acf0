use crate::error::{Error, Result};

/// Numerically stable log-softmax: `z_i - m - ln(sum_j exp(z_j - m))` with
/// `m = max(z)`.
pub fn log_softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::Empty("log_softmax"));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("log_softmax input"));
    }
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Ok(z.iter().map(|v| v - m - lse).collect())
}

pub fn softmax_from_log(logp: &[f64]) -> Vec<f64> {
    logp.iter().map(|v| v.exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn uniform_and_large_inputs() {
        let ln2 = -std::f64::consts::LN_2;
        assert!(close(&log_softmax(&[0.0, 0.0]).unwrap(), &[ln2, ln2], 1e-12));
        assert!(close(&log_softmax(&[1000.0, 1000.0]).unwrap(), &[ln2, ln2], 1e-12));
    }

    #[test]
    fn printed_length_table_row() {
        let p = [0.002, 0.002, 0.002, 0.9, 0.09, 0.002, 0.002];
        let z: Vec<f64> = p.iter().map(|v: &f64| v.ln()).collect();
        let want = [-6.2146, -6.2146, -6.2146, -0.10536, -2.4079, -6.2146, -6.2146];
        assert!(close(&log_softmax(&z).unwrap(), &want, 1e-4));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(log_softmax(&[1.0, f64::NAN]).is_err());
        assert!(log_softmax(&[f64::INFINITY]).is_err());
        assert!(log_softmax(&[]).is_err());
    }

    proptest! {
        #[test]
        fn normalizes_and_is_shift_invariant(
            z in proptest::collection::vec(-1000.0f64..1000.0, 1..12),
            c in -500.0f64..500.0,
        ) {
            let a = log_softmax(&z).unwrap();
            let total: f64 = a.iter().map(|v| v.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(a.iter().all(|&v| v <= 0.0));
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let b = log_softmax(&shifted).unwrap();
            prop_assert!(close(&a, &b, 1e-9));
        }
    }
}
