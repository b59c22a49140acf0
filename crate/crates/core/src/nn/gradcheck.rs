use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::Tensor;

use super::Layer;

/// `|a - n| / max(|a|, |n|)`, falling back to the absolute difference when
/// both magnitudes are below `1e-7`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale < 1e-7 {
        diff
    } else {
        diff / scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_input_error: f64,
    pub max_param_error: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.max_input_error.max(self.max_param_error)
    }
}

/// Compares a layer's analytic gradients against central differences.
///
/// The scalar loss is `sum_i r_i * y_i` for a fixed random projection `r`,
/// which exercises every output coordinate. Every input and parameter entry
/// is perturbed by `±epsilon`.
pub fn grad_check(layer: &mut dyn Layer, input: &Tensor, epsilon: f64) -> Result<GradCheckReport> {
    let out = layer.forward(input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x9c);
    let proj = Tensor::new(
        out.shape().to_vec(),
        (0..out.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let loss = |l: &dyn Layer, x: &Tensor| -> Result<f64> {
        let y = l.forward(x)?;
        Ok(y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
    };
    let (dx, dparams) = layer.backward(input, &proj)?;

    let mut report = GradCheckReport { max_input_error: 0.0, max_param_error: 0.0, checked: 0 };
    let mut x = input.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + epsilon;
        let up = loss(layer, &x)?;
        x.data_mut()[i] = orig - epsilon;
        let down = loss(layer, &x)?;
        x.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        report.max_input_error = report.max_input_error.max(relative_error(dx.data()[i], numeric));
        report.checked += 1;
    }

    if let Some(grads) = dparams {
        for (which, analytic) in [(Slot::Weights, &grads.weights), (Slot::Biases, &grads.biases)] {
            for (i, &a) in analytic.data().iter().enumerate() {
                let orig = get_param(layer, which, i);
                set_param(layer, which, i, orig + epsilon);
                let up = loss(layer, input)?;
                set_param(layer, which, i, orig - epsilon);
                let down = loss(layer, input)?;
                set_param(layer, which, i, orig);
                let numeric = (up - down) / (2.0 * epsilon);
                report.max_param_error = report.max_param_error.max(relative_error(a, numeric));
                report.checked += 1;
            }
        }
    }
    Ok(report)
}

#[derive(Clone, Copy)]
enum Slot {
    Weights,
    Biases,
}

fn param_tensor(layer: &mut dyn Layer, which: Slot) -> &mut Tensor {
    let p = layer.params_mut().expect("layer returned parameter grads without params");
    match which {
        Slot::Weights => &mut p.weights,
        Slot::Biases => &mut p.biases,
    }
}

fn get_param(layer: &mut dyn Layer, which: Slot, i: usize) -> f64 {
    param_tensor(layer, which).data()[i]
}

fn set_param(layer: &mut dyn Layer, which: Slot, i: usize, v: f64) {
    param_tensor(layer, which).data_mut()[i] = v;
}
