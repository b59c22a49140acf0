//! Layer kernels with hand-derived gradients.
//!
//! Every forward op has a matching `*_backward` that maps the gradient of a
//! scalar loss w.r.t. the op's output to gradients w.r.t. its input (and
//! parameters, where it has any). Forwards are pure; dropout takes its RNG
//! explicitly.

mod activation;
mod conv;
mod dense;
pub(crate) mod gemm;
mod gradcheck;
mod layer;
mod norm;
mod pool;
mod softmax;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use activation::{
    dropout, dropout_backward, maxout, maxout_backward, maxout_with_argmax, rectifier,
    rectifier_backward,
};
pub use conv::{
    conv2d, conv2d_backward, conv_output_extent, im2col, locally_connected,
    locally_connected_backward, ConvGeometry,
};
pub(crate) use conv::{conv2d_from_cols, conv2d_grads_from_cols, lc_from_cols, lc_grads_from_cols};
pub use dense::{fully_connected, fully_connected_backward};
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use layer::{
    Conv2d, DropoutLayer, FullyConnected, Layer, LocallyConnected, MaxPool2d, Maxout, Rectifier,
    SubtractiveNorm,
};
pub use norm::{subtractive_normalize, subtractive_normalize_backward};
pub use pool::{max_pool2d, max_pool2d_backward, max_pool2d_with_argmax};
pub use softmax::{log_softmax, softmax_from_log};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    LocallyConnected,
    FullyConnected,
}

/// Train mode enables dropout; eval mode is a deterministic pure forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Weights and biases of one affine layer.
///
/// Weight layouts (row-major):
/// - conv: `[c_out, kh, kw, c_in]`, biases `[c_out]`
/// - locally connected: `[h_out, w_out, c_out, kh, kw, c_in]`, biases `[h_out, w_out, c_out]`
/// - fully connected: `[m, d]`, biases `[m]`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub kind: LayerKind,
    pub weights: Tensor,
    pub biases: Tensor,
}

impl LayerParams {
    pub fn new(kind: LayerKind, weights: Tensor, biases: Tensor) -> Result<Self> {
        let ws = weights.shape();
        let bs = biases.shape();
        let ok = match kind {
            LayerKind::Conv => ws.len() == 4 && bs == [ws[0]],
            LayerKind::LocallyConnected => ws.len() == 6 && bs == [ws[0], ws[1], ws[2]],
            LayerKind::FullyConnected => ws.len() == 2 && bs == [ws[0]],
        };
        if !ok {
            return Err(Error::shape(
                "LayerParams::new",
                format!("{kind:?} geometry"),
                format!("weights {ws:?}, biases {bs:?}"),
            ));
        }
        Ok(Self { kind, weights, biases })
    }

    pub fn conv(weights: Tensor, biases: Tensor) -> Result<Self> {
        Self::new(LayerKind::Conv, weights, biases)
    }

    pub fn locally_connected(weights: Tensor, biases: Tensor) -> Result<Self> {
        Self::new(LayerKind::LocallyConnected, weights, biases)
    }

    pub fn fully_connected(weights: Tensor, biases: Tensor) -> Result<Self> {
        Self::new(LayerKind::FullyConnected, weights, biases)
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    pub fn zeros_like(&self) -> LayerGrads {
        LayerGrads {
            weights: Tensor::zeros(self.weights.shape()),
            biases: Tensor::zeros(self.biases.shape()),
        }
    }
}

/// Gradient of a scalar loss w.r.t. one layer's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGrads {
    pub weights: Tensor,
    pub biases: Tensor,
}

impl LayerGrads {
    pub fn add_assign(&mut self, other: &LayerGrads) {
        self.weights.axpy(1.0, &other.weights);
        self.biases.axpy(1.0, &other.biases);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.weights.scale(alpha);
        self.biases.scale(alpha);
    }
}
