//! Object-style wrappers around the kernel functions, used for per-layer
//! gradient checks and ad-hoc composition.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::Tensor;

use super::*;

pub trait Layer {
    fn forward(&self, input: &Tensor) -> Result<Tensor>;

    /// Returns `dL/d(input)` and, for parametrised layers, parameter grads.
    fn backward(&self, input: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Option<LayerGrads>)>;

    fn params(&self) -> Option<&LayerParams> {
        None
    }

    fn params_mut(&mut self) -> Option<&mut LayerParams> {
        None
    }
}

pub struct Conv2d {
    pub params: LayerParams,
    pub stride: usize,
}

impl Layer for Conv2d {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        conv2d(input, &self.params, self.stride)
    }

    fn backward(&self, input: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Option<LayerGrads>)> {
        let (dx, g) = conv2d_backward(input, &self.params, self.stride, grad_out)?;
        Ok((dx, Some(g)))
    }

    fn params(&self) -> Option<&LayerParams> {
        Some(&self.params)
    }

    fn params_mut(&mut self) -> Option<&mut LayerParams> {
        Some(&mut self.params)
    }
}

pub struct LocallyConnected {
    pub params: LayerParams,
}

impl Layer for LocallyConnected {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        locally_connected(input, &self.params)
    }

    fn backward(&self, input: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Option<LayerGrads>)> {
        let (dx, g) = locally_connected_backward(input, &self.params, grad_out)?;
        Ok((dx, Some(g)))
    }

    fn params(&self) -> Option<&LayerParams> {
        Some(&self.params)
    }

    fn params_mut(&mut self) -> Option<&mut LayerParams> {
        Some(&mut self.params)
    }
}

pub struct FullyConnected {
    pub params: LayerParams,
}

impl Layer for FullyConnected {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        fully_connected(input, &self.params)
    }

    fn backward(&self, input: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Option<LayerGrads>)> {
        let (dx, g) = fully_connected_backward(input, &self.params, grad_out)?;
        Ok((dx, Some(g)))
    }

    fn params(&self) -> Option<&LayerParams> {
        Some(&self.params)
    }

    fn params_mut(&mut self) -> Option<&mut LayerParams> {
        Some(&mut self.params)
    }
}

pub struct MaxPool2d {
    pub stride: usize,
}

impl Layer for MaxPool2d {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        max_pool2d(input, self.stride)
    }

    fn backward(&self, input: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Option<LayerGrads>)> {
        let (_, arg) = max_pool2d_with_argmax(input, self.stride)?;
        Ok((max_pool2d_backward(input.shape(), &arg, grad_out)?, None))
    }
}

pub struct Rectifier;

impl Layer for Rectifier {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        Ok(rectifier(input))
    }

    fn backward(&self, input: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Option<LayerGrads>)> {
        Ok((rectifier_backward(input, grad_out), None))
    }
}

pub struct Maxout {
    pub pieces: usize,
}

impl Layer for Maxout {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        maxout(input, self.pieces)
    }

    fn backward(&self, input: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Option<LayerGrads>)> {
        let (_, arg) = maxout_with_argmax(input, self.pieces)?;
        Ok((maxout_backward(input.shape(), &arg, grad_out), None))
    }
}

pub struct SubtractiveNorm;

impl Layer for SubtractiveNorm {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        subtractive_normalize(input)
    }

    fn backward(&self, _input: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Option<LayerGrads>)> {
        Ok((subtractive_normalize_backward(grad_out)?, None))
    }
}

/// Dropout with a fixed mask seed, so forward and backward see the same mask.
pub struct DropoutLayer {
    pub rate: f64,
    pub mode: Mode,
    pub seed: u64,
}

impl Layer for DropoutLayer {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok(dropout(input, self.rate, self.mode, &mut rng)?.0)
    }

    fn backward(&self, input: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Option<LayerGrads>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (_, mask) = dropout(input, self.rate, self.mode, &mut rng)?;
        Ok((dropout_backward(mask.as_deref(), grad_out), None))
    }
}
