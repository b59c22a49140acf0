//! Convolutional feature extractor plus the sequence head.
//!
//! A [`NetworkConfig`] is compiled into a flat list of stages (affine op,
//! activation, pooling, normalisation, dropout). The forward pass records a
//! cache per stage so that the backward pass can run the stages in reverse.
//! The final hidden activation is a single feature vector for the whole
//! image; one stacked affine map produces the length logits and the `N`
//! character logit rows.

mod checkpoint;
mod config;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, ConvGeometry, LayerGrads, LayerParams, Mode};
use crate::sequence::{nll_loss_and_grad, HeadLogits, SequenceDistribution, SequenceLabel};
use crate::tensor::Tensor;

pub use checkpoint::{read_container, write_container, Container};
pub use config::{alternating_pool_stride, Activation, HeadSpec, LayerSpec, NetworkConfig};

#[derive(Debug, Clone)]
enum Stage {
    Conv { param: usize, kh: usize, kw: usize },
    LocallyConnected { param: usize, kh: usize, kw: usize },
    Dense { param: usize },
    Relu,
    Maxout(usize),
    Pool(usize),
    Norm,
    Dropout(f64),
}

#[derive(Debug, Clone)]
enum StageCache {
    Cols { geometry: ConvGeometry, cols: Vec<f64> },
    Input(Tensor),
    Argmax { in_shape: Vec<usize>, argmax: Vec<usize> },
    Mask(Option<Vec<f64>>),
    None,
}

fn compile(config: &NetworkConfig) -> Vec<Stage> {
    let mut stages = Vec::new();
    let act = |stages: &mut Vec<Stage>, a: Activation| match a {
        Activation::Relu => stages.push(Stage::Relu),
        Activation::Maxout { pieces } => stages.push(Stage::Maxout(pieces)),
    };
    for (param, layer) in config.layers.iter().enumerate() {
        match *layer {
            LayerSpec::Conv { kernel, activation, pool_stride, normalize, dropout, .. } => {
                stages.push(Stage::Conv { param, kh: kernel, kw: kernel });
                act(&mut stages, activation);
                if let Some(s) = pool_stride {
                    stages.push(Stage::Pool(s));
                }
                if normalize {
                    stages.push(Stage::Norm);
                }
                if dropout > 0.0 {
                    stages.push(Stage::Dropout(dropout));
                }
            }
            LayerSpec::LocallyConnected { kernel, activation, dropout, .. } => {
                stages.push(Stage::LocallyConnected { param, kh: kernel, kw: kernel });
                act(&mut stages, activation);
                if dropout > 0.0 {
                    stages.push(Stage::Dropout(dropout));
                }
            }
            LayerSpec::Dense { dropout, .. } => {
                stages.push(Stage::Dense { param });
                stages.push(Stage::Relu);
                if dropout > 0.0 {
                    stages.push(Stage::Dropout(dropout));
                }
            }
        }
    }
    stages
}

/// Network parameters and the configuration they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: NetworkConfig,
    layers: Vec<LayerParams>,
    head: LayerParams,
    /// Bumped on every parameter update; traces from older generations are
    /// rejected by [`Model::backward`].
    generation: u64,
}

/// Activations recorded by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    generation: u64,
    input_shape: Vec<usize>,
    caches: Option<Vec<StageCache>>,
    features: Tensor,
    pub logits: HeadLogits,
    pub distribution: SequenceDistribution,
}

/// Gradient of a scalar loss w.r.t. every parameter of a [`Model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
    pub head: LayerGrads,
}

impl Gradients {
    pub fn zeros_for(model: &Model) -> Self {
        Self {
            layers: model.layers.iter().map(LayerParams::zeros_like).collect(),
            head: model.head.zeros_like(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b);
        }
        self.head.add_assign(&other.head);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.layers.iter_mut().for_each(|g| g.scale(alpha));
        self.head.scale(alpha);
    }

    /// All gradient tensors in parameter order (weights then biases per
    /// layer, head last).
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = Vec::with_capacity(2 * self.layers.len() + 2);
        for g in self.layers.iter().chain(std::iter::once(&self.head)) {
            v.push(&g.weights);
            v.push(&g.biases);
        }
        v
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

fn init_layer(kind: nn::LayerKind, wshape: Vec<usize>, bshape: Vec<usize>, fan_in: usize, gain: f64, rng: &mut ChaCha8Rng) -> LayerParams {
    let std = (gain / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n: usize = wshape.iter().product();
    let w = Tensor::new(wshape, (0..n).map(|_| normal.sample(rng)).collect()).expect("init weight shape");
    let b = Tensor::zeros(&bshape);
    LayerParams::new(kind, w, b).expect("init geometry")
}

impl Model {
    /// Builds a model with fan-in scaled Gaussian weights (He scaling for
    /// hidden layers, `1/fan_in` for the head) and zero biases.
    /// Deterministic for a given seed.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        let chain = config.shape_chain()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_shape = config.input.to_vec();
        let mut layers = Vec::with_capacity(config.layers.len());
        for (spec, out_shape) in config.layers.iter().zip(&chain) {
            let params = match *spec {
                LayerSpec::Conv { width, kernel, activation, .. } => {
                    let cin = in_shape[2];
                    let cout = width * pieces(activation);
                    let fan_in = kernel * kernel * cin;
                    init_layer(nn::LayerKind::Conv, vec![cout, kernel, kernel, cin], vec![cout], fan_in, 2.0, &mut rng)
                }
                LayerSpec::LocallyConnected { width, kernel, activation, .. } => {
                    let (h, w, cin) = (in_shape[0], in_shape[1], in_shape[2]);
                    let cout = width * pieces(activation);
                    let fan_in = kernel * kernel * cin;
                    init_layer(
                        nn::LayerKind::LocallyConnected,
                        vec![h, w, cout, kernel, kernel, cin],
                        vec![h, w, cout],
                        fan_in,
                        2.0,
                        &mut rng,
                    )
                }
                LayerSpec::Dense { width, .. } => {
                    let d: usize = in_shape.iter().product();
                    init_layer(nn::LayerKind::FullyConnected, vec![width, d], vec![width], d, 2.0, &mut rng)
                }
            };
            layers.push(params);
            in_shape = out_shape.clone();
        }
        let d: usize = in_shape.iter().product();
        let head = init_layer(nn::LayerKind::FullyConnected, vec![config.head.outputs(), d], vec![config.head.outputs()], d, 1.0, &mut rng);
        Ok(Self { config, layers, head, generation: 0 })
    }

    /// Reassembles a model from stored parameters, checking every shape
    /// against a fresh build of `config`.
    pub fn from_parts(config: NetworkConfig, layers: Vec<LayerParams>, head: LayerParams) -> Result<Self> {
        let shapes = Self::param_shapes(&config)?;
        let got: Vec<(Vec<usize>, Vec<usize>)> = layers
            .iter()
            .chain(std::iter::once(&head))
            .map(|p| (p.weights.shape().to_vec(), p.biases.shape().to_vec()))
            .collect();
        if shapes != got {
            return Err(Error::Checkpoint("parameter shapes do not match the stored configuration".into()));
        }
        Ok(Self { config, layers, head, generation: 0 })
    }

    /// `(weights, biases)` shapes for every layer and the head.
    pub fn param_shapes(config: &NetworkConfig) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
        let chain = config.shape_chain()?;
        let mut in_shape = config.input.to_vec();
        let mut out = Vec::new();
        for (spec, out_shape) in config.layers.iter().zip(&chain) {
            out.push(match *spec {
                LayerSpec::Conv { width, kernel, activation, .. } => {
                    let cout = width * pieces(activation);
                    (vec![cout, kernel, kernel, in_shape[2]], vec![cout])
                }
                LayerSpec::LocallyConnected { width, kernel, activation, .. } => {
                    let cout = width * pieces(activation);
                    (vec![in_shape[0], in_shape[1], cout, kernel, kernel, in_shape[2]], vec![in_shape[0], in_shape[1], cout])
                }
                LayerSpec::Dense { width, .. } => (vec![width, in_shape.iter().product()], vec![width]),
            });
            in_shape = out_shape.clone();
        }
        let m = config.head.outputs();
        out.push((vec![m, in_shape.iter().product()], vec![m]));
        Ok(out)
    }

    /// Parameter count computed from the configuration alone.
    pub fn count_params(config: &NetworkConfig) -> Result<usize> {
        Ok(Self::param_shapes(config)?
            .iter()
            .map(|(w, b)| w.iter().product::<usize>() + b.iter().product::<usize>())
            .sum())
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn head(&self) -> &LayerParams {
        &self.head
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerParams::param_count).sum::<usize>() + self.head.param_count()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// All parameter tensors in the same order as [`Gradients::tensors`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = Vec::with_capacity(2 * self.layers.len() + 2);
        for p in self.layers.iter().chain(std::iter::once(&self.head)) {
            v.push(&p.weights);
            v.push(&p.biases);
        }
        v
    }

    /// Mutable access to the parameters; bumps the generation so that
    /// outstanding traces become stale.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.generation += 1;
        let mut v = Vec::with_capacity(2 * self.layers.len() + 2);
        for p in self.layers.iter_mut().chain(std::iter::once(&mut self.head)) {
            v.push(&mut p.weights);
            v.push(&mut p.biases);
        }
        v
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        if image.shape() != self.config.input {
            return Err(Error::shape("Model::forward", format!("{:?}", self.config.input), format!("{:?}", image.shape())));
        }
        Ok(())
    }

    /// Deterministic inference-mode forward pass.
    pub fn forward(&self, image: &Tensor) -> Result<SequenceDistribution> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.run(image, false, false, &mut rng)?.distribution)
    }

    /// Forward pass recording activations for [`Model::backward`]. Train
    /// mode applies dropout; eval mode records nothing and its trace cannot
    /// be back-propagated.
    pub fn forward_traced<R: Rng + ?Sized>(&self, image: &Tensor, mode: Mode, rng: &mut R) -> Result<Trace> {
        match mode {
            Mode::Train => self.run(image, true, true, rng),
            Mode::Eval => self.run(image, false, false, rng),
        }
    }

    /// Training-mode forward with dropout disabled: recorded and fully
    /// deterministic.
    pub fn forward_traced_no_dropout(&self, image: &Tensor) -> Result<Trace> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.run(image, true, false, &mut rng)
    }

    fn run<R: Rng + ?Sized>(&self, image: &Tensor, record: bool, dropout: bool, rng: &mut R) -> Result<Trace> {
        self.check_input(image)?;
        let stages = compile(&self.config);
        let mut caches = Vec::with_capacity(if record { stages.len() } else { 0 });
        let mut x = image.clone();
        for stage in &stages {
            let (y, cache) = match *stage {
                Stage::Conv { param, kh, kw } => {
                    let (h, w, c) = x.hwc()?;
                    let geometry = ConvGeometry { in_h: h, in_w: w, in_c: c, kh, kw, stride: 1 };
                    let cols = nn::im2col(&x, &geometry);
                    let y = nn::conv2d_from_cols(&cols, &geometry, &self.layers[param]);
                    (y, StageCache::Cols { geometry, cols })
                }
                Stage::LocallyConnected { param, kh, kw } => {
                    let (h, w, c) = x.hwc()?;
                    let geometry = ConvGeometry { in_h: h, in_w: w, in_c: c, kh, kw, stride: 1 };
                    let cols = nn::im2col(&x, &geometry);
                    let y = nn::lc_from_cols(&cols, &geometry, &self.layers[param]);
                    (y, StageCache::Cols { geometry, cols })
                }
                Stage::Dense { param } => {
                    let y = nn::fully_connected(&x, &self.layers[param])?;
                    (y, StageCache::Input(x))
                }
                Stage::Relu => {
                    let y = nn::rectifier(&x);
                    (y, StageCache::Input(x))
                }
                Stage::Maxout(k) => {
                    let (y, argmax) = nn::maxout_with_argmax(&x, k)?;
                    (y, StageCache::Argmax { in_shape: x.shape().to_vec(), argmax })
                }
                Stage::Pool(s) => {
                    let (y, argmax) = nn::max_pool2d_with_argmax(&x, s)?;
                    (y, StageCache::Argmax { in_shape: x.shape().to_vec(), argmax })
                }
                Stage::Norm => (nn::subtractive_normalize(&x)?, StageCache::None),
                Stage::Dropout(rate) => {
                    let mode = if dropout { Mode::Train } else { Mode::Eval };
                    let (y, mask) = nn::dropout(&x, rate, mode, rng)?;
                    (y, StageCache::Mask(mask))
                }
            };
            if record {
                caches.push(cache);
            }
            x = y;
        }
        let features = x.flatten();
        let flat = nn::fully_connected(&features, &self.head)?.into_data();
        let logits = HeadLogits::from_flat(&flat, self.config.head.max_len, self.config.head.alphabet_size)?;
        let distribution = SequenceDistribution::from_logits(&logits)?;
        Ok(Trace {
            generation: self.generation,
            input_shape: image.shape().to_vec(),
            caches: record.then_some(caches),
            features,
            logits,
            distribution,
        })
    }

    /// Back-propagates gradients w.r.t. the head logits through the whole
    /// network.
    pub fn backward(&self, trace: &Trace, head_grad: &HeadLogits) -> Result<Gradients> {
        let caches = trace.caches.as_ref().ok_or(Error::StaleCache("trace was recorded in eval mode"))?;
        if trace.generation != self.generation {
            return Err(Error::StaleCache("parameters changed since the forward pass"));
        }
        let stages = compile(&self.config);
        if caches.len() != stages.len() || trace.input_shape != self.config.input {
            return Err(Error::StaleCache("trace does not belong to this model"));
        }

        let g = Tensor::from_vec(head_grad.flat());
        let (dfeat, head) = nn::fully_connected_backward(&trace.features, &self.head, &g)?;
        let mut layers: Vec<Option<LayerGrads>> = vec![None; self.layers.len()];

        let mut grad = dfeat;
        for (i, (stage, cache)) in stages.iter().zip(caches).enumerate().rev() {
            let need_input = i > 0;
            grad = match (stage, cache) {
                (Stage::Conv { param, .. }, StageCache::Cols { geometry, cols }) => {
                    let go = grad.reshape(vec![geometry.out_h(), geometry.out_w(), self.layers[*param].weights.shape()[0]])?;
                    let (dx, pg) = nn::conv2d_grads_from_cols(cols, geometry, &self.layers[*param], &go, need_input);
                    layers[*param] = Some(pg);
                    dx.unwrap_or_else(|| Tensor::zeros(&[0]))
                }
                (Stage::LocallyConnected { param, .. }, StageCache::Cols { geometry, cols }) => {
                    let go = grad.reshape(vec![geometry.out_h(), geometry.out_w(), self.layers[*param].weights.shape()[2]])?;
                    let (dx, pg) = nn::lc_grads_from_cols(cols, geometry, &self.layers[*param], &go, need_input);
                    layers[*param] = Some(pg);
                    dx.unwrap_or_else(|| Tensor::zeros(&[0]))
                }
                (Stage::Dense { param }, StageCache::Input(x)) => {
                    let (dx, pg) = nn::fully_connected_backward(x, &self.layers[*param], &grad)?;
                    layers[*param] = Some(pg);
                    dx
                }
                (Stage::Relu, StageCache::Input(x)) => {
                    let go = grad.reshape(x.shape().to_vec())?;
                    nn::rectifier_backward(x, &go)
                }
                (Stage::Maxout(_), StageCache::Argmax { in_shape, argmax }) => nn::maxout_backward(in_shape, argmax, &grad),
                (Stage::Pool(_), StageCache::Argmax { in_shape, argmax }) => nn::max_pool2d_backward(in_shape, argmax, &grad)?,
                (Stage::Norm, StageCache::None) => nn::subtractive_normalize_backward(&grad)?,
                (Stage::Dropout(_), StageCache::Mask(mask)) => nn::dropout_backward(mask.as_deref(), &grad),
                _ => return Err(Error::StaleCache("cache kind does not match stage")),
            };
        }
        let layers = layers
            .into_iter()
            .map(|g| g.ok_or(Error::StaleCache("layer without recorded activations")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { layers, head })
    }

    /// Negative log-likelihood of `label` and its parameter gradients.
    /// Train mode applies dropout; eval mode runs the same pass without it.
    pub fn loss_and_grad<R: Rng + ?Sized>(&self, image: &Tensor, label: &SequenceLabel, mode: Mode, rng: &mut R) -> Result<(f64, Gradients)> {
        let trace = match mode {
            Mode::Train => self.forward_traced(image, Mode::Train, rng)?,
            Mode::Eval => self.forward_traced_no_dropout(image)?,
        };
        let (loss, head_grad) = nll_loss_and_grad(&trace.logits, label)?;
        Ok((loss, self.backward(&trace, &head_grad)?))
    }
}

fn pieces(a: Activation) -> usize {
    match a {
        Activation::Relu => 1,
        Activation::Maxout { pieces } => pieces,
    }
}
