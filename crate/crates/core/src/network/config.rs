use serde::{Deserialize, Serialize};

use crate::data::PreprocessConfig;
use crate::error::{Error, Result};
use crate::nn::conv_output_extent;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Activation {
    Relu,
    /// Max over `pieces` consecutive linear filters; the preceding affine
    /// layer produces `width * pieces` channels.
    Maxout { pieces: usize },
}

impl Activation {
    fn pieces(self) -> usize {
        match self {
            Activation::Relu => 1,
            Activation::Maxout { pieces } => pieces,
        }
    }
}

/// One hidden layer. Spatial layers apply, in order: affine map,
/// activation, optional 2×2 max pooling, optional 3×3 subtractive
/// normalisation, dropout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerSpec {
    Conv {
        width: usize,
        kernel: usize,
        activation: Activation,
        pool_stride: Option<usize>,
        normalize: bool,
        dropout: f64,
    },
    LocallyConnected {
        width: usize,
        kernel: usize,
        activation: Activation,
        dropout: f64,
    },
    /// Rectified fully connected layer; flattens spatial input.
    Dense { width: usize, dropout: f64 },
}

impl LayerSpec {
    pub fn conv(width: usize, pool_stride: Option<usize>) -> Self {
        LayerSpec::Conv {
            width,
            kernel: 5,
            activation: Activation::Relu,
            pool_stride,
            normalize: true,
            dropout: 0.0,
        }
    }

    pub fn dense(width: usize) -> Self {
        LayerSpec::Dense { width, dropout: 0.0 }
    }

    pub fn dropout(&self) -> f64 {
        match *self {
            LayerSpec::Conv { dropout, .. }
            | LayerSpec::LocallyConnected { dropout, .. }
            | LayerSpec::Dense { dropout, .. } => dropout,
        }
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        match &mut self {
            LayerSpec::Conv { dropout, .. }
            | LayerSpec::LocallyConnected { dropout, .. }
            | LayerSpec::Dense { dropout, .. } => *dropout = rate,
        }
        self
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::LocallyConnected { .. } => "locally_connected",
            LayerSpec::Dense { .. } => "dense",
        }
    }
}

/// Output head: `N` character positions over a `K`-symbol alphabet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub max_len: usize,
    pub alphabet_size: usize,
}

impl HeadSpec {
    /// Rows of the stacked head matrix: `N + 2` length classes plus `N·K`.
    pub fn outputs(&self) -> usize {
        self.max_len + 2 + self.max_len * self.alphabet_size
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub name: String,
    /// `[H, W, C]`
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub head: HeadSpec,
    pub preprocess: PreprocessConfig,
}

/// Pooling strides alternate 2, 1, 2, ... starting with the first layer.
pub fn alternating_pool_stride(layer: usize) -> usize {
    if layer % 2 == 0 {
        2
    } else {
        1
    }
}

impl NetworkConfig {
    /// Full-size street-number architecture: eight conv layers, one locally
    /// connected layer and two 3072-unit dense layers on 54×54 RGB crops.
    pub fn svhn_paper() -> Self {
        let widths = [48, 64, 128, 160, 192, 192, 192, 192];
        let mut layers: Vec<LayerSpec> = widths
            .iter()
            .enumerate()
            .map(|(i, &width)| LayerSpec::Conv {
                width,
                kernel: 5,
                activation: if i == 0 { Activation::Maxout { pieces: 3 } } else { Activation::Relu },
                pool_stride: Some(alternating_pool_stride(i)),
                normalize: true,
                dropout: 0.5,
            })
            .collect();
        layers.push(LayerSpec::LocallyConnected {
            width: 192,
            kernel: 5,
            activation: Activation::Relu,
            dropout: 0.5,
        });
        layers.push(LayerSpec::Dense { width: 3072, dropout: 0.5 });
        layers.push(LayerSpec::Dense { width: 3072, dropout: 0.5 });
        Self {
            name: "svhn-paper".into(),
            input: [54, 54, 3],
            layers,
            head: HeadSpec { max_len: 5, alphabet_size: 10 },
            preprocess: PreprocessConfig::svhn(),
        }
    }

    /// CPU-sized preset: 32×64 grayscale, conv widths 8/16/32, one 64-unit
    /// dense layer, digits up to length 5.
    pub fn desk() -> Self {
        Self::desk_with_depth(3)
    }

    /// Desk preset with `depth` conv layers (widths 8, 16, then 32).
    pub fn desk_with_depth(depth: usize) -> Self {
        let widths: Vec<usize> = (0..depth).map(|i| [8, 16].get(i).copied().unwrap_or(32)).collect();
        Self::desk_with_widths(&widths, 64)
    }

    pub fn desk_with_widths(conv_widths: &[usize], dense_width: usize) -> Self {
        let mut layers: Vec<LayerSpec> = conv_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| LayerSpec::conv(w, Some(alternating_pool_stride(i))))
            .collect();
        layers.push(LayerSpec::dense(dense_width));
        Self {
            name: if conv_widths.len() == 3 && dense_width == 64 { "desk".into() } else { format!("desk-{}", conv_widths.len()) },
            input: [32, 64, 1],
            layers,
            head: HeadSpec { max_len: 5, alphabet_size: 10 },
            preprocess: PreprocessConfig::desk(),
        }
    }

    /// Two small conv layers on 8×8 input with N = 2, K = 3; small enough for
    /// whole-model finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            name: "tiny".into(),
            input: [8, 8, 1],
            layers: vec![
                LayerSpec::Conv {
                    width: 2,
                    kernel: 3,
                    activation: Activation::Maxout { pieces: 2 },
                    pool_stride: Some(2),
                    normalize: true,
                    dropout: 0.0,
                },
                LayerSpec::Conv {
                    width: 3,
                    kernel: 3,
                    activation: Activation::Relu,
                    pool_stride: Some(1),
                    normalize: false,
                    dropout: 0.0,
                },
            ],
            head: HeadSpec { max_len: 2, alphabet_size: 3 },
            preprocess: PreprocessConfig { resize: [10, 10], crop: [8, 8], expansion: 0.3 },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "svhn-paper" => Ok(Self::svhn_paper()),
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            other => {
                if let Some(d) = other.strip_prefix("desk-").and_then(|d| d.parse().ok()) {
                    Ok(Self::desk_with_depth(d))
                } else {
                    Err(Error::InvalidArgument(format!("unknown preset {other:?}")))
                }
            }
        }
    }

    pub fn with_head(mut self, max_len: usize, alphabet_size: usize) -> Self {
        self.head = HeadSpec { max_len, alphabet_size };
        self
    }

    /// Sets every hidden layer's dropout rate.
    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.layers = self.layers.into_iter().map(|l| l.with_dropout(rate)).collect();
        self
    }

    /// Output shape of every hidden layer, validating the chain.
    /// Errors name the offending layer index.
    pub fn shape_chain(&self) -> Result<Vec<Vec<usize>>> {
        let [h, w, c] = self.input;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidArgument(format!("input shape {:?} has a zero extent", self.input)));
        }
        if self.preprocess.crop != [h, w] {
            return Err(Error::InvalidArgument(format!(
                "preprocess crop {:?} does not match input {h}x{w}",
                self.preprocess.crop
            )));
        }
        if self.head.max_len == 0 || self.head.alphabet_size == 0 {
            return Err(Error::InvalidArgument("head needs max_len >= 1 and alphabet_size >= 1".into()));
        }
        let mut shape = vec![h, w, c];
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let fail = |reason: String| Error::LayerChain { layer: i, reason };
            let rate = layer.dropout();
            if !(0.0..1.0).contains(&rate) {
                return Err(fail(format!("dropout rate {rate} outside [0, 1)")));
            }
            let spatial = match *layer {
                LayerSpec::Conv { width, kernel, activation, pool_stride, .. } => Some((width, kernel, activation, pool_stride)),
                LayerSpec::LocallyConnected { width, kernel, activation, .. } => Some((width, kernel, activation, None)),
                LayerSpec::Dense { .. } => None,
            };
            shape = match (spatial, layer) {
                (Some((width, kernel, activation, pool_stride)), _) => {
                    if shape.len() != 3 {
                        return Err(fail(format!("{} layer needs spatial input, got {shape:?}", layer.name())));
                    }
                    if width == 0 {
                        return Err(fail("width must be >= 1".into()));
                    }
                    if kernel % 2 == 0 {
                        return Err(fail(format!("kernel {kernel} must be odd")));
                    }
                    if activation.pieces() == 0 {
                        return Err(fail("maxout needs at least one piece".into()));
                    }
                    let (mut oh, mut ow) = (shape[0], shape[1]);
                    if let Some(s) = pool_stride {
                        if !(1..=2).contains(&s) {
                            return Err(fail(format!("pool stride {s} must be 1 or 2")));
                        }
                        oh = conv_output_extent(oh, s);
                        ow = conv_output_extent(ow, s);
                    }
                    vec![oh, ow, width]
                }
                (None, LayerSpec::Dense { width, .. }) => {
                    if *width == 0 {
                        return Err(fail("width must be >= 1".into()));
                    }
                    vec![*width]
                }
                (None, _) => unreachable!("only dense layers are non-spatial"),
            };
            out.push(shape.clone());
        }
        Ok(out)
    }

    /// Number of inputs to the output head.
    pub fn feature_len(&self) -> Result<usize> {
        let chain = self.shape_chain()?;
        Ok(chain.last().map_or(self.input.iter().product(), |s| s.iter().product()))
    }

    pub fn conv_depth(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, LayerSpec::Conv { .. })).count()
    }
}
