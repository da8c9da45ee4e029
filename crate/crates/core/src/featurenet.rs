//! Convolutional descriptor extractor.
//!
//! Five convolutions with three 3×3/stride-2 max pools, ReLU after every
//! convolution, no dropout and no local response normalization. The full
//! configuration maps a 64×64 patch to an 8×8×64 map (4096 values); the tiny
//! configuration keeps the same layer stack on 16×16 inputs for fast tests.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{self, Graph, Tensor, TensorError, Var};

/// Pixel normalization offset and scale: `(x - 128) / 160`.
pub const PIXEL_OFFSET: f64 = 128.0;
pub const PIXEL_SCALE: f64 = 160.0;

/// One convolution layer description.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Apply a 3×3, stride-2, pad-1 max pool after the ReLU.
    pub pool_after: bool,
}

const POOL_WINDOW: usize = 3;
const POOL_STRIDE: usize = 2;
const POOL_PADDING: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureConfigKind {
    Full,
    Tiny,
}

impl FeatureConfigKind {
    pub fn name(self) -> &'static str {
        match self {
            FeatureConfigKind::Full => "full",
            FeatureConfigKind::Tiny => "tiny",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Self::Full),
            "tiny" => Some(Self::Tiny),
            _ => None,
        }
    }

    pub fn config(self) -> FeatureConfig {
        match self {
            FeatureConfigKind::Full => FeatureConfig::full(),
            FeatureConfigKind::Tiny => FeatureConfig::tiny(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub kind: FeatureConfigKind,
    pub input_size: usize,
    pub layers: Vec<ConvSpec>,
}

const fn conv(out_channels: usize, kernel: usize, pool_after: bool) -> ConvSpec {
    ConvSpec {
        out_channels,
        kernel,
        stride: 1,
        padding: kernel / 2,
        pool_after,
    }
}

impl FeatureConfig {
    /// 64×64 input, Conv0..Conv4 = 24, 64, 96, 96, 64 channels; output 4096.
    pub fn full() -> Self {
        Self {
            kind: FeatureConfigKind::Full,
            input_size: 64,
            layers: vec![
                conv(24, 7, true),
                conv(64, 5, true),
                conv(96, 3, false),
                conv(96, 3, false),
                conv(64, 3, true),
            ],
        }
    }

    /// 16×16 input, Conv0..Conv3 at a quarter of the full widths, Conv4 kept at
    /// 64 channels so the 2×2 final map flattens to 256.
    pub fn tiny() -> Self {
        Self {
            kind: FeatureConfigKind::Tiny,
            input_size: 16,
            layers: vec![
                conv(6, 7, true),
                conv(16, 5, true),
                conv(24, 3, false),
                conv(24, 3, false),
                conv(64, 3, true),
            ],
        }
    }

    /// `[C, H, W]` after each conv and each pool, in execution order.
    pub fn activation_shapes(&self) -> Vec<[usize; 3]> {
        let mut side = self.input_size;
        let mut shapes = Vec::new();
        for l in &self.layers {
            side = tensor::window_out_extent(side, l.kernel, l.stride, l.padding).unwrap_or(0);
            shapes.push([l.out_channels, side, side]);
            if l.pool_after {
                side = tensor::window_out_extent(side, POOL_WINDOW, POOL_STRIDE, POOL_PADDING).unwrap_or(0);
                shapes.push([l.out_channels, side, side]);
            }
        }
        shapes
    }

    pub fn output_dim(&self) -> usize {
        self.activation_shapes()
            .last()
            .map(|s| s.iter().product())
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Convolution weights shared by both patches of a pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNetParams {
    pub config: FeatureConfig,
    pub layers: Vec<ConvLayer>,
}

/// Uniform Glorot bound `sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub(crate) fn uniform_tensor<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("non-empty shape")
}

impl FeatureNetParams {
    pub fn zeros(config: FeatureConfig) -> Self {
        let mut c_in = 1;
        let layers = config
            .layers
            .iter()
            .map(|l| {
                let layer = ConvLayer {
                    kernel: Tensor::zeros([l.out_channels, c_in, l.kernel, l.kernel]),
                    bias: Tensor::zeros([l.out_channels]),
                };
                c_in = l.out_channels;
                layer
            })
            .collect();
        Self { config, layers }
    }

    /// Glorot-uniform kernels, zero biases.
    pub fn init<R: Rng + ?Sized>(config: FeatureConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(config);
        for layer in &mut p.layers {
            let s = layer.kernel.shape().to_vec();
            let area = s[2] * s[3];
            let bound = glorot_bound(s[1] * area, s[0] * area);
            layer.kernel = uniform_tensor(&s, bound, rng);
        }
        p
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("feature.conv{i}.weight"), &l.kernel));
            out.push((format!("feature.conv{i}.bias"), &l.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.kernel, &mut l.bias])
            .collect()
    }

    /// Registers every weight on `g` as a borrowed parameter, in `named_tensors` order.
    pub fn bind<'p>(&'p self, g: &mut Graph<'p>) -> BoundFeatureNet {
        BoundFeatureNet {
            layers: self
                .layers
                .iter()
                .map(|l| (g.param(&l.kernel), g.param(&l.bias)))
                .collect(),
            config: self.config.clone(),
        }
    }
}

/// FeatureNet weights registered on a graph.
#[derive(Debug, Clone)]
pub struct BoundFeatureNet {
    pub layers: Vec<(Var, Var)>,
    config: FeatureConfig,
}

impl BoundFeatureNet {
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(k, b)| [k, b]).collect()
    }

    /// Runs the stack on a normalized `[1, S, S]` patch and returns the flat descriptor.
    pub fn forward(&self, g: &mut Graph<'_>, patch: Var) -> Result<Var, TensorError> {
        Ok(self.forward_traced(g, patch)?.0)
    }

    /// Like [`forward`](Self::forward) but also returns every intermediate activation shape.
    pub fn forward_traced(&self, g: &mut Graph<'_>, patch: Var) -> Result<(Var, Vec<Vec<usize>>), TensorError> {
        let s = self.config.input_size;
        if g.shape(patch) != [1, s, s] {
            return Err(TensorError::ShapeMismatch {
                op: "extract_features",
                lhs: g.shape(patch).to_vec(),
                rhs: vec![1, s, s],
            });
        }
        let mut x = patch;
        let mut shapes = Vec::new();
        for (spec, &(k, b)) in self.config.layers.iter().zip(&self.layers) {
            let c = g.conv2d(x, k, b, spec.stride, spec.padding)?;
            x = g.relu(c);
            shapes.push(g.shape(x).to_vec());
            if spec.pool_after {
                x = g.maxpool2d(x, POOL_WINDOW, POOL_STRIDE, POOL_PADDING)?;
                shapes.push(g.shape(x).to_vec());
            }
        }
        let n = g.value(x).len();
        Ok((g.reshape(x, &[n])?, shapes))
    }
}

/// Maps 8-bit pixels to `(x - 128) / 160` as a `[1, H, W]` tensor.
pub fn normalize_patch(pixels: &[u8], height: usize, width: usize) -> Result<Tensor, TensorError> {
    let data = pixels
        .iter()
        .map(|&p| (p as f64 - PIXEL_OFFSET) / PIXEL_SCALE)
        .collect();
    Tensor::new([1, height, width], data)
}

/// Convenience: descriptor of one patch without keeping the graph.
pub fn extract_features(patch: &Tensor, params: &FeatureNetParams) -> Result<Tensor, TensorError> {
    let mut g = Graph::new();
    let net = params.bind(&mut g);
    let x = g.input(patch.clone());
    let f = net.forward(&mut g, x)?;
    Ok(g.tensor(f))
}
