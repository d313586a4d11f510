use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Graph, NodeId};

const LN_EPS: f64 = 1e-5;

/// Fully connected layer, `x [.., in] -> [.., out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        Self {
            weight: store.add_uniform(format!("{name}.weight"), &[input, output], bound, rng),
            bias: store.add_uniform(format!("{name}.bias"), &[output], bound, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_bias(y, b)
    }
}

/// Normalization over the feature (last) axis.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add_const(format!("{name}.gamma"), &[dim], 1.0),
            beta: store.add_const(format!("{name}.beta"), &[dim], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Convolution along the frame axis of `[B, T, C]`.
#[derive(Debug, Clone, Copy)]
pub struct TemporalConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl TemporalConv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * input;
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Self {
            weight: store.add_uniform(format!("{name}.weight"), &[fan_in, output], bound, rng),
            bias: store.add_uniform(format!("{name}.bias"), &[output], bound, rng),
            kernel,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv1d(x, w, b, self.kernel)
    }
}

/// 3x3 convolution over channels-last images.
#[derive(Debug, Clone, Copy)]
pub struct Conv3x3 {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl Conv3x3 {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((9 * input).max(1) as f64).sqrt();
        Self {
            weight: store.add_uniform(format!("{name}.weight"), &[9 * input, output], bound, rng),
            bias: store.add_uniform(format!("{name}.bias"), &[output], bound, rng),
            stride,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, b, self.stride)
    }
}

/// Sinusoidal embedding of integer timesteps, `[len(t), dim]`.
///
/// The first half of each row holds `sin(t * f_i)`, the second half
/// `cos(t * f_i)`, with `f_i = 10000^(-i / half)`.
pub fn sinusoidal_embedding(t: &[usize], dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; t.len() * dim];
    for (row, &ti) in out.chunks_mut(dim).zip(t) {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = ti as f64 * freq;
            row[i] = arg.sin();
            row[half + i] = arg.cos();
        }
    }
    out
}
