//! Two-level U-shaped conv net with single-head self-attention at the
//! bottleneck. Operates on channels-last latents `[B, h, w, 5 C_z]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sinusoidal_embedding, Conv3x3, Graph, LayerNorm, Linear, NodeId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub time_dim: usize,
    pub attention: bool,
    pub positional_encoding: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            time_dim: 64,
            attention: true,
            positional_encoding: true,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "l2i: base_channels must be even and >= 2, got {}",
                self.base_channels
            )));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::InvalidConfig(format!("l2i: time_dim must be even and >= 2, got {}", self.time_dim)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    norm1: LayerNorm,
    conv1: Conv3x3,
    time: Linear,
    norm2: LayerNorm,
    conv2: Conv3x3,
    skip: Option<Linear>,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, tdim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cin),
            conv1: Conv3x3::new(store, &format!("{name}.conv1"), cin, cout, 1, rng),
            time: Linear::new(store, &format!("{name}.time"), tdim, cout, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cout),
            conv2: Conv3x3::new(store, &format!("{name}.conv2"), cout, cout, 1, rng),
            skip: (cin != cout).then(|| Linear::new(store, &format!("{name}.skip"), cin, cout, rng)),
        }
    }

    fn forward(&self, g: &mut Graph, x: NodeId, temb: NodeId) -> NodeId {
        let h = self.norm1.forward(g, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, h);
        let t = self.time.forward(g, temb);
        let h = g.broadcast_rows(h, t);
        let h = self.norm2.forward(g, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, h);
        let s = match &self.skip {
            Some(lin) => lin.forward(g, x),
            None => x,
        };
        g.add(s, h)
    }
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    norm: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

/// 2D sinusoidal encoding `[h * w, c]`: the first half of the channels
/// encodes the row, the second half the column.
pub fn positional_encoding_2d(h: usize, w: usize, c: usize) -> Vec<f64> {
    let half = c / 2;
    let rows = sinusoidal_embedding(&(0..h).collect::<Vec<_>>(), half);
    let cols = sinusoidal_embedding(&(0..w).collect::<Vec<_>>(), c - half);
    let mut out = Vec::with_capacity(h * w * c);
    for r in 0..h {
        for col in 0..w {
            out.extend_from_slice(&rows[r * half..(r + 1) * half]);
            out.extend_from_slice(&cols[col * (c - half)..(col + 1) * (c - half)]);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    in_proj: Linear,
    time_fc: Linear,
    down_block: ResBlock,
    down: Conv3x3,
    mid1: ResBlock,
    attn: Option<Attention>,
    mid2: ResBlock,
    up_block: ResBlock,
    out_norm: LayerNorm,
    out_conv: Conv3x3,
}

impl UNet {
    pub fn new(store: &mut ParamStore, config: UNetConfig, in_channels: usize, out_channels: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, td) = (config.base_channels, config.time_dim);
        let rng = &mut rng;
        let in_proj = Linear::new(store, "in_proj", in_channels, b, rng);
        let time_fc = Linear::new(store, "time_fc", td, td, rng);
        let down_block = ResBlock::new(store, "down_block", b, b, td, rng);
        let down = Conv3x3::new(store, "down", b, 2 * b, 2, rng);
        let mid1 = ResBlock::new(store, "mid1", 2 * b, 2 * b, td, rng);
        let attn = config.attention.then(|| Attention {
            norm: LayerNorm::new(store, "attn.norm", 2 * b),
            q: Linear::new(store, "attn.q", 2 * b, 2 * b, rng),
            k: Linear::new(store, "attn.k", 2 * b, 2 * b, rng),
            v: Linear::new(store, "attn.v", 2 * b, 2 * b, rng),
            out: Linear::new(store, "attn.out", 2 * b, 2 * b, rng),
        });
        let mid2 = ResBlock::new(store, "mid2", 2 * b, 2 * b, td, rng);
        let up_block = ResBlock::new(store, "up_block", 3 * b, b, td, rng);
        let out_norm = LayerNorm::new(store, "out_norm", b);
        let out_conv = Conv3x3::new(store, "out_conv", b, out_channels, 1, rng);
        Ok(Self {
            config,
            in_proj,
            time_fc,
            down_block,
            down,
            mid1,
            attn,
            mid2,
            up_block,
            out_norm,
            out_conv,
        })
    }

    /// Residual self-attention over the spatial positions of `x` (`[B, h, w, C]`).
    pub(crate) fn attend(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let Some(a) = &self.attn else { return x };
        let shape = g.shape(x).to_vec();
        let (bsz, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let tokens = g.reshape(x, &[bsz, h * w, c]);
        let mut t = a.norm.forward(g, tokens);
        if self.config.positional_encoding {
            let pe = positional_encoding_2d(h, w, c);
            let pe = g.input(pe.repeat(bsz), &[bsz, h * w, c]);
            t = g.add(t, pe);
        }
        let q = a.q.forward(g, t);
        let k = a.k.forward(g, t);
        let v = a.v.forward(g, t);
        let s = g.bmm(q, k, true);
        let s = g.scale(s, 1.0 / (c as f64).sqrt());
        let p = g.softmax(s);
        let o = g.bmm(p, v, false);
        let o = a.out.forward(g, o);
        let y = g.add(tokens, o);
        g.reshape(y, &shape)
    }

    pub(crate) fn forward(&self, g: &mut Graph, x: NodeId, ts: &[usize]) -> NodeId {
        let bsz = ts.len();
        let temb = g.input(sinusoidal_embedding(ts, self.config.time_dim), &[bsz, self.config.time_dim]);
        let temb = self.time_fc.forward(g, temb);
        let temb = g.silu(temb);

        let h0 = self.in_proj.forward(g, x);
        let skip = self.down_block.forward(g, h0, temb);
        let h = self.down.forward(g, skip);
        let h = self.mid1.forward(g, h, temb);
        let h = self.attend(g, h);
        let h = self.mid2.forward(g, h, temb);
        let h = g.upsample2(h);
        let h = g.concat(&[h, skip]);
        let h = self.up_block.forward(g, h, temb);
        let h = self.out_norm.forward(g, h);
        let h = g.silu(h);
        self.out_conv.forward(g, h)
    }
}
