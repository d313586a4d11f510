//! Audio-to-landmark denoiser: condition fusion, stacked temporal blocks and
//! the sampling / regression entry points over normalized canonical windows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ddpm::{self, Denoiser, LossNorm, NoiseSchedule};
use crate::error::{Error, Result};
use crate::geometry::{LandmarkFrame, LandmarkSequence};
use crate::nn::{sinusoidal_embedding, Grads, Graph, LayerNorm, Linear, NodeId, ParamStore, TemporalConv};

/// Per-frame audio embeddings, `len × dim`, aligned with landmark frames.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatureSequence {
    features: Vec<f64>,
    dim: usize,
    fps: f64,
}

impl AudioFeatureSequence {
    pub fn new(features: Vec<f64>, dim: usize, fps: f64) -> Result<Self> {
        if dim == 0 || features.is_empty() {
            return Err(Error::EmptyInput("audio features"));
        }
        if features.len() % dim != 0 {
            return Err(Error::shape("audio features", dim, features.len() % dim));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::InvalidConfig(format!("fps must be positive, got {fps}")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "audio features".into(), step: 0 });
        }
        Ok(Self { features, dim, fps })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn len(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Frames `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.len() {
            return Err(Error::shape("audio window end", self.len(), start + len));
        }
        Self::new(self.features[start * self.dim..(start + len) * self.dim].to_vec(), self.dim, self.fps)
    }

    /// Gathers arbitrary frame indices (used for padding by repetition).
    pub fn gather(&self, idx: &[usize]) -> Result<Self> {
        let mut out = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            if i >= self.len() {
                return Err(Error::shape("audio frame index", self.len(), i));
            }
            out.extend_from_slice(self.row(i));
        }
        Self::new(out, self.dim, self.fps)
    }
}

/// Condition bundle for one window: audio features and the raw canonical mean landmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct A2lCondition {
    pub audio: AudioFeatureSequence,
    pub mean_landmarks: LandmarkFrame,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum A2lObjective {
    /// Noise prediction on diffused windows.
    #[default]
    Diffusion,
    /// Direct prediction of the clean window from conditions alone.
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct A2lConfig {
    pub landmarks: usize,
    pub audio_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub window: usize,
    pub kernel: usize,
    pub residual: bool,
    pub temporal_unit: bool,
    pub mapping_unit: bool,
    pub objective: A2lObjective,
}

impl Default for A2lConfig {
    fn default() -> Self {
        Self {
            landmarks: 68,
            audio_dim: 16,
            hidden: 128,
            blocks: 12,
            window: 20,
            kernel: 3,
            residual: true,
            temporal_unit: true,
            mapping_unit: true,
            objective: A2lObjective::Diffusion,
        }
    }
}

impl A2lConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("a2l: {m}")));
        if self.landmarks < 4 {
            return bad(format!("landmarks must be >= 4, got {}", self.landmarks));
        }
        if self.audio_dim == 0 || self.window == 0 {
            return bad("audio_dim and window must be positive".into());
        }
        if self.hidden < 2 || self.hidden % 2 != 0 {
            return bad(format!("hidden must be even and >= 2, got {}", self.hidden));
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel must be odd, got {}", self.kernel));
        }
        Ok(())
    }

    /// Width of one landmark frame vector, `3 L`.
    pub fn state_dim(&self) -> usize {
        3 * self.landmarks
    }
}

#[derive(Debug, Clone, Copy)]
struct TemporalBlock {
    tu: Option<(LayerNorm, TemporalConv)>,
    mu: Option<(LayerNorm, Linear)>,
}

/// Parameters and layer layout of the audio-to-landmark denoiser.
#[derive(Debug, Clone)]
pub struct A2lModel {
    config: A2lConfig,
    store: ParamStore,
    f_audio: Linear,
    f_mean: Linear,
    f_state: Linear,
    f_time: Linear,
    f_agg: Linear,
    blocks: Vec<TemporalBlock>,
    proj_out: Linear,
}

/// Batched inputs to one forward pass.
struct Inputs<'a> {
    x_t: &'a [f64],
    ts: &'a [usize],
    conds: &'a [A2lCondition],
}

impl A2lModel {
    pub fn new(config: A2lConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, s) = (config.hidden, config.state_dim());
        let f_audio = Linear::new(&mut store, "f_audio", config.audio_dim, d, &mut rng);
        let f_mean = Linear::new(&mut store, "f_mean", s, d, &mut rng);
        let f_state = Linear::new(&mut store, "f_state", s, d, &mut rng);
        let f_time = Linear::new(&mut store, "f_time", d, d, &mut rng);
        let f_agg = Linear::new(&mut store, "f_agg", 2 * d, d, &mut rng);
        let blocks = (0..config.blocks)
            .map(|n| {
                let tu = config.temporal_unit.then(|| {
                    (
                        LayerNorm::new(&mut store, &format!("block{n}.tu.norm"), d),
                        TemporalConv::new(&mut store, &format!("block{n}.tu.conv"), d, d, config.kernel, &mut rng),
                    )
                });
                let mu = config.mapping_unit.then(|| {
                    (
                        LayerNorm::new(&mut store, &format!("block{n}.mu.norm"), d),
                        Linear::new(&mut store, &format!("block{n}.mu.fc"), d, d, &mut rng),
                    )
                });
                TemporalBlock { tu, mu }
            })
            .collect();
        let proj_out = Linear::new(&mut store, "proj_out", d, s, &mut rng);
        Ok(Self {
            config,
            store,
            f_audio,
            f_mean,
            f_state,
            f_time,
            f_agg,
            blocks,
            proj_out,
        })
    }

    pub fn config(&self) -> &A2lConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_cond(&self, cond: &A2lCondition) -> Result<()> {
        let c = &self.config;
        if cond.audio.len() != c.window {
            return Err(Error::shape("audio window length", c.window, cond.audio.len()));
        }
        if cond.audio.dim() != c.audio_dim {
            return Err(Error::shape("audio feature dim", c.audio_dim, cond.audio.dim()));
        }
        if cond.mean_landmarks.len() != c.landmarks {
            return Err(Error::shape("mean landmarks", c.landmarks, cond.mean_landmarks.len()));
        }
        Ok(())
    }

    fn check_inputs(&self, inp: &Inputs) -> Result<()> {
        let b = inp.conds.len();
        if b == 0 {
            return Err(Error::EmptyInput("a2l batch"));
        }
        if inp.ts.len() != b {
            return Err(Error::shape("timesteps", b, inp.ts.len()));
        }
        let per = self.config.window * self.config.state_dim();
        if inp.x_t.len() != b * per {
            return Err(Error::shape("a2l state", b * per, inp.x_t.len()));
        }
        inp.conds.iter().try_for_each(|c| self.check_cond(c))
    }

    fn fuse(&self, g: &mut Graph, inp: &Inputs) -> NodeId {
        let c = &self.config;
        let (b, l, d, s) = (inp.conds.len(), c.window, c.hidden, c.state_dim());
        let audio: Vec<f64> = inp.conds.iter().flat_map(|c| c.audio.features().iter().copied()).collect();
        let mean: Vec<f64> = inp.conds.iter().flat_map(|c| c.mean_landmarks.to_flat()).collect();
        let audio = g.input(audio, &[b, l, c.audio_dim]);
        let mean = g.input(mean, &[b, s]);
        let x = g.input(inp.x_t.to_vec(), &[b, l, s]);
        let temb = g.input(sinusoidal_embedding(inp.ts, d), &[b, d]);

        let fa = self.f_audio.forward(g, audio);
        let fm = self.f_mean.forward(g, mean);
        let fp = self.f_state.forward(g, x);
        let ft = self.f_time.forward(g, temb);
        let zeros = g.input(vec![0.0; b * l * d], &[b, l, d]);
        let ft_rows = g.broadcast_rows(zeros, ft);
        let cat = g.concat(&[fp, ft_rows]);
        let agg = self.f_agg.forward(g, cat);
        let sum = g.add(fa, agg);
        g.broadcast_rows(sum, fm)
    }

    fn block(&self, g: &mut Graph, n: usize, x: NodeId) -> NodeId {
        let blk = &self.blocks[n];
        let mut h = x;
        if let Some((norm, conv)) = &blk.tu {
            let y = norm.forward(g, h);
            let y = conv.forward(g, y);
            h = g.relu(y);
        }
        if let Some((norm, fc)) = &blk.mu {
            let y = norm.forward(g, h);
            let y = fc.forward(g, y);
            h = g.relu(y);
        }
        if self.config.residual && h != x {
            g.add(x, h)
        } else {
            h
        }
    }

    fn forward(&self, g: &mut Graph, inp: &Inputs) -> NodeId {
        let mut h = self.fuse(g, inp);
        for n in 0..self.blocks.len() {
            h = self.block(g, n, h);
        }
        self.proj_out.forward(g, h)
    }

    /// Fused features `l × D_h` for one window.
    pub fn fuse_conditions(&self, x_t: &[f64], t: usize, cond: &A2lCondition) -> Result<Vec<f64>> {
        let inp = Inputs { x_t, ts: &[t], conds: std::slice::from_ref(cond) };
        self.check_inputs(&inp)?;
        let mut g = Graph::new(&self.store);
        let out = self.fuse(&mut g, &inp);
        Ok(g.into_value(out))
    }

    /// Applies temporal block `n` to an `l' × D_h` feature map (any `l' ≥ 1`).
    pub fn temporal_block(&self, n: usize, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.config.hidden;
        if n >= self.blocks.len() {
            return Err(Error::shape("temporal block index", self.blocks.len(), n));
        }
        if x.is_empty() || x.len() % d != 0 {
            return Err(Error::shape("temporal block input width", d, x.len()));
        }
        let mut g = Graph::new(&self.store);
        let xi = g.input(x.to_vec(), &[1, x.len() / d, d]);
        let out = self.block(&mut g, n, xi);
        Ok(g.into_value(out))
    }

    /// Noise prediction for a batch laid out as `[B, l, 3L]` with per-item timesteps.
    pub fn predict_noise_batch(&self, x_t: &[f64], ts: &[usize], conds: &[A2lCondition]) -> Result<Vec<f64>> {
        let inp = Inputs { x_t, ts, conds };
        self.check_inputs(&inp)?;
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, &inp);
        Ok(g.into_value(out))
    }

    /// Noise prediction `l × 3L` for a single window.
    pub fn predict_noise(&self, x_t: &[f64], t: usize, cond: &A2lCondition) -> Result<Vec<f64>> {
        self.predict_noise_batch(x_t, &[t], std::slice::from_ref(cond))
    }

    /// Loss against an explicit target and its parameter gradients.
    pub fn loss_and_grads(
        &self,
        x_t: &[f64],
        ts: &[usize],
        conds: &[A2lCondition],
        target: &[f64],
        norm: LossNorm,
    ) -> Result<(f64, Grads)> {
        let inp = Inputs { x_t, ts, conds };
        self.check_inputs(&inp)?;
        if target.len() != x_t.len() {
            return Err(Error::shape("a2l target", x_t.len(), target.len()));
        }
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, &inp);
        let loss = g.loss(out, target.to_vec(), norm);
        let value = g.value(loss)[0];
        Ok((value, g.backward(loss)))
    }

    /// Loss value only, for finite-difference probes.
    pub fn loss_value(
        store: &ParamStore,
        model: &A2lModel,
        x_t: &[f64],
        ts: &[usize],
        conds: &[A2lCondition],
        target: &[f64],
        norm: LossNorm,
    ) -> f64 {
        let mut g = Graph::new(store);
        let out = model.forward(&mut g, &Inputs { x_t, ts, conds });
        let loss = g.loss(out, target.to_vec(), norm);
        g.value(loss)[0]
    }

    /// One stochastic training step's loss and gradients for clean windows
    /// `x0` (`[B, l, 3L]`), according to the configured objective.
    pub fn training_step<R: Rng + ?Sized>(
        &self,
        x0: &[f64],
        conds: &[A2lCondition],
        sched: &NoiseSchedule,
        norm: LossNorm,
        rng: &mut R,
    ) -> Result<(f64, Grads)> {
        let b = conds.len();
        match self.config.objective {
            A2lObjective::Regression => {
                let zeros = vec![0.0; x0.len()];
                self.loss_and_grads(&zeros, &vec![0; b], conds, x0, norm)
            }
            A2lObjective::Diffusion => {
                if b == 0 || x0.len() % b != 0 {
                    return Err(Error::shape("a2l batch", b, x0.len()));
                }
                let per = x0.len() / b;
                let mut x_t = Vec::with_capacity(x0.len());
                let mut eps = Vec::with_capacity(x0.len());
                let mut ts = Vec::with_capacity(b);
                for item in x0.chunks(per) {
                    let s = ddpm::draw_training_sample(item, sched, rng);
                    x_t.extend(s.x_t);
                    eps.extend(s.eps);
                    ts.push(s.t);
                }
                self.loss_and_grads(&x_t, &ts, conds, &eps, norm)
            }
        }
    }

    fn to_sequence(&self, flat: &[f64], fps: f64) -> Result<LandmarkSequence> {
        LandmarkSequence::from_flat(flat, self.config.landmarks, fps)
    }

    /// Reverse-chain sampling of one normalized canonical window.
    pub fn generate_landmarks<R: Rng>(
        &self,
        cond: &A2lCondition,
        sched: &NoiseSchedule,
        rng: &mut R,
        stride: usize,
    ) -> Result<LandmarkSequence> {
        self.check_cond(cond)?;
        let shape = [1, self.config.window, self.config.state_dim()];
        let flat = ddpm::sample(self, &shape, std::slice::from_ref(cond), sched, rng, stride)?;
        self.to_sequence(&flat, cond.audio.fps())
    }

    /// Samples several windows in one batch, each from its own noise stream.
    pub fn generate_batch<R: Rng>(
        &self,
        conds: &[A2lCondition],
        sched: &NoiseSchedule,
        streams: &mut [R],
        stride: usize,
    ) -> Result<Vec<LandmarkSequence>> {
        conds.iter().try_for_each(|c| self.check_cond(c))?;
        let per = self.config.window * self.config.state_dim();
        let shape = [conds.len(), self.config.window, self.config.state_dim()];
        let flat = ddpm::sample_per_item(self, &shape, conds, sched, streams, stride)?;
        flat.chunks(per)
            .zip(conds)
            .map(|(w, c)| self.to_sequence(w, c.audio.fps()))
            .collect()
    }

    /// Direct prediction of a window (regression objective).
    pub fn regress_landmarks(&self, cond: &A2lCondition) -> Result<LandmarkSequence> {
        let zeros = vec![0.0; self.config.window * self.config.state_dim()];
        let flat = self.predict_noise(&zeros, 0, cond)?;
        self.to_sequence(&flat, cond.audio.fps())
    }
}

impl Denoiser for A2lModel {
    type Cond = [A2lCondition];

    fn predict_noise(&self, x_t: &[f64], shape: &[usize], t: usize, cond: &[A2lCondition]) -> Result<Vec<f64>> {
        let b = shape.first().copied().unwrap_or(0);
        if b != cond.len() {
            return Err(Error::shape("a2l batch conditions", b, cond.len()));
        }
        self.predict_noise_batch(x_t, &vec![t; b], cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ddpm::make_linear_schedule;

    fn tiny() -> A2lConfig {
        A2lConfig {
            landmarks: 5,
            audio_dim: 3,
            hidden: 8,
            blocks: 2,
            window: 4,
            ..A2lConfig::default()
        }
    }

    fn cond_for(c: &A2lConfig, rng: &mut ChaCha8Rng) -> A2lCondition {
        let audio = (0..c.window * c.audio_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mean = (0..c.state_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>();
        A2lCondition {
            audio: AudioFeatureSequence::new(audio, c.audio_dim, 25.0).unwrap(),
            mean_landmarks: LandmarkFrame::from_flat(&mean).unwrap(),
        }
    }

    fn set(store: &mut ParamStore, name: &str, data: &[f64]) {
        let id = store.find(name).unwrap_or_else(|| panic!("no param {name}"));
        store.get_mut(id).data.copy_from_slice(data);
    }

    #[test]
    fn zero_weights_give_zero_fusion() {
        let c = tiny();
        let mut m = A2lModel::new(c.clone(), 0).unwrap();
        m.params_mut().fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cond = cond_for(&c, &mut rng);
        let x = vec![0.3; c.window * c.state_dim()];
        let out = m.fuse_conditions(&x, 7, &cond).unwrap();
        assert_eq!(out.len(), c.window * c.hidden);
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fusion_is_audio_projection_when_rest_zero() {
        let c = A2lConfig { audio_dim: 8, ..tiny() };
        let mut m = A2lModel::new(c.clone(), 0).unwrap();
        m.params_mut().fill(0.0);
        let eye: Vec<f64> = (0..64).map(|i| if i / 8 == i % 8 { 1.0 } else { 0.0 }).collect();
        set(m.params_mut(), "f_audio.weight", &eye);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cond = cond_for(&c, &mut rng);
        let x = vec![1.0; c.window * c.state_dim()];
        let out = m.fuse_conditions(&x, 3, &cond).unwrap();
        assert_eq!(out, cond.audio.features());
    }

    #[test]
    fn one_frame_two_dim_hand_computed() {
        // L = 4 so the state is 12-wide; D_a = 1, D_h = 2, l = 1.
        let c = A2lConfig {
            landmarks: 4,
            audio_dim: 1,
            hidden: 2,
            blocks: 0,
            window: 1,
            ..A2lConfig::default()
        };
        let mut m = A2lModel::new(c, 0).unwrap();
        let s = m.params_mut();
        s.fill(0.0);
        set(s, "f_audio.weight", &[1.0, 2.0]);
        set(s, "f_audio.bias", &[0.5, 0.0]);
        let mut wm = vec![0.0; 24];
        wm[0] = 1.0; // P̄[0].x -> feature 0
        wm[2 * 11 + 1] = -1.0; // P̄[3].z -> feature 1
        set(s, "f_mean.weight", &wm);
        let mut wp = vec![0.0; 24];
        wp[2] = 3.0; // x_t[0].y -> feature 0
        set(s, "f_state.weight", &wp);
        set(s, "f_time.weight", &[1.0, 0.0, 0.0, 1.0]);
        set(s, "f_agg.weight", &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 2.0]);
        set(s, "f_agg.bias", &[0.0, 0.25]);

        let mut mean = vec![0.0; 12];
        mean[0] = 2.0;
        mean[11] = 4.0;
        let cond = A2lCondition {
            audio: AudioFeatureSequence::new(vec![0.5], 1, 25.0).unwrap(),
            mean_landmarks: LandmarkFrame::from_flat(&mean).unwrap(),
        };
        let mut x = vec![0.0; 12];
        x[1] = 1.5;
        // t = 1: sinusoidal embedding of width 2 is (sin 1, cos 1).
        let out = m.fuse_conditions(&x, 1, &cond).unwrap();
        // f_A = (0.5 + 0.5, 1.0); f_P̄ = (2, -4); f_P = (4.5, 0); f_t = (sin 1, cos 1)
        // f_agg = (4.5 + sin 1, 0.25 + 2 cos 1)
        let expect = [1.0 + 2.0 + 4.5 + 1f64.sin(), 1.0 - 4.0 + 0.25 + 2.0 * 1f64.cos()];
        assert!((out[0] - expect[0]).abs() < 1e-12 && (out[1] - expect[1]).abs() < 1e-12, "{out:?}");
    }

    #[test]
    fn temporal_block_zero_in_zero_out() {
        let c = A2lConfig { residual: false, ..tiny() };
        let mut m = A2lModel::new(c.clone(), 3).unwrap();
        for (id, p) in m.params().iter().map(|(i, p)| (i, p.name.clone())).collect::<Vec<_>>() {
            if p.ends_with("bias") || p.ends_with("beta") {
                m.params_mut().get_mut(id).data.fill(0.0);
            }
        }
        let out = m.temporal_block(0, &vec![0.0; 6 * c.hidden]).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn temporal_block_is_shift_equivariant_in_interior() {
        let c = tiny();
        let m = A2lModel::new(c.clone(), 4).unwrap();
        let d = c.hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..10 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let shifted: Vec<f64> = (0..10 * d).map(|i| if i < d { 0.0 } else { x[i - d] }).collect();
        let a = m.temporal_block(0, &x).unwrap();
        let b = m.temporal_block(0, &shifted).unwrap();
        // frames 1..8 of x sit at 2..9 of the shifted input, away from both pads
        for f in 1..8 {
            for k in 0..d {
                assert!((a[f * d + k] - b[(f + 1) * d + k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_frame_block_sees_center_tap_only() {
        let c = tiny();
        let mut m = A2lModel::new(c.clone(), 6).unwrap();
        let d = c.hidden;
        let x: Vec<f64> = (0..d).map(|i| i as f64 * 0.3 - 1.0).collect();
        let before = m.temporal_block(1, &x).unwrap();
        let id = m.params().find("block1.tu.conv.weight").unwrap();
        // zero the two outer taps; with one frame they only ever see padding
        for (i, v) in m.params_mut().get_mut(id).data.iter_mut().enumerate() {
            if i / d / d != 1 {
                *v = 0.0;
            }
        }
        assert_eq!(m.temporal_block(1, &x).unwrap(), before);
    }

    #[test]
    fn output_shape_contract() {
        let c = A2lConfig { hidden: 16, blocks: 1, ..A2lConfig::default() };
        let m = A2lModel::new(c.clone(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cond = cond_for(&c, &mut rng);
        let out = m.predict_noise(&vec![0.1; 20 * 204], 10, &cond).unwrap();
        assert_eq!(out.len(), 20 * 204);
        assert!(m.predict_noise(&vec![0.1; 19 * 204], 10, &cond).is_err());
    }

    #[test]
    fn no_blocks_projects_fused_features() {
        let c = A2lConfig { blocks: 0, ..tiny() };
        let m = A2lModel::new(c.clone(), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cond = cond_for(&c, &mut rng);
        let x: Vec<f64> = (0..c.window * c.state_dim()).map(|i| (i as f64).sin()).collect();
        let fused = m.fuse_conditions(&x, 4, &cond).unwrap();
        let mut g = Graph::new(m.params());
        let f = g.input(fused, &[c.window, c.hidden]);
        let y = m.proj_out.forward(&mut g, f);
        assert_eq!(g.value(y), m.predict_noise(&x, 4, &cond).unwrap().as_slice());
    }

    #[test]
    fn param_count_linear_in_blocks() {
        let n = |b| A2lModel::new(A2lConfig { blocks: b, ..tiny() }, 0).unwrap().params().num_elements();
        let step = n(1) - n(0);
        assert!(step > 0);
        assert_eq!(n(5), n(0) + 5 * step);
        let tu_only = A2lModel::new(A2lConfig { mapping_unit: false, ..tiny() }, 0).unwrap();
        let mu_only = A2lModel::new(A2lConfig { temporal_unit: false, ..tiny() }, 0).unwrap();
        assert!(tu_only.params().find("block0.mu.fc.weight").is_none());
        assert!(mu_only.params().find("block0.tu.conv.weight").is_none());
    }

    #[test]
    fn gradients_match_central_differences() {
        let c = tiny();
        let mut m = A2lModel::new(c.clone(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let conds = vec![cond_for(&c, &mut rng), cond_for(&c, &mut rng)];
        let n = 2 * c.window * c.state_dim();
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let target: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ts = [3, 40];
        let (_, grads) = m.loss_and_grads(&x, &ts, &conds, &target, LossNorm::SquaredL2).unwrap();
        let ids: Vec<_> = m.params().iter().map(|(id, p)| (id, p.data.len())).collect();
        let model = m.clone();
        for k in 0..40 {
            let (id, len) = ids[rng.gen_range(0..ids.len())];
            let i = rng.gen_range(0..len);
            let num = m.params_mut().central_difference(id, i, 1e-5, |s| {
                A2lModel::loss_value(s, &model, &x, &ts, &conds, &target, LossNorm::SquaredL2)
            });
            let ana = grads.get(id).map(|g| g[i]).unwrap_or(0.0);
            let scale = num.abs().max(ana.abs());
            assert!((num - ana).abs() <= 1e-4 * scale + 1e-9, "sample {k}: {ana} vs {num}");
        }
    }

    #[test]
    fn sampling_is_deterministic_and_shaped() {
        let c = tiny();
        let m = A2lModel::new(c.clone(), 1).unwrap();
        let sched = make_linear_schedule(10, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cond = cond_for(&c, &mut rng);
        let a = m.generate_landmarks(&cond, &sched, &mut ChaCha8Rng::seed_from_u64(5), 1).unwrap();
        let b = m.generate_landmarks(&cond, &sched, &mut ChaCha8Rng::seed_from_u64(5), 1).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.len(), a.landmark_count()), (c.window, c.landmarks));
        let r1 = m.regress_landmarks(&cond).unwrap();
        assert_eq!(r1, m.regress_landmarks(&cond).unwrap());
    }

    #[test]
    fn batch_generation_matches_single_streams() {
        let c = tiny();
        let m = A2lModel::new(c.clone(), 1).unwrap();
        let sched = make_linear_schedule(8, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conds = vec![cond_for(&c, &mut rng), cond_for(&c, &mut rng)];
        let mut streams = vec![ChaCha8Rng::seed_from_u64(10), ChaCha8Rng::seed_from_u64(11)];
        let batch = m.generate_batch(&conds, &sched, &mut streams, 1).unwrap();
        let single = m.generate_landmarks(&conds[1], &sched, &mut ChaCha8Rng::seed_from_u64(11), 1).unwrap();
        let (a, b) = (batch[1].to_flat(), single.to_flat());
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}
