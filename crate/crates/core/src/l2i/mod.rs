//! Landmark-to-image diffusion: landmark drawings, the masked-target /
//! reference condition set, a fixed latent codec and the conditional U-Net.

mod codec;
mod unet;

pub use codec::{Codec, CodecKind, LatentImage};
pub use unet::{positional_encoding_2d, UNetConfig};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ddpm::{self, Denoiser, LossNorm, NoiseSchedule};
use crate::error::{Error, Result};
use crate::geometry::LandmarkFrame;
use crate::imaging::FaceImage;
use crate::nn::{Grads, Graph, ParamStore};
use crate::raster::{fill_disc, Mask};
use crate::synthdata::ClipDataset;
use unet::UNet;

/// Which conditions are blanked (set to zero latents) before the network sees them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionAblation {
    #[default]
    Full,
    /// Without the reference image and its landmark drawing.
    NoReference,
    /// Without the reference landmark drawing and the masked target.
    NoReferenceLandmarksMasked,
    /// Without the reference landmark drawing.
    NoReferenceLandmarks,
    /// Every condition blanked.
    Unconditional,
}

impl ConditionAblation {
    pub const ALL: [ConditionAblation; 5] = [
        ConditionAblation::Full,
        ConditionAblation::NoReference,
        ConditionAblation::NoReferenceLandmarksMasked,
        ConditionAblation::NoReferenceLandmarks,
        ConditionAblation::Unconditional,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ConditionAblation::Full => "full",
            ConditionAblation::NoReference => "no_reference",
            ConditionAblation::NoReferenceLandmarksMasked => "no_reference_landmarks_masked",
            ConditionAblation::NoReferenceLandmarks => "no_reference_landmarks",
            ConditionAblation::Unconditional => "unconditional",
        }
    }

    /// Keep-flags for `[masked target, target landmarks, reference, reference landmarks]`.
    pub fn keep(self) -> [bool; 4] {
        match self {
            ConditionAblation::Full => [true; 4],
            ConditionAblation::NoReference => [true, true, false, false],
            ConditionAblation::NoReferenceLandmarksMasked => [false, true, true, false],
            ConditionAblation::NoReferenceLandmarks => [true, true, true, false],
            ConditionAblation::Unconditional => [false; 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct L2iConfig {
    pub image_size: usize,
    pub codec: CodecKind,
    pub factor: usize,
    pub unet: UNetConfig,
    /// Frame gap between target and reference during training.
    pub tau: usize,
    pub mask_margin: usize,
    /// Landmark disc radius in pixels; defaults to `image_size / 64`.
    pub disc_radius: Option<f64>,
    pub ablation: ConditionAblation,
}

impl Default for L2iConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            codec: CodecKind::Patch,
            factor: 4,
            unet: UNetConfig::default(),
            tau: 20,
            mask_margin: 2,
            disc_radius: None,
            ablation: ConditionAblation::Full,
        }
    }
}

impl L2iConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        if self.factor == 0 || self.image_size % self.factor != 0 {
            return Err(Error::InvalidConfig(format!(
                "l2i: image_size {} not divisible by factor {}",
                self.image_size, self.factor
            )));
        }
        let side = self.image_size / self.factor;
        if side < 2 || side % 2 != 0 {
            return Err(Error::InvalidConfig(format!("l2i: latent side {side} must be even and >= 2")));
        }
        if let Some(r) = self.disc_radius {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::InvalidConfig(format!("l2i: disc_radius must be positive, got {r}")));
            }
        }
        Ok(())
    }

    pub fn radius(&self) -> f64 {
        self.disc_radius.unwrap_or(self.image_size as f64 / 64.0)
    }

    pub fn latent_channels(&self) -> usize {
        3 * self.factor * self.factor
    }

    pub fn latent_side(&self) -> usize {
        self.image_size / self.factor
    }
}

/// Orthographic camera: pixel `(x, y) = scale * (X, Y) + offset`; depth is dropped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrthoCamera {
    pub scale: f64,
    pub offset: [f64; 2],
}

impl Default for OrthoCamera {
    fn default() -> Self {
        Self { scale: 1.0, offset: [0.0, 0.0] }
    }
}

impl OrthoCamera {
    pub fn project(&self, p: [f64; 3]) -> [f64; 2] {
        [self.scale * p[0] + self.offset[0], self.scale * p[1] + self.offset[1]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rasterized {
    pub image: FaceImage,
    /// Points whose center fell outside the canvas.
    pub clipped: usize,
}

/// Draws landmarks as discs on black: mouth points in channel 1, the rest in channel 0.
pub fn rasterize_landmarks(
    frame: &LandmarkFrame,
    camera: &OrthoCamera,
    size: usize,
    radius: f64,
    mouth_idx: &[usize],
) -> Rasterized {
    let mut image = FaceImage::new(size);
    let mut clipped = 0;
    let mut is_mouth = vec![false; frame.len()];
    for &i in mouth_idx {
        if i < is_mouth.len() {
            is_mouth[i] = true;
        }
    }
    let lim = size as f64 - 0.5;
    for (i, p) in frame.points().iter().enumerate() {
        let [x, y] = camera.project(*p);
        if !(x >= -0.5 && x < lim && y >= -0.5 && y < lim) {
            clipped += 1;
        }
        let ch = if is_mouth[i] { 1 } else { 0 };
        fill_disc(size, x, y, radius, |r, c| {
            let mut px = image.get(r, c);
            px[ch] = 1.0;
            image.set(r, c, px);
        });
    }
    Rasterized { image, clipped }
}

/// Rectangle over the lower half of the landmark bounding box, grown by
/// `margin` pixels. A degenerate box falls back to the lower half of the image.
pub fn mouth_region_mask(frame: &LandmarkFrame, size: usize, margin: usize) -> Mask {
    let (x0, y0, x1, y1) = frame.bbox_xy();
    let m = margin as f64;
    if !(x1 - x0 > 1e-9 && y1 - y0 > 1e-9) || ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) {
        return Mask::from_fn(size, |r, _| r >= size / 2);
    }
    let ymid = (y0 + y1) / 2.0;
    Mask::from_fn(size, |r, c| {
        let (x, y) = (c as f64, r as f64);
        x >= x0 - m && x <= x1 + m && y >= ymid - m && y <= y1 + m
    })
}

/// Blacks out the mouth region of `img`; returns the masked image and the mask.
pub fn mask_mouth_region(img: &FaceImage, frame: &LandmarkFrame, margin: usize) -> (FaceImage, Mask) {
    let mask = mouth_region_mask(frame, img.size(), margin);
    (img.masked_out(&mask), mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    Train,
    Infer,
}

/// Reference frame index: `max(i - tau, 0)` when training, `0` at inference.
pub fn reference_index(len: usize, i: usize, tau: usize, mode: ReferenceMode) -> Result<usize> {
    if len == 0 {
        return Err(Error::EmptyInput("clip"));
    }
    if i >= len {
        return Err(Error::shape("frame index", format!("< {len}"), i));
    }
    Ok(match mode {
        ReferenceMode::Train => i.saturating_sub(tau),
        ReferenceMode::Infer => 0,
    })
}

/// Reference image and its ground-truth landmarks for target frame `i`.
pub fn select_reference(
    clip: &ClipDataset,
    i: usize,
    tau: usize,
    mode: ReferenceMode,
) -> Result<(usize, &FaceImage, &LandmarkFrame)> {
    let r = reference_index(clip.len(), i, tau, mode)?;
    Ok((r, &clip.images[r], &clip.landmarks.frames()[r]))
}

/// Latent condition set `{masked target, target landmarks, reference, reference landmarks}`.
#[derive(Debug, Clone, PartialEq)]
pub struct L2iConditionSet {
    pub masked_target: LatentImage,
    pub target_landmarks: LatentImage,
    pub reference: LatentImage,
    pub reference_landmarks: LatentImage,
}

impl L2iConditionSet {
    fn parts(&self) -> [&LatentImage; 4] {
        [&self.masked_target, &self.target_landmarks, &self.reference, &self.reference_landmarks]
    }

    pub fn shape(&self) -> Result<[usize; 3]> {
        let s = self.masked_target.shape();
        if self.parts().iter().any(|p| p.shape() != s) {
            return Err(Error::shape("condition latents", format!("{s:?}"), "mixed shapes"));
        }
        Ok(s)
    }
}

/// Everything needed to generate one frame, plus the pixels kept from the source.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRequest {
    pub cond: L2iConditionSet,
    /// Image whose unmasked pixels are kept verbatim.
    pub source: FaceImage,
    pub mask: Mask,
}

#[derive(Debug, Clone)]
pub struct L2iModel {
    config: L2iConfig,
    codec: Codec,
    store: ParamStore,
    unet: UNet,
}

impl L2iModel {
    pub fn new(config: L2iConfig, codec: Codec, seed: u64) -> Result<Self> {
        config.validate()?;
        if codec.factor() != config.factor {
            return Err(Error::InvalidConfig(format!(
                "l2i: codec factor {} != configured factor {}",
                codec.factor(),
                config.factor
            )));
        }
        let c = config.latent_channels();
        let mut store = ParamStore::new();
        let unet = UNet::new(&mut store, config.unet.clone(), 5 * c, c, seed)?;
        Ok(Self { config, codec, store, unet })
    }

    pub fn config(&self) -> &L2iConfig {
        &self.config
    }

    pub fn codec(&self) -> &Codec {
        &self.codec
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Changes which conditions are blanked without touching the weights.
    pub fn set_ablation(&mut self, ablation: ConditionAblation) {
        self.config.ablation = ablation;
    }

    /// Builds the condition set for a target frame. `target_frame` supplies
    /// both the landmark drawing and the mask.
    pub fn build_conditions(
        &self,
        target_image: &FaceImage,
        target_frame: &LandmarkFrame,
        reference_image: &FaceImage,
        reference_frame: &LandmarkFrame,
        mouth_idx: &[usize],
    ) -> Result<(L2iConditionSet, Mask)> {
        let size = self.config.image_size;
        if target_image.size() != size || reference_image.size() != size {
            return Err(Error::shape("image size", size, target_image.size().max(reference_image.size())));
        }
        let cam = OrthoCamera::default();
        let r = self.config.radius();
        let (masked, mask) = mask_mouth_region(target_image, target_frame, self.config.mask_margin);
        let tl = rasterize_landmarks(target_frame, &cam, size, r, mouth_idx).image;
        let rl = rasterize_landmarks(reference_frame, &cam, size, r, mouth_idx).image;
        let cond = L2iConditionSet {
            masked_target: self.codec.encode(&masked)?,
            target_landmarks: self.codec.encode(&tl)?,
            reference: self.codec.encode(reference_image)?,
            reference_landmarks: self.codec.encode(&rl)?,
        };
        Ok((cond, mask))
    }

    fn latent_shape(&self) -> [usize; 3] {
        let s = self.config.latent_side();
        [s, s, self.config.latent_channels()]
    }

    /// Channel-concatenates `[z_t, conditions...]` per pixel, blanking ablated parts.
    fn assemble(&self, z_t: &[f64], conds: &[L2iConditionSet]) -> Result<Vec<f64>> {
        let [h, w, c] = self.latent_shape();
        let per = h * w * c;
        if conds.is_empty() {
            return Err(Error::EmptyInput("l2i batch"));
        }
        if z_t.len() != conds.len() * per {
            return Err(Error::shape("l2i state", conds.len() * per, z_t.len()));
        }
        let keep = self.config.ablation.keep();
        let mut out = Vec::with_capacity(z_t.len() * 5);
        for (b, cond) in conds.iter().enumerate() {
            if cond.shape()? != [h, w, c] {
                return Err(Error::shape("condition latent", format!("{:?}", [h, w, c]), format!("{:?}", cond.shape()?)));
            }
            let parts = cond.parts();
            for px in 0..h * w {
                out.extend_from_slice(&z_t[b * per + px * c..b * per + (px + 1) * c]);
                for (k, part) in parts.iter().enumerate() {
                    if keep[k] {
                        out.extend_from_slice(&part.data()[px * c..(px + 1) * c]);
                    } else {
                        out.extend(std::iter::repeat(0.0).take(c));
                    }
                }
            }
        }
        Ok(out)
    }

    fn run(&self, g: &mut Graph, z_t: &[f64], ts: &[usize], conds: &[L2iConditionSet]) -> Result<crate::nn::NodeId> {
        if ts.len() != conds.len() {
            return Err(Error::shape("timesteps", conds.len(), ts.len()));
        }
        let [h, w, c] = self.latent_shape();
        let x = self.assemble(z_t, conds)?;
        let x = g.input(x, &[conds.len(), h, w, 5 * c]);
        Ok(self.unet.forward(g, x, ts))
    }

    pub fn predict_noise_batch(&self, z_t: &[f64], ts: &[usize], conds: &[L2iConditionSet]) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let out = self.run(&mut g, z_t, ts, conds)?;
        Ok(g.into_value(out))
    }

    pub fn predict_noise(&self, z_t: &LatentImage, t: usize, cond: &L2iConditionSet) -> Result<LatentImage> {
        let [h, w, c] = self.latent_shape();
        let out = self.predict_noise_batch(z_t.data(), &[t], std::slice::from_ref(cond))?;
        LatentImage::new(h, w, c, out)
    }

    /// Bottleneck self-attention applied to `[h, w, 2 * base]` features.
    pub fn attend(&self, x: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
        let c = 2 * self.config.unet.base_channels;
        if x.len() != h * w * c {
            return Err(Error::shape("attention input", h * w * c, x.len()));
        }
        let mut g = Graph::new(&self.store);
        let xi = g.input(x.to_vec(), &[1, h, w, c]);
        let y = self.unet.attend(&mut g, xi);
        Ok(g.into_value(y))
    }

    pub fn loss_and_grads(
        &self,
        z_t: &[f64],
        ts: &[usize],
        conds: &[L2iConditionSet],
        target: &[f64],
        norm: LossNorm,
    ) -> Result<(f64, Grads)> {
        if target.len() != z_t.len() {
            return Err(Error::shape("l2i target", z_t.len(), target.len()));
        }
        let mut g = Graph::new(&self.store);
        let out = self.run(&mut g, z_t, ts, conds)?;
        let loss = g.loss(out, target.to_vec(), norm);
        let value = g.value(loss)[0];
        Ok((value, g.backward(loss)))
    }

    /// Loss value with parameters taken from `store`, for finite-difference probes.
    pub fn loss_value(
        store: &ParamStore,
        model: &L2iModel,
        z_t: &[f64],
        ts: &[usize],
        conds: &[L2iConditionSet],
        target: &[f64],
        norm: LossNorm,
    ) -> Result<f64> {
        let mut g = Graph::new(store);
        let out = model.run(&mut g, z_t, ts, conds)?;
        let loss = g.loss(out, target.to_vec(), norm);
        Ok(g.value(loss)[0])
    }

    /// Noise-prediction loss and gradients for clean latents `x0` (`[B, h, w, C]`).
    pub fn training_step<R: Rng + ?Sized>(
        &self,
        x0: &[f64],
        conds: &[L2iConditionSet],
        sched: &NoiseSchedule,
        norm: LossNorm,
        rng: &mut R,
    ) -> Result<(f64, Grads)> {
        let b = conds.len();
        if b == 0 || x0.len() % b != 0 {
            return Err(Error::shape("l2i batch", b, x0.len()));
        }
        let per = x0.len() / b;
        let (mut z_t, mut eps, mut ts) = (Vec::with_capacity(x0.len()), Vec::with_capacity(x0.len()), Vec::with_capacity(b));
        for item in x0.chunks(per) {
            let s = ddpm::draw_training_sample(item, sched, rng);
            z_t.extend(s.x_t);
            eps.extend(s.eps);
            ts.push(s.t);
        }
        self.loss_and_grads(&z_t, &ts, conds, &eps, norm)
    }

    /// Samples one latent per condition set, each from its own noise stream.
    pub fn generate_latents<R: Rng>(
        &self,
        conds: &[L2iConditionSet],
        sched: &NoiseSchedule,
        streams: &mut [R],
        stride: usize,
    ) -> Result<Vec<LatentImage>> {
        let [h, w, c] = self.latent_shape();
        let flat = ddpm::sample_per_item(self, &[conds.len(), h, w, c], conds, sched, streams, stride)?;
        flat.chunks(h * w * c).map(|d| LatentImage::new(h, w, c, d.to_vec())).collect()
    }

    /// Decodes sampled latents and pastes the masked region into each source image.
    pub fn generate_frames<R: Rng>(
        &self,
        requests: &[FrameRequest],
        sched: &NoiseSchedule,
        streams: &mut [R],
        stride: usize,
    ) -> Result<Vec<FaceImage>> {
        let conds: Vec<L2iConditionSet> = requests.iter().map(|r| r.cond.clone()).collect();
        let latents = self.generate_latents(&conds, sched, streams, stride)?;
        latents
            .iter()
            .zip(requests)
            .map(|(lat, req)| {
                let generated = self.codec.decode(lat)?;
                req.source.composite(&generated, &req.mask)
            })
            .collect()
    }

    pub fn generate_frame<R: Rng>(
        &self,
        request: &FrameRequest,
        sched: &NoiseSchedule,
        rng: R,
        stride: usize,
    ) -> Result<FaceImage> {
        let mut streams = [rng];
        Ok(self
            .generate_frames(std::slice::from_ref(request), sched, &mut streams, stride)?
            .remove(0))
    }
}

impl Denoiser for L2iModel {
    type Cond = [L2iConditionSet];

    fn predict_noise(&self, x_t: &[f64], shape: &[usize], t: usize, cond: &[L2iConditionSet]) -> Result<Vec<f64>> {
        let b = shape.first().copied().unwrap_or(0);
        if b != cond.len() {
            return Err(Error::shape("l2i batch conditions", b, cond.len()));
        }
        self.predict_noise_batch(x_t, &vec![t; b], cond)
    }
}
