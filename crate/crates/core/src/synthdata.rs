//! Procedural talking-head clips with known ground truth.
//!
//! A scalar articulation signal drives the mouth opening of a schematic face
//! template; audio features are a fixed linear map of the signal and its
//! derivative; a smooth head-pose trajectory places the face in the image.

use std::f64::consts::PI;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::a2l::AudioFeatureSequence;
use crate::error::{Error, Result};
use crate::geometry::{apply_pose, canonicalize_sequence, LandmarkFrame, LandmarkSequence, RigidPose};
use crate::imaging::{quantize, FaceImage};
use crate::raster::{fill_disc, fill_polygon, Mask};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATASET_FILE: &str = "dataset.json";
const CLIP_FORMAT: &str = "dreamhead-clip";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArticulationFamily {
    /// Sum of three random-phase sinusoids with incommensurate frequencies.
    #[default]
    Sinusoids,
    /// Mouth held closed.
    Silent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub landmarks: usize,
    pub audio_dim: usize,
    pub frames: usize,
    pub image_size: usize,
    pub fps: f64,
    pub seed: u64,
    pub articulation: ArticulationFamily,
    /// Peak head rotation per axis, degrees.
    pub pose_wobble_deg: f64,
    /// Peak in-plane translation, pixels.
    pub translation_wobble: f64,
    /// Peak relative scale change.
    pub scale_wobble: f64,
    /// Lower-lip travel at full articulation, template units.
    pub mouth_amplitude: f64,
    pub audio_noise: f64,
    /// Seed of the articulation-to-audio map, shared by every clip of a dataset.
    pub audio_map_seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            landmarks: 68,
            audio_dim: 16,
            frames: 100,
            image_size: 64,
            fps: 25.0,
            seed: 0,
            articulation: ArticulationFamily::Sinusoids,
            pose_wobble_deg: 6.0,
            translation_wobble: 1.5,
            scale_wobble: 0.02,
            mouth_amplitude: 0.3,
            audio_noise: 0.05,
            audio_map_seed: 0x5eed_a0d1,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("generator: {m}")));
        if self.landmarks < 8 {
            return bad(format!("landmarks must be >= 8, got {}", self.landmarks));
        }
        if self.audio_dim == 0 || self.frames == 0 {
            return bad("audio_dim and frames must be positive".into());
        }
        if self.image_size < 16 {
            return bad(format!("image_size must be >= 16, got {}", self.image_size));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        let amps = [
            self.pose_wobble_deg,
            self.translation_wobble,
            self.scale_wobble,
            self.mouth_amplitude,
            self.audio_noise,
        ];
        if amps.iter().any(|a| !(a.is_finite() && *a >= 0.0)) || self.scale_wobble >= 0.5 {
            return bad("wobble, amplitude and noise settings must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// Index ranges of the facial parts for a given landmark count. With 68
/// points this is the common 17/10/9/12/20 jaw-brow-nose-eye-mouth split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaceLayout {
    pub jaw: Range<usize>,
    pub brow_left: Range<usize>,
    pub brow_right: Range<usize>,
    pub nose: Range<usize>,
    pub eye_left: Range<usize>,
    pub eye_right: Range<usize>,
    pub mouth_outer: Range<usize>,
    pub mouth_inner: Range<usize>,
}

impl FaceLayout {
    pub fn new(landmarks: usize) -> Result<Self> {
        if landmarks < 8 {
            return Err(Error::InvalidConfig(format!("face layout needs >= 8 landmarks, got {landmarks}")));
        }
        let round = |x: f64| x.round() as usize;
        let mouth = round(landmarks as f64 * 20.0 / 68.0).max(4);
        let outer = round(mouth as f64 * 0.6).max(3);
        let rest = landmarks - mouth;
        let jaw = round(rest as f64 * 17.0 / 48.0);
        let brows = round(rest as f64 * 10.0 / 48.0);
        let nose = round(rest as f64 * 9.0 / 48.0);
        let eyes = rest.saturating_sub(jaw + brows + nose);
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let layout = FaceLayout {
            jaw: take(jaw),
            brow_left: take(brows.div_ceil(2)),
            brow_right: take(brows / 2),
            nose: take(nose),
            eye_left: take(eyes.div_ceil(2)),
            eye_right: take(eyes / 2),
            mouth_outer: take(outer),
            mouth_inner: take(mouth - outer),
        };
        debug_assert_eq!(at, landmarks);
        Ok(layout)
    }

    pub fn landmarks(&self) -> usize {
        self.mouth_inner.end
    }

    pub fn mouth_idx(&self) -> Vec<usize> {
        (self.mouth_outer.start..self.mouth_inner.end).collect()
    }

    fn lip_halves(&self) -> (Vec<usize>, Vec<usize>) {
        let (mut upper, mut lower) = (vec![], vec![]);
        for ring in [&self.mouth_outer, &self.mouth_inner] {
            let n = ring.len();
            for (k, i) in ring.clone().enumerate() {
                let s = (2.0 * PI * k as f64 / n as f64).sin();
                if s < -1e-9 {
                    upper.push(i);
                } else if s > 1e-9 {
                    lower.push(i);
                }
            }
        }
        (upper, lower)
    }
}

const MOUTH_CENTER: [f64; 2] = [0.0, 0.5];
const MOUTH_HALF_WIDTH: f64 = 0.38;
const LIP_HALF_HEIGHT: f64 = 0.12;
const FACE_CENTER: [f64; 2] = [0.0, 0.15];
const FACE_RADII: [f64; 2] = [0.98, 0.95];

fn arc(n: usize, mut f: impl FnMut(f64) -> [f64; 3]) -> Vec<[f64; 3]> {
    (0..n)
        .map(|i| f(if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 }))
        .collect()
}

fn ring(n: usize, mut f: impl FnMut(f64) -> [f64; 3]) -> Vec<[f64; 3]> {
    (0..n).map(|k| f(2.0 * PI * k as f64 / n as f64)).collect()
}

/// Canonical face with the lower lip lowered by `opening` template units.
/// Units: face half-width about 1, `y` pointing down.
pub fn template_frame(layout: &FaceLayout, opening: f64) -> LandmarkFrame {
    let mut pts = Vec::with_capacity(layout.landmarks());
    pts.extend(arc(layout.jaw.len(), |s| {
        let a = PI * s;
        [-0.95 * a.cos(), -0.15 + 1.1 * a.sin(), 0.3 * (1.0 - a.sin())]
    }));
    for (range, side) in [(&layout.brow_left, -1.0), (&layout.brow_right, 1.0)] {
        pts.extend(arc(range.len(), |s| {
            let x = side * (0.2 + 0.55 * s);
            [x, -0.55 - 0.08 * (PI * s).sin(), 0.05]
        }));
    }
    let bridge = layout.nose.len() / 2;
    pts.extend(arc(bridge, |s| [0.0, -0.35 + 0.45 * s, -0.1 - 0.2 * s]));
    pts.extend(arc(layout.nose.len() - bridge, |s| [-0.18 + 0.36 * s, 0.17, -0.2]));
    for (range, cx) in [(&layout.eye_left, -0.4), (&layout.eye_right, 0.4)] {
        pts.extend(ring(range.len(), |th| [cx + 0.16 * th.cos(), -0.3 + 0.07 * th.sin(), 0.0]));
    }
    let squeeze = 1.0 - 0.2 * opening;
    pts.extend(ring(layout.mouth_outer.len(), |th| {
        let s = th.sin();
        let drop = if s > 0.0 { opening * s } else { 0.0 };
        [
            MOUTH_HALF_WIDTH * squeeze * th.cos(),
            MOUTH_CENTER[1] + LIP_HALF_HEIGHT * s + drop,
            -0.05,
        ]
    }));
    pts.extend(ring(layout.mouth_inner.len(), |th| {
        let s = th.sin();
        let drop = if s > 0.0 { opening * s } else { 0.0 };
        [
            0.7 * MOUTH_HALF_WIDTH * squeeze * th.cos(),
            MOUTH_CENTER[1] + 0.02 * s + drop,
            -0.04,
        ]
    }));
    LandmarkFrame::new(pts).expect("template is finite with >= 8 points")
}

/// Mean vertical position of lower-lip points minus that of upper-lip points.
pub fn lip_opening(frame: &LandmarkFrame, layout: &FaceLayout) -> f64 {
    let (upper, lower) = layout.lip_halves();
    let mean_y = |idx: &[usize]| idx.iter().map(|&i| frame.points()[i][1]).sum::<f64>() / idx.len().max(1) as f64;
    mean_y(&lower) - mean_y(&upper)
}

fn to_xy(p: [f64; 3]) -> [f64; 2] {
    [p[0], p[1]]
}

/// Pixels inside the outer lip contour of an image-space landmark frame.
pub fn mouth_mask(frame: &LandmarkFrame, layout: &FaceLayout, size: usize) -> Mask {
    let poly: Vec<[f64; 2]> = layout.mouth_outer.clone().map(|i| to_xy(frame.points()[i])).collect();
    let mut m = Mask::new(size);
    fill_polygon(size, &poly, |r, c| m.set(r, c, true));
    m
}

/// Colour rule separating lips and mouth interior from skin, eyes, brows and background.
pub fn is_mouth_color(rgb: [f32; 3]) -> bool {
    rgb[1] < 0.4 && rgb[0] - rgb[1] > 0.18
}

/// Mouth pixels of a rendered (or generated) face, by colour.
pub fn segment_mouth(img: &FaceImage) -> Mask {
    Mask::from_fn(img.size(), |r, c| is_mouth_color(img.get(r, c)))
}

#[derive(Debug, Clone, Copy)]
struct Palette {
    background: [f32; 3],
    skin: [f32; 3],
    nose: [f32; 3],
    brow: [f32; 3],
    eye: [f32; 3],
    lip: [f32; 3],
    interior: [f32; 3],
}

impl Palette {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut u = |lo: f64, hi: f64| quantize(rng.gen_range(lo..hi) as f32);
        let skin = [u(0.75, 0.9), u(0.55, 0.68), u(0.42, 0.55)];
        Self {
            background: [u(0.1, 0.2), u(0.15, 0.25), u(0.25, 0.35)],
            skin,
            nose: skin.map(|v| quantize(v * 0.85)),
            brow: [u(0.25, 0.32), u(0.17, 0.22), u(0.1, 0.14)],
            eye: [u(0.06, 0.1), u(0.06, 0.1), u(0.1, 0.14)],
            lip: [u(0.65, 0.8), u(0.15, 0.25), u(0.2, 0.3)],
            interior: [u(0.28, 0.34), u(0.03, 0.07), u(0.06, 0.1)],
        }
    }
}

fn render(frame: &LandmarkFrame, pose: &RigidPose, layout: &FaceLayout, size: usize, pal: &Palette) -> FaceImage {
    let mut img = FaceImage::filled(size, pal.background);
    let outline: Vec<[f64; 2]> = (0..48)
        .map(|k| {
            let th = 2.0 * PI * k as f64 / 48.0;
            let p = [FACE_CENTER[0] + FACE_RADII[0] * th.cos(), FACE_CENTER[1] + FACE_RADII[1] * th.sin(), 0.0];
            to_xy(pose.transform_point(p))
        })
        .collect();
    fill_polygon(size, &outline, |r, c| img.set(r, c, pal.skin));
    let pts = frame.points();
    let xy = |range: &Range<usize>| range.clone().map(|i| to_xy(pts[i])).collect::<Vec<_>>();
    for range in [&layout.brow_left, &layout.brow_right] {
        for p in xy(range) {
            fill_disc(size, p[0], p[1], 1.0, |r, c| img.set(r, c, pal.brow));
        }
    }
    for p in xy(&layout.nose) {
        fill_disc(size, p[0], p[1], 0.8, |r, c| img.set(r, c, pal.nose));
    }
    for range in [&layout.eye_left, &layout.eye_right] {
        let poly = xy(range);
        if poly.len() >= 3 {
            fill_polygon(size, &poly, |r, c| img.set(r, c, pal.eye));
        }
        for p in poly {
            fill_disc(size, p[0], p[1], 0.5, |r, c| img.set(r, c, pal.eye));
        }
    }
    fill_polygon(size, &xy(&layout.mouth_outer), |r, c| img.set(r, c, pal.lip));
    fill_polygon(size, &xy(&layout.mouth_inner), |r, c| img.set(r, c, pal.interior));
    img
}

/// Smooth mouth-opening signal in `[0, 1]` and its time derivative (per second).
struct Articulation {
    freqs: [f64; 3],
    phases: [f64; 3],
    family: ArticulationFamily,
}

const ART_WEIGHTS: [f64; 3] = [1.0, 0.7, 0.5];
const ART_BASE_FREQS: [f64; 3] = [0.9, 1.55, 2.35];
const AUDIO_OMEGA: f64 = 2.0 * PI * 1.5;

impl Articulation {
    fn random(family: ArticulationFamily, rng: &mut ChaCha8Rng) -> Self {
        let mut freqs = ART_BASE_FREQS;
        let mut phases = [0.0; 3];
        for k in 0..3 {
            freqs[k] *= rng.gen_range(0.85..1.15);
            phases[k] = rng.gen_range(0.0..2.0 * PI);
        }
        Self { freqs, phases, family }
    }

    fn eval(&self, secs: f64) -> (f64, f64) {
        if self.family == ArticulationFamily::Silent {
            return (0.0, 0.0);
        }
        let wsum: f64 = ART_WEIGHTS.iter().sum();
        let (mut v, mut d) = (0.0, 0.0);
        for k in 0..3 {
            let w = 2.0 * PI * self.freqs[k];
            v += ART_WEIGHTS[k] * (w * secs + self.phases[k]).sin();
            d += ART_WEIGHTS[k] * w * (w * secs + self.phases[k]).cos();
        }
        (0.5 + 0.5 * v / wsum, 0.5 * d / wsum)
    }
}

/// The dataset-wide map `[2a - 1, a' / omega, 1] -> features`.
fn audio_map(dim: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim)
        .map(|_| {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            let c: f64 = rng.sample::<f64, _>(StandardNormal) * 0.5;
            [a, b, c]
        })
        .collect()
}

fn q32(v: f64) -> f64 {
    v as f32 as f64
}

fn wobble(rng: &mut ChaCha8Rng, amp: f64) -> impl Fn(f64) -> f64 {
    let f = rng.gen_range(0.15..0.4);
    let ph = rng.gen_range(0.0..2.0 * PI);
    move |secs| amp * (2.0 * PI * f * secs + ph).sin()
}

/// A synthetic clip with every ground-truth channel aligned frame by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipDataset {
    pub seed: u64,
    pub generator: Option<GeneratorConfig>,
    pub images: Vec<FaceImage>,
    /// Image-space landmarks.
    pub landmarks: LandmarkSequence,
    pub poses: Vec<RigidPose>,
    pub audio: AudioFeatureSequence,
    pub mouth_idx: Vec<usize>,
    /// Ground-truth mouth opening in `[0, 1]`.
    pub articulation: Vec<f64>,
}

impl ClipDataset {
    pub fn len(&self) -> usize {
        self.landmarks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.landmarks.is_empty()
    }

    pub fn fps(&self) -> f64 {
        self.landmarks.fps()
    }

    pub fn image_size(&self) -> usize {
        self.images[0].size()
    }

    pub fn landmark_count(&self) -> usize {
        self.landmarks.landmark_count()
    }

    pub fn layout(&self) -> Result<FaceLayout> {
        FaceLayout::new(self.landmark_count())
    }

    /// The first `n` frames (all of them if the clip is shorter).
    pub fn truncated(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        if n == 0 {
            return Err(Error::EmptyInput("truncated clip"));
        }
        Ok(Self {
            seed: self.seed,
            generator: self.generator.clone(),
            images: self.images[..n].to_vec(),
            landmarks: self.landmarks.slice(0, n)?,
            poses: self.poses[..n].to_vec(),
            audio: self.audio.window(0, n)?,
            mouth_idx: self.mouth_idx.clone(),
            articulation: self.articulation[..n].to_vec(),
        })
    }

    pub fn canonical_landmarks(&self) -> Result<LandmarkSequence> {
        canonicalize_sequence(&self.landmarks, &self.poses)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        let check = |field: &str, n: usize| {
            if n == t {
                Ok(())
            } else {
                Err(Error::format(field, format!("{n} entries for a {t}-frame clip")))
            }
        };
        check("images", self.images.len())?;
        check("poses", self.poses.len())?;
        check("audio", self.audio.len())?;
        check("articulation", self.articulation.len())?;
        let size = self.image_size();
        if self.images.iter().any(|i| i.size() != size) {
            return Err(Error::format("images", "frames differ in size"));
        }
        if let Some(&i) = self.mouth_idx.iter().find(|&&i| i >= self.landmark_count()) {
            return Err(Error::format("mouth_idx", format!("index {i} >= L = {}", self.landmark_count())));
        }
        Ok(())
    }
}

pub fn generate_clip(cfg: &GeneratorConfig) -> Result<ClipDataset> {
    cfg.validate()?;
    let layout = FaceLayout::new(cfg.landmarks)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let palette = Palette::random(&mut rng);
    let art = Articulation::random(cfg.articulation, &mut rng);
    let amp = cfg.pose_wobble_deg.to_radians();
    let (roll, pitch, yaw) = (wobble(&mut rng, amp), wobble(&mut rng, amp), wobble(&mut rng, amp));
    let (tx, ty) = (
        wobble(&mut rng, cfg.translation_wobble),
        wobble(&mut rng, cfg.translation_wobble),
    );
    let sc = wobble(&mut rng, cfg.scale_wobble);
    let map = audio_map(cfg.audio_dim, cfg.audio_map_seed);

    let size = cfg.image_size as f64;
    let base_scale = size * 0.33;
    let center = [size / 2.0 - 0.5, size / 2.0 - 0.5 - 0.2 * base_scale];

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut poses = Vec::with_capacity(cfg.frames);
    let mut images = Vec::with_capacity(cfg.frames);
    let mut audio = Vec::with_capacity(cfg.frames * cfg.audio_dim);
    let mut articulation = Vec::with_capacity(cfg.frames);
    for i in 0..cfg.frames {
        let secs = i as f64 / cfg.fps;
        let (a, da) = art.eval(secs);
        let a = q32(a);
        let pose = RigidPose::from_euler(
            roll(secs),
            pitch(secs),
            yaw(secs),
            [center[0] + tx(secs), center[1] + ty(secs), 0.0],
            base_scale * (1.0 + sc(secs)),
        )?;
        // store-and-reload precision so a saved clip reads back identically
        let pose = RigidPose::from_array(&pose.to_array().map(q32))?;
        let frame = apply_pose(&template_frame(&layout, cfg.mouth_amplitude * a), &pose)?;
        let frame = frame.map_points(|_, p| p.map(q32));
        images.push(render(&frame, &pose, &layout, cfg.image_size, &palette));
        let feat = [2.0 * a - 1.0, da / AUDIO_OMEGA, 1.0];
        for row in &map {
            let clean: f64 = row.iter().zip(&feat).map(|(w, f)| w * f).sum();
            let noise: f64 = rng.sample(StandardNormal);
            audio.push(q32(clean + cfg.audio_noise * noise));
        }
        frames.push(frame);
        poses.push(pose);
        articulation.push(a);
    }
    let clip = ClipDataset {
        seed: cfg.seed,
        generator: Some(cfg.clone()),
        images,
        landmarks: LandmarkSequence::new(frames, cfg.fps)?,
        poses,
        audio: AudioFeatureSequence::new(audio, cfg.audio_dim, cfg.fps)?,
        mouth_idx: layout.mouth_idx(),
        articulation,
    };
    clip.validate()?;
    Ok(clip)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipManifest {
    pub format: String,
    pub version: u32,
    pub frames: usize,
    pub landmarks: usize,
    pub audio_dim: usize,
    pub image_size: usize,
    pub fps: f64,
    pub seed: u64,
    pub mouth_idx: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorConfig>,
}

fn write_f32(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(|v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32(dir: &Path, file: &str, expected: usize, dims: &str) -> Result<Vec<f64>> {
    let path = dir.join(file);
    let bytes = fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::format(file, "file is missing"),
        _ => Error::io(&path, e),
    })?;
    if bytes.len() != expected * 4 {
        return Err(Error::format(
            file,
            format!("expected {expected} floats ({dims}), file holds {} bytes", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

pub fn frame_file_name(i: usize) -> String {
    format!("{i:06}.png")
}

pub fn save_clip(clip: &ClipDataset, dir: &Path) -> Result<()> {
    clip.validate()?;
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let manifest = ClipManifest {
        format: CLIP_FORMAT.into(),
        version: 1,
        frames: clip.len(),
        landmarks: clip.landmark_count(),
        audio_dim: clip.audio.dim(),
        image_size: clip.image_size(),
        fps: clip.fps(),
        seed: clip.seed,
        mouth_idx: clip.mouth_idx.clone(),
        generator: clip.generator.clone(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    write_f32(&dir.join("landmarks.bin"), clip.landmarks.to_flat().into_iter())?;
    write_f32(&dir.join("audio.bin"), clip.audio.features().iter().copied())?;
    write_f32(&dir.join("poses.bin"), clip.poses.iter().flat_map(|p| p.to_array()))?;
    write_f32(&dir.join("articulation.bin"), clip.articulation.iter().copied())?;
    for (i, img) in clip.images.iter().enumerate() {
        img.save_png(&frames_dir.join(frame_file_name(i)))?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<ClipManifest> {
    let m: ClipManifest = read_json(&dir.join(MANIFEST_FILE))?;
    if m.format != CLIP_FORMAT {
        return Err(Error::format("manifest.format", format!("unknown format {:?}", m.format)));
    }
    if m.version != 1 {
        return Err(Error::format("manifest.version", format!("unsupported version {}", m.version)));
    }
    if m.frames == 0 || m.landmarks < 4 || m.audio_dim == 0 || m.image_size == 0 {
        return Err(Error::format("manifest", "dimensions must be positive (and L >= 4)"));
    }
    Ok(m)
}

pub fn load_clip(dir: &Path) -> Result<ClipDataset> {
    let m = read_manifest(dir)?;
    let (t, l) = (m.frames, m.landmarks);
    let lm = read_f32(dir, "landmarks.bin", t * l * 3, &format!("{t} frames x {l} landmarks x 3"))?;
    let audio = read_f32(dir, "audio.bin", t * m.audio_dim, &format!("{t} frames x {} features", m.audio_dim))?;
    let poses = read_f32(dir, "poses.bin", t * 13, &format!("{t} frames x 13"))?;
    let articulation = read_f32(dir, "articulation.bin", t, &format!("{t} frames"))?;
    let poses = poses
        .chunks(13)
        .enumerate()
        .map(|(i, p)| RigidPose::from_array(p).map_err(|e| Error::format("poses.bin", format!("frame {i}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let mut images = Vec::with_capacity(t);
    for i in 0..t {
        let name = format!("frames/{}", frame_file_name(i));
        let path = dir.join(&name);
        if !path.exists() {
            return Err(Error::format(name, "file is missing"));
        }
        let img = FaceImage::load_png(&path)?;
        if img.size() != m.image_size {
            return Err(Error::format(name, format!("size {} but manifest says {}", img.size(), m.image_size)));
        }
        images.push(img);
    }
    let clip = ClipDataset {
        seed: m.seed,
        generator: m.generator,
        images,
        landmarks: LandmarkSequence::from_flat(&lm, l, m.fps)?,
        poses,
        audio: AudioFeatureSequence::new(audio, m.audio_dim, m.fps)?,
        mouth_idx: m.mouth_idx,
        articulation,
    };
    clip.validate()?;
    Ok(clip)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub clips: Vec<String>,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::format(
            path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            "file is missing",
        ),
        _ => Error::io(path, e),
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn clip_dir_name(i: usize) -> String {
    format!("clip_{i:04}")
}

/// Generates `count` clips with seeds `cfg.seed + i` under `dir`.
pub fn generate_dataset(cfg: &GeneratorConfig, count: usize, dir: &Path) -> Result<DatasetIndex> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = DatasetIndex::default();
    for i in 0..count {
        let clip = generate_clip(&GeneratorConfig {
            seed: cfg.seed.wrapping_add(i as u64),
            ..cfg.clone()
        })?;
        let name = clip_dir_name(i);
        save_clip(&clip, &dir.join(&name))?;
        index.clips.push(name);
    }
    write_json(&dir.join(DATASET_FILE), &index)?;
    Ok(index)
}

pub fn read_dataset_index(dir: &Path) -> Result<DatasetIndex> {
    read_json(&dir.join(DATASET_FILE))
}

pub fn load_dataset(dir: &Path) -> Result<Vec<ClipDataset>> {
    read_dataset_index(dir)?
        .clips
        .iter()
        .map(|name| load_clip(&dir.join(name)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::canonicalize;

    fn small(seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            frames: 30,
            seed,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn layout_68_matches_common_split() {
        let l = FaceLayout::new(68).unwrap();
        assert_eq!(l.jaw, 0..17);
        assert_eq!((l.brow_left.len(), l.brow_right.len(), l.nose.len()), (5, 5, 9));
        assert_eq!((l.eye_left.len(), l.eye_right.len()), (6, 6));
        assert_eq!((l.mouth_outer, l.mouth_inner), (48..60, 60..68));
        for n in 8..200 {
            assert_eq!(FaceLayout::new(n).unwrap().landmarks(), n);
        }
    }

    #[test]
    fn same_seed_same_clip() {
        assert_eq!(generate_clip(&small(3)).unwrap(), generate_clip(&small(3)).unwrap());
        assert_ne!(generate_clip(&small(3)).unwrap().landmarks, generate_clip(&small(4)).unwrap().landmarks);
    }

    #[test]
    fn silent_clip_has_static_canonical_mouth() {
        let clip = generate_clip(&GeneratorConfig {
            articulation: ArticulationFamily::Silent,
            ..small(1)
        })
        .unwrap();
        let canon = clip.canonical_landmarks().unwrap();
        let first = &canon.frames()[0];
        for f in canon.frames() {
            for &i in &clip.mouth_idx {
                for k in 0..3 {
                    assert!((f.points()[i][k] - first.points()[i][k]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn canonical_non_mouth_points_are_static() {
        let clip = generate_clip(&small(2)).unwrap();
        let layout = clip.layout().unwrap();
        let canon = clip.canonical_landmarks().unwrap();
        let t = canon.len() as f64;
        for i in 0..layout.mouth_outer.start {
            for k in 0..3 {
                let vals: Vec<f64> = canon.frames().iter().map(|f| f.points()[i][k]).collect();
                let mean = vals.iter().sum::<f64>() / t;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t;
                assert!(var < 1e-6, "point {i} axis {k}: {var}");
            }
        }
    }

    #[test]
    fn lip_opening_tracks_articulation() {
        let clip = generate_clip(&small(5)).unwrap();
        let layout = clip.layout().unwrap();
        let open: Vec<f64> = clip
            .landmarks
            .frames()
            .iter()
            .zip(&clip.poses)
            .map(|(f, p)| lip_opening(&canonicalize(f, p).unwrap(), &layout))
            .collect();
        let base = lip_opening(&template_frame(&layout, 0.0), &layout);
        let unit = lip_opening(&template_frame(&layout, 1.0), &layout) - base;
        for (o, a) in open.iter().zip(&clip.articulation) {
            let expect = base + unit * 0.3 * a;
            assert!((o - expect).abs() < 1e-5, "{o} vs {expect}");
        }
    }

    #[test]
    fn mouth_landmarks_fall_on_rendered_mouth() {
        let clip = generate_clip(&small(6)).unwrap();
        let layout = clip.layout().unwrap();
        for (img, f) in clip.images.iter().zip(clip.landmarks.frames()) {
            let drawn = segment_mouth(img).dilate(2);
            for &i in &clip.mouth_idx {
                let p = f.points()[i];
                assert!(drawn.get(p[1].round() as usize, p[0].round() as usize));
            }
            let gt = mouth_mask(f, &layout, img.size());
            assert!(gt.count() > 0);
            assert!(segment_mouth(img).iou(&gt) > 0.8);
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let clip = generate_clip(&small(7)).unwrap();
        save_clip(&clip, dir.path()).unwrap();
        assert_eq!(load_clip(dir.path()).unwrap(), clip);
    }

    #[test]
    fn truncated_or_mismatched_files_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let clip = generate_clip(&GeneratorConfig { frames: 3, ..small(8) }).unwrap();
        save_clip(&clip, dir.path()).unwrap();
        let lm = dir.path().join("landmarks.bin");
        let bytes = fs::read(&lm).unwrap();
        fs::write(&lm, &bytes[..bytes.len() - 2]).unwrap();
        let err = load_clip(dir.path()).unwrap_err().to_string();
        assert!(err.contains("landmarks.bin"), "{err}");
        // 67-point data under a 68-point manifest
        fs::write(&lm, vec![0u8; 3 * 67 * 3 * 4]).unwrap();
        let err = load_clip(dir.path()).unwrap_err().to_string();
        assert!(err.contains("landmarks.bin") && err.contains("68 landmarks"), "{err}");
        fs::remove_file(dir.path().join("audio.bin")).unwrap();
        fs::write(&lm, &bytes).unwrap();
        let err = load_clip(dir.path()).unwrap_err().to_string();
        assert!(err.contains("audio.bin") && err.contains("missing"), "{err}");
    }
}
