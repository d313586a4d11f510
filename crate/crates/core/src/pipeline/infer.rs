use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::InferConfig;
use crate::a2l::{A2lCondition, A2lModel, A2lObjective, AudioFeatureSequence};
use crate::ddpm::NoiseSchedule;
use crate::error::{Error, Result};
use crate::geometry::{
    apply_pose, canonicalize, compute_stats, denormalize_sequence, LandmarkFrame, LandmarkSequence,
    NormalizationStats, RigidPose, DEFAULT_NORM_EPS,
};
use crate::imaging::FaceImage;
use crate::l2i::{rasterize_landmarks, FrameRequest, L2iModel, OrthoCamera};
use crate::synthdata::{frame_file_name, write_json, ClipDataset};

const A2L_STREAMS: u64 = 0xa2;
const L2I_STREAMS: u64 = 0x12;

/// Noise stream `index` of a stage; independent of batching and of the other stage.
pub fn stream_rng(seed: u64, stage: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stage.rotate_left(48));
    rng.set_stream(index);
    rng
}

/// Why a source landmark frame was read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkPurpose {
    Statistics,
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LandmarkRead {
    pub frame: usize,
    pub purpose: LandmarkPurpose,
}

/// Per-coordinate deviation used when only one source frame is available.
#[derive(Debug, Clone, PartialEq)]
pub enum StdInit {
    /// Uniform in `[0.5, 1.5] * scale`.
    Random { seed: u64, scale: f64 },
    Provided(Vec<[f64; 3]>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum StatsSource {
    /// Mean and deviation of the whole source clip in canonical space.
    FromClip,
    Provided(NormalizationStats),
    /// A single source frame: its canonical landmarks are the mean.
    SingleFrame { frame: usize, std: StdInit },
}

/// What inference may use from the source clip. Landmarks enter only through
/// `stats` and the reference frame; `landmark_reads` records every frame read.
#[derive(Debug, Clone)]
pub struct InferenceSource {
    pub stats: NormalizationStats,
    pub poses: Vec<RigidPose>,
    pub images: Vec<FaceImage>,
    pub reference_image: FaceImage,
    pub reference_landmarks: LandmarkFrame,
    pub mouth_idx: Vec<usize>,
    pub fps: f64,
    pub landmark_reads: Vec<LandmarkRead>,
}

impl InferenceSource {
    /// Source frame used for output frame `i`: the clip is played forward
    /// and backward when the audio is longer.
    pub fn frame_index(&self, i: usize) -> usize {
        let n = self.images.len();
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let k = i % period;
        if k < n {
            k
        } else {
            period - k
        }
    }
}

pub fn prepare_source(clip: &ClipDataset, stats: StatsSource) -> Result<InferenceSource> {
    clip.validate()?;
    if clip.is_empty() {
        return Err(Error::EmptyInput("source clip"));
    }
    let frames = clip.landmarks.frames();
    let mut reads = Vec::new();
    let mut read = |frame: usize, purpose| {
        reads.push(LandmarkRead { frame, purpose });
        &frames[frame]
    };
    let (stats, ref_idx, poses, images) = match stats {
        StatsSource::FromClip => {
            let canon = (0..clip.len())
                .map(|i| canonicalize(read(i, LandmarkPurpose::Statistics), &clip.poses[i]))
                .collect::<Result<Vec<_>>>()?;
            let stats = compute_stats(&LandmarkSequence::new(canon, clip.fps())?)?;
            (stats, 0, clip.poses.clone(), clip.images.clone())
        }
        StatsSource::Provided(stats) => {
            if stats.landmark_count() != clip.landmark_count() {
                return Err(Error::shape("provided stats", clip.landmark_count(), stats.landmark_count()));
            }
            (stats, 0, clip.poses.clone(), clip.images.clone())
        }
        StatsSource::SingleFrame { frame, std } => {
            if frame >= clip.len() {
                return Err(Error::shape("source frame", format!("< {}", clip.len()), frame));
            }
            let mean = canonicalize(read(frame, LandmarkPurpose::Statistics), &clip.poses[frame])?;
            let std = match std {
                StdInit::Random { seed, scale } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    (0..mean.len())
                        .map(|_| [0; 3].map(|_| scale * rng.gen_range(0.5..1.5)))
                        .collect()
                }
                StdInit::Provided(s) => s,
            };
            let stats = NormalizationStats::new(mean, std, DEFAULT_NORM_EPS)?;
            (stats, frame, vec![clip.poses[frame].clone()], vec![clip.images[frame].clone()])
        }
    };
    let reference_landmarks = read(ref_idx, LandmarkPurpose::Reference).clone();
    Ok(InferenceSource {
        stats,
        reference_image: images[0].clone(),
        poses,
        images,
        reference_landmarks,
        mouth_idx: clip.mouth_idx.clone(),
        fps: clip.fps(),
        landmark_reads: reads,
    })
}

/// Start frames of length-`window` windows covering `total` frames, with
/// consecutive windows sharing `overlap` frames; the last window is aligned
/// to the end, so it may share more.
pub fn window_starts(total: usize, window: usize, overlap: usize) -> Result<Vec<usize>> {
    if overlap >= window {
        return Err(Error::InvalidConfig(format!("window overlap {overlap} must be < window {window}")));
    }
    if total <= window {
        return Ok(vec![0]);
    }
    let hop = window - overlap;
    let mut starts = vec![0];
    while starts[starts.len() - 1] + window < total {
        let next = (starts[starts.len() - 1] + hop).min(total - window);
        starts.push(next);
    }
    Ok(starts)
}

/// Joins windows laid out by [`window_starts`] into one `total`-frame
/// sequence. Where a window overlaps frames already written the two are
/// cross-faded linearly towards the newer window.
pub fn window_stitch(windows: &[LandmarkSequence], overlap: usize, total: usize) -> Result<LandmarkSequence> {
    let first = windows.first().ok_or(Error::EmptyInput("windows"))?;
    let l = first.len();
    if windows.iter().any(|w| w.len() != l || w.landmark_count() != first.landmark_count()) {
        return Err(Error::shape("window shapes", l, "mixed lengths"));
    }
    if total < l {
        return Err(Error::shape("stitched length (at least one window)", l, total));
    }
    let starts = window_starts(total, l, overlap)?;
    if starts.len() != windows.len() {
        return Err(Error::shape("window count", starts.len(), windows.len()));
    }
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(total);
    for (&s, w) in starts.iter().zip(windows) {
        let shared = out.len().saturating_sub(s);
        for (j, frame) in w.frames().iter().enumerate() {
            let f = s + j;
            let v = frame.to_flat();
            if f < out.len() {
                let a = (j + 1) as f64 / (shared + 1) as f64;
                out[f].iter_mut().zip(&v).for_each(|(o, n)| *o = (1.0 - a) * *o + a * n);
            } else {
                out.push(v);
            }
        }
    }
    let flat: Vec<f64> = out.concat();
    LandmarkSequence::from_flat(&flat, first.landmark_count(), first.fps())
}

/// Audio padded on the left by repeating its first frame up to `len` frames.
fn left_pad(audio: &AudioFeatureSequence, len: usize) -> Result<AudioFeatureSequence> {
    let pad = len.saturating_sub(audio.len());
    let mut feats = Vec::with_capacity(len * audio.dim());
    for _ in 0..pad {
        feats.extend_from_slice(audio.row(0));
    }
    feats.extend_from_slice(audio.features());
    AudioFeatureSequence::new(feats, audio.dim(), audio.fps())
}

/// Normalized canonical landmarks for the whole audio track, window by window.
pub fn sample_normalized_track(
    model: &A2lModel,
    sched: &NoiseSchedule,
    audio: &AudioFeatureSequence,
    mean_landmarks: &LandmarkFrame,
    opts: &InferConfig,
    overlap: usize,
) -> Result<LandmarkSequence> {
    if audio.is_empty() {
        return Err(Error::EmptyInput("driving audio"));
    }
    let l = model.config().window;
    let total = audio.len();
    let padded = left_pad(audio, l)?;
    let starts = window_starts(padded.len(), l, overlap)?;
    let conds = starts
        .iter()
        .map(|&s| {
            Ok(A2lCondition {
                audio: padded.window(s, l)?,
                mean_landmarks: mean_landmarks.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let windows = match model.config().objective {
        A2lObjective::Diffusion => {
            let mut streams: Vec<_> = (0..conds.len()).map(|k| stream_rng(opts.seed, A2L_STREAMS, k as u64)).collect();
            model.generate_batch(&conds, sched, &mut streams, opts.a2l_stride)?
        }
        A2lObjective::Regression => conds.iter().map(|c| model.regress_landmarks(c)).collect::<Result<_>>()?,
    };
    let stitched = window_stitch(&windows, overlap, padded.len())?;
    stitched.slice(padded.len() - total, total)
}

/// Output of [`infer`].
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOutput {
    pub frames: Vec<FaceImage>,
    /// Generated landmarks in image space.
    pub landmarks: LandmarkSequence,
    /// Generated landmarks in canonical space, de-normalized.
    pub canonical: LandmarkSequence,
    /// Landmark discs falling outside the canvas, summed over frames.
    pub clipped: usize,
}

/// De-normalized canonical landmarks and their re-posed image-space version.
pub fn generate_landmarks(
    ckpt: &Checkpoint,
    source: &InferenceSource,
    audio: &AudioFeatureSequence,
    opts: &InferConfig,
) -> Result<(LandmarkSequence, LandmarkSequence)> {
    let sched = ckpt.schedule()?;
    let norm = sample_normalized_track(&ckpt.a2l, &sched, audio, source.stats.mean(), opts, ckpt.config.overlap())?;
    let canonical = denormalize_sequence(&norm, &source.stats)?;
    let posed = canonical
        .frames()
        .iter()
        .enumerate()
        .map(|(i, f)| apply_pose(f, &source.poses[source.frame_index(i)]))
        .collect::<Result<Vec<_>>>()?;
    Ok((canonical, LandmarkSequence::new(posed, audio.fps())?))
}

/// L2I conditions for output frame `i`, with the first-frame reference.
pub fn frame_request(
    model: &L2iModel,
    source: &InferenceSource,
    landmarks: &LandmarkSequence,
    i: usize,
) -> Result<FrameRequest> {
    let frame = landmarks
        .frames()
        .get(i)
        .ok_or_else(|| Error::shape("frame index", format!("< {}", landmarks.len()), i))?;
    let target = &source.images[source.frame_index(i)];
    let (cond, mask) = model.build_conditions(
        target,
        frame,
        &source.reference_image,
        &source.reference_landmarks,
        &source.mouth_idx,
    )?;
    Ok(FrameRequest { cond, source: target.clone(), mask })
}

/// Intermediate clean-frame predictions for output frame `i`, drawn from the
/// same noise stream as the final frame.
pub fn frame_progression(
    ckpt: &Checkpoint,
    source: &InferenceSource,
    landmarks: &LandmarkSequence,
    i: usize,
    opts: &InferConfig,
    count: usize,
) -> Result<Vec<FaceImage>> {
    let request = frame_request(&ckpt.l2i, source, landmarks, i)?;
    let mut rng = stream_rng(opts.seed, L2I_STREAMS, i as u64);
    crate::plot::denoise_progression(&ckpt.l2i, &request, &ckpt.schedule()?, &mut rng, opts.l2i_stride, count)
}

/// Generates one image per landmark frame with L2I, frame `i` drawing noise
/// from its own stream; unmasked pixels come from the source frames.
pub fn render_frames(
    model: &L2iModel,
    sched: &NoiseSchedule,
    source: &InferenceSource,
    landmarks: &LandmarkSequence,
    opts: &InferConfig,
) -> Result<(Vec<FaceImage>, usize)> {
    let size = model.config().image_size;
    let radius = model.config().radius();
    let cam = OrthoCamera::default();
    let mut frames = Vec::with_capacity(landmarks.len());
    let mut clipped = 0;
    let all: Vec<usize> = (0..landmarks.len()).collect();
    for chunk in all.chunks(opts.frame_batch) {
        let mut requests = Vec::with_capacity(chunk.len());
        for &i in chunk {
            clipped += rasterize_landmarks(&landmarks.frames()[i], &cam, size, radius, &source.mouth_idx).clipped;
            requests.push(frame_request(model, source, landmarks, i)?);
        }
        let conds: Vec<_> = requests.iter().map(|r| r.cond.clone()).collect();
        let mut streams: Vec<_> = chunk.iter().map(|&i| stream_rng(opts.seed, L2I_STREAMS, i as u64)).collect();
        let latents = model.generate_latents(&conds, sched, &mut streams, opts.l2i_stride)?;
        for (lat, req) in latents.iter().zip(&requests) {
            let generated = model.codec().decode(lat)?.quantized();
            frames.push(req.source.composite(&generated, &req.mask)?);
        }
    }
    Ok((frames, clipped))
}

/// Full inference: landmarks from audio, then frames from landmarks. The
/// output has one frame per audio frame.
pub fn infer(
    ckpt: &Checkpoint,
    source: &InferenceSource,
    audio: &AudioFeatureSequence,
    opts: &InferConfig,
) -> Result<InferenceOutput> {
    if audio.dim() != ckpt.config.a2l.audio_dim {
        return Err(Error::shape("audio feature dimension", ckpt.config.a2l.audio_dim, audio.dim()));
    }
    if source.stats.landmark_count() != ckpt.config.a2l.landmarks {
        return Err(Error::shape("source landmark count", ckpt.config.a2l.landmarks, source.stats.landmark_count()));
    }
    let (canonical, landmarks) = generate_landmarks(ckpt, source, audio, opts)?;
    let (frames, clipped) = render_frames(&ckpt.l2i, &ckpt.schedule()?, source, &landmarks, opts)?;
    Ok(InferenceOutput {
        frames,
        landmarks,
        canonical,
        clipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceManifest {
    pub frames: usize,
    pub fps: f64,
    pub image_size: usize,
    pub landmarks: usize,
    pub seed: u64,
    pub config_hash: String,
    pub clipped_points: usize,
    pub landmark_reads: Vec<LandmarkRead>,
}

/// Writes `frames/NNNNNN.png`, `landmarks.bin` (image space),
/// `canonical.bin` (both little-endian `f32`) and `inference.json`.
pub fn write_inference(out: &InferenceOutput, manifest: &InferenceManifest, dir: &Path) -> Result<()> {
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    for (i, img) in out.frames.iter().enumerate() {
        img.save_png(&frames_dir.join(frame_file_name(i)))?;
    }
    for (name, seq) in [("landmarks.bin", &out.landmarks), ("canonical.bin", &out.canonical)] {
        let p = dir.join(name);
        let bytes: Vec<u8> = seq.to_flat().iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    }
    write_json(&dir.join("inference.json"), manifest)
}
