//! Landmark containers, similarity poses, canonicalization and the per-video
//! mean/deviation normalization that the landmark diffusion trains against.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest landmark count accepted by [`LandmarkFrame::new`].
pub const MIN_LANDMARKS: usize = 4;

/// Offset added to the per-coordinate deviation before dividing.
pub const DEFAULT_NORM_EPS: f64 = 1e-8;

const POSE_TOLERANCE: f64 = 1e-6;

/// One frame of 3D facial landmarks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkFrame {
    points: Vec<[f64; 3]>,
}

impl LandmarkFrame {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.len() < MIN_LANDMARKS {
            return Err(Error::shape(
                "landmark frame",
                format!(">= {MIN_LANDMARKS} points"),
                points.len(),
            ));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("landmark coordinates must be finite".into()));
        }
        Ok(Self { points })
    }

    /// Builds a frame from `3 * L` interleaved xyz values.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 3 != 0 {
            return Err(Error::shape("landmark frame", "multiple of 3 values", flat.len()));
        }
        Self::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn zeros(len: usize) -> Result<Self> {
        Self::new(vec![[0.0; 3]; len])
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn map_points(&self, mut f: impl FnMut(usize, [f64; 3]) -> [f64; 3]) -> Self {
        Self {
            points: self.points.iter().enumerate().map(|(i, &p)| f(i, p)).collect(),
        }
    }

    /// Axis-aligned bounding box of the xy projection: `(min_x, min_y, max_x, max_y)`.
    pub fn bbox_xy(&self) -> (f64, f64, f64, f64) {
        self.points.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(x0, y0, x1, y1), p| (x0.min(p[0]), y0.min(p[1]), x1.max(p[0]), y1.max(p[1])),
        )
    }
}

/// An ordered run of landmark frames sharing one landmark count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSequence {
    frames: Vec<LandmarkFrame>,
    fps: f64,
}

impl LandmarkSequence {
    pub fn new(frames: Vec<LandmarkFrame>, fps: f64) -> Result<Self> {
        let first = frames.first().ok_or(Error::EmptyInput("landmark sequence"))?;
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::InvalidConfig(format!("fps must be positive, got {fps}")));
        }
        let len = first.len();
        if let Some(bad) = frames.iter().find(|f| f.len() != len) {
            return Err(Error::shape("landmark sequence", len, bad.len()));
        }
        Ok(Self { frames, fps })
    }

    /// Builds a sequence from a `T x 3L` row-major buffer.
    pub fn from_flat(flat: &[f64], landmarks: usize, fps: f64) -> Result<Self> {
        let row = 3 * landmarks;
        if row == 0 || flat.len() % row != 0 {
            return Err(Error::shape("landmark sequence", format!("multiple of {row}"), flat.len()));
        }
        let frames = flat.chunks_exact(row).map(LandmarkFrame::from_flat).collect::<Result<_>>()?;
        Self::new(frames, fps)
    }

    pub fn frames(&self) -> &[LandmarkFrame] {
        &self.frames
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn landmark_count(&self) -> usize {
        self.frames[0].len()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.frames.iter().flat_map(|f| f.to_flat()).collect()
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames.len() {
            return Err(Error::shape(
                "sequence slice",
                format!("range within 0..{}", self.frames.len()),
                format!("{start}..{}", start + len),
            ));
        }
        Self::new(self.frames[start..start + len].to_vec(), self.fps)
    }
}

/// A similarity transform `p -> scale * rotation * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>, scale: f64) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
            scale,
        };
        pose.validate()?;
        Ok(pose)
    }

    /// Pose from roll/pitch/yaw in radians (nalgebra's extrinsic xyz convention).
    pub fn from_euler(roll: f64, pitch: f64, yaw: f64, translation: [f64; 3], scale: f64) -> Result<Self> {
        let rotation = Rotation3::from_euler_angles(roll, pitch, yaw).into_inner();
        Self::new(rotation, Vector3::from(translation), scale)
    }

    pub fn translation_only(translation: [f64; 3]) -> Self {
        Self {
            translation: Vector3::from(translation),
            ..Self::identity()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidPose(format!("scale must be positive, got {}", self.scale)));
        }
        if self.rotation.iter().chain(self.translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidPose("non-finite entries".into()));
        }
        let gram = self.rotation.transpose() * self.rotation;
        let off = (gram - Matrix3::identity()).abs().max();
        if off > POSE_TOLERANCE {
            return Err(Error::InvalidPose(format!("rotation not orthonormal (|RᵀR - I| = {off:e})")));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > POSE_TOLERANCE {
            return Err(Error::InvalidPose(format!("rotation determinant {det} != 1")));
        }
        Ok(())
    }

    /// The inverse similarity transform.
    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
            scale: 1.0 / self.scale,
        }
    }

    pub fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.scale * (self.rotation * Vector3::from(p)) + self.translation;
        [v.x, v.y, v.z]
    }

    /// Row-major 3x3 rotation, translation, scale: the 13-float on-disk layout.
    pub fn to_array(&self) -> [f64; 13] {
        let mut out = [0.0; 13];
        for r in 0..3 {
            for c in 0..3 {
                out[3 * r + c] = self.rotation[(r, c)];
            }
        }
        out[9..12].copy_from_slice(self.translation.as_slice());
        out[12] = self.scale;
        out
    }

    /// Inverse of [`RigidPose::to_array`]. A stored rotation that is only
    /// approximately orthonormal is projected back onto the rotations.
    pub fn from_array(a: &[f64]) -> Result<Self> {
        if a.len() != 13 {
            return Err(Error::shape("pose record", 13, a.len()));
        }
        let m = Matrix3::from_row_slice(&a[..9]);
        let translation = Vector3::new(a[9], a[10], a[11]);
        if let Ok(pose) = Self::new(m, translation, a[12]) {
            return Ok(pose);
        }
        let svd = m.svd(true, true);
        let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
        let rotation = u * v_t;
        if (rotation - m).abs().max() > 1e-4 {
            return Err(Error::InvalidPose("stored rotation is not a rotation".into()));
        }
        Self::new(rotation, translation, a[12])
    }
}

/// How much of the pose [`canonicalize_with`] removes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CanonicalMode {
    /// Inverse of the full similarity transform (rotation, translation and scale).
    #[default]
    Similarity,
    /// Removes rotation and translation but keeps the scale of the input.
    RigidOnly,
}

pub fn apply_pose(frame: &LandmarkFrame, pose: &RigidPose) -> Result<LandmarkFrame> {
    pose.validate()?;
    Ok(frame.map_points(|_, p| pose.transform_point(p)))
}

pub fn canonicalize(frame: &LandmarkFrame, pose: &RigidPose) -> Result<LandmarkFrame> {
    canonicalize_with(frame, pose, CanonicalMode::Similarity)
}

pub fn canonicalize_with(frame: &LandmarkFrame, pose: &RigidPose, mode: CanonicalMode) -> Result<LandmarkFrame> {
    pose.validate()?;
    let inv = pose.inverse();
    Ok(match mode {
        CanonicalMode::Similarity => frame.map_points(|_, p| inv.transform_point(p)),
        CanonicalMode::RigidOnly => frame.map_points(|_, p| {
            let v = inv.transform_point(p);
            [v[0] * pose.scale, v[1] * pose.scale, v[2] * pose.scale]
        }),
    })
}

pub fn canonicalize_sequence(seq: &LandmarkSequence, poses: &[RigidPose]) -> Result<LandmarkSequence> {
    if poses.len() != seq.len() {
        return Err(Error::shape("pose track", seq.len(), poses.len()));
    }
    let frames = seq
        .frames()
        .iter()
        .zip(poses)
        .map(|(f, p)| canonicalize(f, p))
        .collect::<Result<_>>()?;
    LandmarkSequence::new(frames, seq.fps())
}

pub fn apply_pose_sequence(seq: &LandmarkSequence, poses: &[RigidPose]) -> Result<LandmarkSequence> {
    if poses.len() != seq.len() {
        return Err(Error::shape("pose track", seq.len(), poses.len()));
    }
    let frames = seq
        .frames()
        .iter()
        .zip(poses)
        .map(|(f, p)| apply_pose(f, p))
        .collect::<Result<_>>()?;
    LandmarkSequence::new(frames, seq.fps())
}

/// Per-(landmark, axis) mean and population deviation of a canonical sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    mean: LandmarkFrame,
    std: Vec<[f64; 3]>,
    eps: f64,
}

impl NormalizationStats {
    pub fn new(mean: LandmarkFrame, std: Vec<[f64; 3]>, eps: f64) -> Result<Self> {
        if std.len() != mean.len() {
            return Err(Error::shape("normalization stats", mean.len(), std.len()));
        }
        if std.iter().flatten().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::InvalidConfig("deviation must be finite and non-negative".into()));
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidConfig("eps must be positive".into()));
        }
        Ok(Self { mean, std, eps })
    }

    pub fn mean(&self) -> &LandmarkFrame {
        &self.mean
    }

    pub fn std(&self) -> &[[f64; 3]] {
        &self.std
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn landmark_count(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, frame: &LandmarkFrame) -> Result<()> {
        if frame.len() != self.mean.len() {
            return Err(Error::shape("normalize", self.mean.len(), frame.len()));
        }
        Ok(())
    }
}

pub fn compute_stats(seq: &LandmarkSequence) -> Result<NormalizationStats> {
    compute_stats_with_eps(seq, DEFAULT_NORM_EPS)
}

pub fn compute_stats_with_eps(seq: &LandmarkSequence, eps: f64) -> Result<NormalizationStats> {
    if seq.is_empty() {
        return Err(Error::EmptyInput("landmark sequence"));
    }
    let n = seq.len() as f64;
    let l = seq.landmark_count();
    let mut mean = vec![[0.0; 3]; l];
    for f in seq.frames() {
        for (m, p) in mean.iter_mut().zip(f.points()) {
            for a in 0..3 {
                m[a] += p[a];
            }
        }
    }
    mean.iter_mut().flatten().for_each(|m| *m /= n);
    let mut var = vec![[0.0; 3]; l];
    for f in seq.frames() {
        for ((v, m), p) in var.iter_mut().zip(&mean).zip(f.points()) {
            for a in 0..3 {
                let d = p[a] - m[a];
                v[a] += d * d;
            }
        }
    }
    let std = var.iter().map(|v| v.map(|s| (s / n).sqrt())).collect();
    NormalizationStats::new(LandmarkFrame::new(mean)?, std, eps)
}

pub fn normalize(frame: &LandmarkFrame, stats: &NormalizationStats) -> Result<LandmarkFrame> {
    stats.check(frame)?;
    let mean = stats.mean.points();
    Ok(frame.map_points(|i, p| {
        let (m, s) = (mean[i], stats.std[i]);
        [0, 1, 2].map(|a| (p[a] - m[a]) / (s[a] + stats.eps))
    }))
}

pub fn denormalize(frame: &LandmarkFrame, stats: &NormalizationStats) -> Result<LandmarkFrame> {
    stats.check(frame)?;
    let mean = stats.mean.points();
    Ok(frame.map_points(|i, p| {
        let (m, s) = (mean[i], stats.std[i]);
        [0, 1, 2].map(|a| p[a] * (s[a] + stats.eps) + m[a])
    }))
}

pub fn normalize_sequence(seq: &LandmarkSequence, stats: &NormalizationStats) -> Result<LandmarkSequence> {
    let frames = seq.frames().iter().map(|f| normalize(f, stats)).collect::<Result<_>>()?;
    LandmarkSequence::new(frames, seq.fps())
}

pub fn denormalize_sequence(seq: &LandmarkSequence, stats: &NormalizationStats) -> Result<LandmarkSequence> {
    let frames = seq.frames().iter().map(|f| denormalize(f, stats)).collect::<Result<_>>()?;
    LandmarkSequence::new(frames, seq.fps())
}
