//! Lip-sync and landmark-quality metrics, and the report they are collected in.
//!
//! LMD / LMD-v are measured on the image plane (x, y); ErrorNorm and Jitter
//! in 3D. `frame_consistency` is a simple smoothness score of our own, not a
//! published temporal-consistency metric.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::LandmarkSequence;
use crate::imaging::FaceImage;
use crate::raster::{hull_mask, Mask};

pub const LMD: &str = "lmd";
pub const LMD_V: &str = "lmd_v";
pub const MA: &str = "ma";
pub const ERROR_NORM: &str = "error_norm";
pub const JITTER: &str = "jitter";
pub const FRAME_CONSISTENCY: &str = "frame_consistency";

fn same_shape(pred: &LandmarkSequence, gt: &LandmarkSequence) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::shape("sequence length", gt.len(), pred.len()));
    }
    if pred.landmark_count() != gt.landmark_count() {
        return Err(Error::shape("landmark count", gt.landmark_count(), pred.landmark_count()));
    }
    Ok(())
}

fn check_idx(idx: &[usize], l: usize) -> Result<()> {
    if idx.is_empty() {
        return Err(Error::EmptyInput("mouth index set"));
    }
    match idx.iter().find(|&&i| i >= l) {
        Some(&i) => Err(Error::shape("mouth index", format!("< {l}"), i)),
        None => Ok(()),
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Mean 2D distance between corresponding mouth landmarks.
pub fn lmd(pred: &LandmarkSequence, gt: &LandmarkSequence, mouth_idx: &[usize]) -> Result<f64> {
    same_shape(pred, gt)?;
    check_idx(mouth_idx, gt.landmark_count())?;
    let mut sum = 0.0;
    for (p, g) in pred.frames().iter().zip(gt.frames()) {
        for &i in mouth_idx {
            sum += dist2(p.points()[i], g.points()[i]);
        }
    }
    Ok(sum / (pred.len() * mouth_idx.len()) as f64)
}

/// [`lmd`] on frame-to-frame velocities.
pub fn lmd_v(pred: &LandmarkSequence, gt: &LandmarkSequence, mouth_idx: &[usize]) -> Result<f64> {
    same_shape(pred, gt)?;
    check_idx(mouth_idx, gt.landmark_count())?;
    if gt.len() < 2 {
        return Err(Error::shape("sequence length for velocity", ">= 2", gt.len()));
    }
    let (pf, gf) = (pred.frames(), gt.frames());
    let mut sum = 0.0;
    for t in 1..gf.len() {
        for &i in mouth_idx {
            let vp = sub(pf[t].points()[i], pf[t - 1].points()[i]);
            let vg = sub(gf[t].points()[i], gf[t - 1].points()[i]);
            sum += dist2(vp, vg);
        }
    }
    Ok(sum / ((gf.len() - 1) * mouth_idx.len()) as f64)
}

/// Per-frame mouth masks: convex hull of the mouth points on a `size` grid.
pub fn mouth_hull_masks(seq: &LandmarkSequence, mouth_idx: &[usize], size: usize) -> Result<Vec<Mask>> {
    check_idx(mouth_idx, seq.landmark_count())?;
    Ok(seq
        .frames()
        .iter()
        .map(|f| {
            let pts: Vec<[f64; 2]> = mouth_idx.iter().map(|&i| [f.points()[i][0], f.points()[i][1]]).collect();
            hull_mask(&pts, size)
        })
        .collect())
}

/// Mean per-frame IoU of two mask sequences.
pub fn mask_iou(pred: &[Mask], gt: &[Mask]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("mask sequence length", gt.len(), pred.len()));
    }
    if gt.is_empty() {
        return Err(Error::EmptyInput("mask sequence"));
    }
    if let Some((p, g)) = pred.iter().zip(gt).find(|(p, g)| p.size() != g.size()) {
        return Err(Error::shape("mask size", g.size(), p.size()));
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| p.iou(g)).sum::<f64>() / gt.len() as f64)
}

/// Mouth-area IoU of landmark sequences (the MA score).
pub fn mouth_iou(pred: &LandmarkSequence, gt: &LandmarkSequence, mouth_idx: &[usize], size: usize) -> Result<f64> {
    same_shape(pred, gt)?;
    mask_iou(&mouth_hull_masks(pred, mouth_idx, size)?, &mouth_hull_masks(gt, mouth_idx, size)?)
}

/// Mean 3D distance over all frames and points.
pub fn error_norm(pred: &LandmarkSequence, gt: &LandmarkSequence) -> Result<f64> {
    same_shape(pred, gt)?;
    let mut sum = 0.0;
    for (p, g) in pred.frames().iter().zip(gt.frames()) {
        for (a, b) in p.points().iter().zip(g.points()) {
            sum += dist3(*a, *b);
        }
    }
    Ok(sum / (pred.len() * pred.landmark_count()) as f64)
}

/// Mean norm of the second temporal difference over interior frames and all points.
pub fn jitter(seq: &LandmarkSequence) -> Result<f64> {
    if seq.len() < 3 {
        return Err(Error::shape("sequence length for jitter", ">= 3", seq.len()));
    }
    let f = seq.frames();
    let mut sum = 0.0;
    for t in 1..f.len() - 1 {
        for i in 0..seq.landmark_count() {
            let (a, b, c) = (f[t - 1].points()[i], f[t].points()[i], f[t + 1].points()[i]);
            let acc = [c[0] - 2.0 * b[0] + a[0], c[1] - 2.0 * b[1] + a[1], c[2] - 2.0 * b[2] + a[2]];
            sum += (acc[0] * acc[0] + acc[1] * acc[1] + acc[2] * acc[2]).sqrt();
        }
    }
    Ok(sum / ((f.len() - 2) * seq.landmark_count()) as f64)
}

/// Mean over consecutive pairs of `1 - mean |pixel difference|`.
pub fn frame_consistency(frames: &[FaceImage]) -> Result<f64> {
    if frames.len() < 2 {
        return Err(Error::shape("frame count for consistency", ">= 2", frames.len()));
    }
    let mut total = 0.0;
    for w in frames.windows(2) {
        if w[0].size() != w[1].size() {
            return Err(Error::shape("frame size", w[0].size(), w[1].size()));
        }
        let (a, b) = (w[0].pixels(), w[1].pixels());
        let mad = a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.len() as f64;
        total += 1.0 - mad;
    }
    Ok(total / (frames.len() - 1) as f64)
}

/// One labelled row of averaged metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRow {
    pub label: String,
    pub clips: usize,
    pub frames: usize,
    pub metrics: BTreeMap<String, f64>,
}

impl ReportRow {
    /// Averages per-clip metric maps; a metric missing from some clips is
    /// averaged over the clips that have it.
    pub fn from_clips(label: impl Into<String>, per_clip: &[BTreeMap<String, f64>], frames: usize) -> Result<Self> {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for m in per_clip {
            for (k, v) in m {
                if !v.is_finite() {
                    return Err(Error::NonFinite { what: format!("metric {k}"), step: 0 });
                }
                let e = sums.entry(k.clone()).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
        }
        Ok(Self {
            label: label.into(),
            clips: per_clip.len(),
            frames,
            metrics: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        })
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub rows: Vec<ReportRow>,
}

impl MetricReport {
    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// JSON with the first row's metrics also lifted to the top level.
    pub fn to_json(&self) -> serde_json::Value {
        let mut obj = serde_json::Map::new();
        if let Some(first) = self.rows.first() {
            for (k, v) in &first.metrics {
                obj.insert(k.clone(), serde_json::json!(v));
            }
        }
        obj.insert("rows".into(), serde_json::to_value(&self.rows).expect("rows serialize"));
        serde_json::Value::Object(obj)
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let rows = value
            .get("rows")
            .ok_or_else(|| Error::format("report", "missing \"rows\""))?;
        let rows: Vec<ReportRow> =
            serde_json::from_value(rows.clone()).map_err(|e| Error::format("report.rows", e.to_string()))?;
        Ok(Self { rows })
    }

    /// `label.metric = value` lines, plus clip and frame counts.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let _ = writeln!(s, "{}.clips = {}", r.label, r.clips);
            let _ = writeln!(s, "{}.frames = {}", r.label, r.frames);
            for (k, v) in &r.metrics {
                let _ = writeln!(s, "{}.{k} = {v:.6}", r.label);
            }
        }
        s
    }

    /// Writes `report.json` and `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(&self.to_json()).expect("report serializes");
        let p = dir.join("report.json");
        std::fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))?;
        let p = dir.join("report.txt");
        std::fs::write(&p, self.to_text()).map_err(|e| Error::io(&p, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&value)
    }
}
