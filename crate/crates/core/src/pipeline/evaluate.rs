use std::collections::BTreeMap;
use std::path::Path;

use super::checkpoint::Checkpoint;
use super::config::{EvalConfig, ExperimentConfig, InferConfig};
use super::infer::{infer, prepare_source, render_frames, StatsSource};
use super::train::{Trainer, TrainingSet};
use crate::error::{Error, Result};
use crate::geometry::LandmarkSequence;
use crate::imaging::FaceImage;
use crate::metrics::{
    error_norm, frame_consistency, jitter, lmd, lmd_v, mask_iou, mouth_iou, MetricReport, ReportRow,
    ERROR_NORM, FRAME_CONSISTENCY, JITTER, LMD, LMD_V, MA,
};
use crate::plot;
use crate::synthdata::{lip_opening, segment_mouth, ClipDataset, FaceLayout};

/// Mouth IoU of colour-segmented generated frames against the real frames.
pub const MA_IMAGE: &str = "ma_image";
/// Pearson correlation of generated lip opening with the driving articulation.
pub const LIP_CORRELATION: &str = "lip_corr";

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    let r = sab / (saa * sbb).sqrt();
    r.is_finite().then_some(r)
}

/// LMD, LMD-v and MA on image-space landmarks; ErrorNorm and Jitter on
/// canonical landmarks.
pub fn landmark_metrics(
    pred_image: &LandmarkSequence,
    gt_image: &LandmarkSequence,
    pred_canonical: &LandmarkSequence,
    gt_canonical: &LandmarkSequence,
    mouth_idx: &[usize],
    size: usize,
) -> Result<BTreeMap<String, f64>> {
    let mut m = BTreeMap::new();
    m.insert(LMD.into(), lmd(pred_image, gt_image, mouth_idx)?);
    m.insert(LMD_V.into(), lmd_v(pred_image, gt_image, mouth_idx)?);
    m.insert(MA.into(), mouth_iou(pred_image, gt_image, mouth_idx, size)?);
    m.insert(ERROR_NORM.into(), error_norm(pred_canonical, gt_canonical)?);
    m.insert(JITTER.into(), jitter(pred_canonical)?);
    Ok(m)
}

pub fn image_metrics(frames: &[FaceImage], gt_frames: &[FaceImage]) -> Result<BTreeMap<String, f64>> {
    if frames.len() != gt_frames.len() {
        return Err(Error::shape("frame count", gt_frames.len(), frames.len()));
    }
    let pred: Vec<_> = frames.iter().map(segment_mouth).collect();
    let gt: Vec<_> = gt_frames.iter().map(segment_mouth).collect();
    let mut m = BTreeMap::new();
    m.insert(MA_IMAGE.into(), mask_iou(&pred, &gt)?);
    m.insert(FRAME_CONSISTENCY.into(), frame_consistency(frames)?);
    Ok(m)
}

/// Lip opening per frame of a canonical sequence.
pub fn lip_track(seq: &LandmarkSequence) -> Result<Vec<f64>> {
    let layout = FaceLayout::new(seq.landmark_count())?;
    Ok(seq.frames().iter().map(|f| lip_opening(f, &layout)).collect())
}

/// Every metric of a clip scored against itself.
pub fn ground_truth_metrics(clip: &ClipDataset) -> Result<BTreeMap<String, f64>> {
    let canon = clip.canonical_landmarks()?;
    let mut m = landmark_metrics(&clip.landmarks, &clip.landmarks, &canon, &canon, &clip.mouth_idx, clip.image_size())?;
    m.extend(image_metrics(&clip.images, &clip.images)?);
    Ok(m)
}

/// Generated vs ground-truth lip opening of one evaluated clip.
#[derive(Debug, Clone, PartialEq)]
pub struct LipTrace {
    pub label: String,
    pub fps: f64,
    pub predicted: Vec<f64>,
    pub ground_truth: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub traces: Vec<LipTrace>,
}

fn eval_clips(clips: &[ClipDataset], cfg: &EvalConfig) -> Result<Vec<ClipDataset>> {
    if clips.is_empty() {
        return Err(Error::EmptyInput("evaluation clips"));
    }
    let n = cfg.max_clips.unwrap_or(clips.len()).min(clips.len());
    clips[..n]
        .iter()
        .map(|c| {
            let c = c.truncated(cfg.max_frames.unwrap_or(c.len()))?;
            if c.len() < 3 {
                return Err(Error::InvalidConfig(format!("evaluation needs >= 3 frames per clip, got {}", c.len())));
            }
            Ok(c)
        })
        .collect()
}

/// Runs inference on every clip for every labelled checkpoint (source =
/// the clip itself, driving audio = its own audio) and scores the result.
/// Yields one row per checkpoint, plus a `<label>/gt_landmarks` row when
/// enabled, in which L2I is conditioned on ground-truth landmarks.
pub fn evaluate(
    entries: &[(String, &Checkpoint)],
    clips: &[ClipDataset],
    cfg: &EvalConfig,
    opts: &InferConfig,
) -> Result<Evaluation> {
    let clips = eval_clips(clips, cfg)?;
    let mut report = MetricReport::default();
    let mut traces = Vec::new();
    for (label, ckpt) in entries {
        let mut per_clip = Vec::with_capacity(clips.len());
        let mut gt_rows = Vec::new();
        let mut frames = 0;
        for (k, clip) in clips.iter().enumerate() {
            let source = prepare_source(clip, StatsSource::FromClip)?;
            let out = infer(ckpt, &source, &clip.audio, opts)?;
            let gt_canon = clip.canonical_landmarks()?;
            let mut m = landmark_metrics(
                &out.landmarks,
                &clip.landmarks,
                &out.canonical,
                &gt_canon,
                &clip.mouth_idx,
                clip.image_size(),
            )?;
            m.extend(image_metrics(&out.frames, &clip.images)?);
            let predicted = lip_track(&out.canonical)?;
            if let Some(r) = pearson(&predicted, &clip.articulation) {
                m.insert(LIP_CORRELATION.into(), r);
            }
            if k == 0 {
                traces.push(LipTrace {
                    label: label.clone(),
                    fps: clip.fps(),
                    predicted,
                    ground_truth: lip_track(&gt_canon)?,
                });
            }
            per_clip.push(m);
            frames += clip.len();
            if cfg.ground_truth_landmark_row {
                let (gen, _) = render_frames(&ckpt.l2i, &ckpt.schedule()?, &source, &clip.landmarks, opts)?;
                gt_rows.push(image_metrics(&gen, &clip.images)?);
            }
        }
        report.rows.push(ReportRow::from_clips(label.clone(), &per_clip, frames)?);
        if cfg.ground_truth_landmark_row {
            report.rows.push(ReportRow::from_clips(format!("{label}/gt_landmarks"), &gt_rows, frames)?);
        }
    }
    Ok(Evaluation { report, traces })
}

/// Trains one model per reference interval and evaluates each; rows are
/// labelled `tau=<n>`.
pub fn tau_sweep(
    base: &ExperimentConfig,
    train: &TrainingSet,
    test: &[ClipDataset],
    taus: &[usize],
) -> Result<Evaluation> {
    let mut all = Evaluation {
        report: MetricReport::default(),
        traces: Vec::new(),
    };
    for &tau in taus {
        let mut cfg = base.clone();
        cfg.l2i.tau = tau;
        let mut trainer = Trainer::new(&cfg, train)?;
        trainer.run(None, |_| {})?;
        let e = evaluate(&[(format!("tau={tau}"), &trainer.state)], test, &cfg.eval, &cfg.infer)?;
        all.report.rows.extend(e.report.rows);
        all.traces.extend(e.traces);
    }
    Ok(all)
}

fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes `report.json`, `report.txt` and, with `plots`, one SVG per metric
/// plus a lip-opening overlay per trace.
pub fn write_evaluation(eval: &Evaluation, dir: &Path, plots: bool) -> Result<()> {
    eval.report.write(dir)?;
    if plots {
        plot::write_report_charts(&eval.report, dir)?;
        for t in &eval.traces {
            let svg = plot::lip_opening_chart(&t.label, &t.predicted, &t.ground_truth, t.fps)?;
            plot::write_text(&dir.join(format!("lip_opening_{}.svg", file_stem(&t.label))), &svg)?;
        }
    }
    Ok(())
}
