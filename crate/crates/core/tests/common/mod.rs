//! Brute-force metric oracles and random instances shared by the metric
//! tests and the acceptance run.

#![allow(dead_code)]

use dreamhead_core::geometry::{LandmarkFrame, LandmarkSequence};
use dreamhead_core::imaging::FaceImage;
use rand::Rng;

pub struct Instance {
    pub pred: LandmarkSequence,
    pub gt: LandmarkSequence,
    pub mouth_idx: Vec<usize>,
    pub size: usize,
    pub frames_a: Vec<FaceImage>,
}

pub fn random_instance<R: Rng>(rng: &mut R) -> Instance {
    let t = rng.gen_range(3..9);
    let l = rng.gen_range(6..14);
    let size = rng.gen_range(8..24);
    let s = size as f64;
    let seq = |rng: &mut R| {
        let frames = (0..t)
            .map(|_| {
                let pts = (0..l)
                    .map(|_| [rng.gen_range(0.1 * s..0.9 * s), rng.gen_range(0.1 * s..0.9 * s), rng.gen_range(-3.0..3.0)])
                    .collect();
                LandmarkFrame::new(pts).unwrap()
            })
            .collect();
        LandmarkSequence::new(frames, 25.0).unwrap()
    };
    let pred = seq(rng);
    let gt = seq(rng);
    let k = rng.gen_range(3..=l);
    let mut idx: Vec<usize> = (0..l).collect();
    for i in 0..k {
        let j = rng.gen_range(i..l);
        idx.swap(i, j);
    }
    idx.truncate(k);
    let img = 6;
    let frames_a = (0..t)
        .map(|_| FaceImage::from_pixels(img, (0..img * img * 3).map(|_| rng.gen_range(0.0f32..1.0)).collect()).unwrap())
        .collect();
    Instance {
        pred,
        gt,
        mouth_idx: idx,
        size,
        frames_a,
    }
}

fn p(seq: &LandmarkSequence, t: usize, i: usize) -> [f64; 3] {
    seq.frames()[t].points()[i]
}

pub fn brute_lmd(pred: &LandmarkSequence, gt: &LandmarkSequence, idx: &[usize]) -> f64 {
    let mut terms = Vec::new();
    for t in 0..gt.len() {
        for &i in idx {
            let (a, b) = (p(pred, t, i), p(gt, t, i));
            terms.push(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
        }
    }
    terms.iter().sum::<f64>() / terms.len() as f64
}

pub fn brute_lmd_v(pred: &LandmarkSequence, gt: &LandmarkSequence, idx: &[usize]) -> f64 {
    let mut terms = Vec::new();
    for t in 1..gt.len() {
        for &i in idx {
            let d = |s: &LandmarkSequence, k: usize| p(s, t, i)[k] - p(s, t - 1, i)[k];
            terms.push(((d(pred, 0) - d(gt, 0)).powi(2) + (d(pred, 1) - d(gt, 1)).powi(2)).sqrt());
        }
    }
    terms.iter().sum::<f64>() / terms.len() as f64
}

pub fn brute_error_norm(pred: &LandmarkSequence, gt: &LandmarkSequence) -> f64 {
    let mut terms = Vec::new();
    for t in 0..gt.len() {
        for i in 0..gt.landmark_count() {
            let (a, b) = (p(pred, t, i), p(gt, t, i));
            terms.push((0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt());
        }
    }
    terms.iter().sum::<f64>() / terms.len() as f64
}

pub fn brute_jitter(seq: &LandmarkSequence) -> f64 {
    let mut terms = Vec::new();
    for t in 1..seq.len() - 1 {
        for i in 0..seq.landmark_count() {
            let acc: Vec<f64> = (0..3).map(|k| p(seq, t + 1, i)[k] - 2.0 * p(seq, t, i)[k] + p(seq, t - 1, i)[k]).collect();
            terms.push(acc.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
    }
    terms.iter().sum::<f64>() / terms.len() as f64
}

fn strictly_in_triangle(q: [f64; 2], a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> bool {
    let cr = |o: [f64; 2], u: [f64; 2]| (u[0] - o[0]) * (q[1] - o[1]) - (u[1] - o[1]) * (q[0] - o[0]);
    let (d1, d2, d3) = (cr(a, b), cr(b, c), cr(c, a));
    (d1 > 0.0 && d2 > 0.0 && d3 > 0.0) || (d1 < 0.0 && d2 < 0.0 && d3 < 0.0)
}

/// Pixel-center membership in the convex hull, by searching every triangle
/// of the point set.
pub fn brute_hull_pixels(pts: &[[f64; 2]], size: usize) -> Vec<bool> {
    let mut out = vec![false; size * size];
    for r in 0..size {
        for c in 0..size {
            let q = [c as f64, r as f64];
            'search: for i in 0..pts.len() {
                for j in i + 1..pts.len() {
                    for k in j + 1..pts.len() {
                        if strictly_in_triangle(q, pts[i], pts[j], pts[k]) {
                            out[r * size + c] = true;
                            break 'search;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn brute_ma(pred: &LandmarkSequence, gt: &LandmarkSequence, idx: &[usize], size: usize) -> f64 {
    let mut total = 0.0;
    for t in 0..gt.len() {
        let pts = |s: &LandmarkSequence| idx.iter().map(|&i| [p(s, t, i)[0], p(s, t, i)[1]]).collect::<Vec<_>>();
        let (a, b) = (brute_hull_pixels(&pts(pred), size), brute_hull_pixels(&pts(gt), size));
        let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
        let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
        total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    total / gt.len() as f64
}

pub fn brute_frame_consistency(frames: &[FaceImage]) -> f64 {
    let mut total = 0.0;
    for t in 1..frames.len() {
        let (a, b) = (&frames[t - 1], &frames[t]);
        let n = a.size();
        let mut diff = 0.0;
        for r in 0..n {
            for c in 0..n {
                let (x, y) = (a.get(r, c), b.get(r, c));
                diff += (0..3).map(|k| (x[k] as f64 - y[k] as f64).abs()).sum::<f64>();
            }
        }
        total += 1.0 - diff / (n * n * 3) as f64;
    }
    total / (frames.len() - 1) as f64
}

/// Largest absolute difference between each metric and its oracle on one instance.
pub fn oracle_gaps(inst: &Instance) -> [(&'static str, f64); 6] {
    use dreamhead_core::metrics::*;
    let Instance { pred, gt, mouth_idx, size, frames_a } = inst;
    [
        ("lmd", (lmd(pred, gt, mouth_idx).unwrap() - brute_lmd(pred, gt, mouth_idx)).abs()),
        ("lmd_v", (lmd_v(pred, gt, mouth_idx).unwrap() - brute_lmd_v(pred, gt, mouth_idx)).abs()),
        ("ma", (mouth_iou(pred, gt, mouth_idx, *size).unwrap() - brute_ma(pred, gt, mouth_idx, *size)).abs()),
        ("error_norm", (error_norm(pred, gt).unwrap() - brute_error_norm(pred, gt)).abs()),
        ("jitter", (jitter(pred).unwrap() - brute_jitter(pred)).abs()),
        ("frame_consistency", (frame_consistency(frames_a).unwrap() - brute_frame_consistency(frames_a)).abs()),
    ]
}
