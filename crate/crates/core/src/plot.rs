//! Minimal SVG charts and PNG image strips for reports and logs.

use std::fmt::Write as _;
use std::path::Path;

use crate::ddpm::{sample_traced, NoiseSchedule};
use crate::error::{Error, Result};
use crate::imaging::FaceImage;
use crate::l2i::{FrameRequest, LatentImage, L2iModel};
use crate::metrics::MetricReport;
use crate::pipeline::StepRecord;

const W: f64 = 640.0;
const H: f64 = 360.0;
const MARGIN: [f64; 4] = [48.0, 24.0, 40.0, 64.0]; // top, right, bottom, left
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    s
}

fn range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        return None;
    }
    if hi - lo < 1e-12 {
        let pad = lo.abs().max(1.0) * 0.05;
        return Some((lo - pad, hi + pad));
    }
    Some((lo, hi))
}

/// Line chart of one or more series sharing both axes.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<String> {
    let pts = || series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (Some((x0, x1)), Some((y0, y1))) = (range(pts().map(|p| p.0)), range(pts().map(|p| p.1))) else {
        return Err(Error::EmptyInput("chart data"));
    };
    let [top, right, bottom, left] = MARGIN;
    let (pw, ph) = (W - left - right, H - top - bottom);
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;
    let mut s = header(title);
    let _ = writeln!(
        s,
        r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(xv),
            top + ph + 16.0,
            fmt_tick(xv)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            sy(yv) + 4.0,
            fmt_tick(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        H - 8.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (k, ser) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let path: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        let ly = top + 14.0 + 16.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            left + pw - 150.0,
            left + pw - 130.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
            left + pw - 124.0,
            ly + 4.0,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn fmt_tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-3..1e4).contains(&a) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// One bar per label.
pub fn bar_chart(title: &str, labels: &[String], values: &[f64]) -> Result<String> {
    if labels.is_empty() || labels.len() != values.len() {
        return Err(Error::EmptyInput("bar chart data"));
    }
    let hi = values.iter().cloned().fold(0.0_f64, f64::max);
    let lo = values.iter().cloned().fold(0.0_f64, f64::min);
    let span = if hi - lo > 1e-12 { hi - lo } else { 1.0 };
    let [top, right, bottom, left] = MARGIN;
    let (pw, ph) = (W - left - right, H - top - bottom - 40.0);
    let sy = |y: f64| top + ph - (y - lo) / span * ph;
    let slot = pw / labels.len() as f64;
    let mut s = header(title);
    let _ = writeln!(
        s,
        r##"<line x1="{left}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#444"/>"##,
        sy(0.0),
        left + pw,
        sy(0.0)
    );
    for (k, (label, &v)) in labels.iter().zip(values).enumerate() {
        let x = left + slot * k as f64 + slot * 0.15;
        let (y_a, y_b) = (sy(v.max(0.0)), sy(v.min(0.0)));
        let _ = writeln!(
            s,
            r#"<rect x="{x:.1}" y="{y_a:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
            slot * 0.7,
            (y_b - y_a).max(0.5),
            COLORS[k % COLORS.len()]
        );
        let cx = x + slot * 0.35;
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            y_a - 4.0,
            fmt_tick(v)
        );
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="end" transform="rotate(-30 {cx:.1} {:.1})">{}</text>"#,
            top + ph + 18.0,
            top + ph + 18.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Training losses against step.
pub fn loss_chart(records: &[StepRecord]) -> Result<String> {
    let pick = |f: fn(&StepRecord) -> Option<f64>, label: &str| Series {
        label: label.into(),
        points: records.iter().filter_map(|r| f(r).map(|v| (r.step as f64, v))).collect(),
    };
    let series: Vec<Series> = [pick(|r| r.loss_a2l, "a2l"), pick(|r| r.loss_l2i, "l2i")]
        .into_iter()
        .filter(|s| !s.points.is_empty())
        .collect();
    if series.is_empty() {
        return Err(Error::EmptyInput("training log"));
    }
    line_chart("Training loss", "step", "loss", &series)
}

/// Generated and ground-truth lip opening over time.
pub fn lip_opening_chart(label: &str, predicted: &[f64], ground_truth: &[f64], fps: f64) -> Result<String> {
    let series = |name: &str, v: &[f64]| Series {
        label: name.into(),
        points: v.iter().enumerate().map(|(i, &y)| (i as f64 / fps, y)).collect(),
    };
    let mut all = vec![series("ground truth", ground_truth)];
    if !predicted.is_empty() {
        all.push(series("generated", predicted));
    }
    line_chart(&format!("Lip opening: {label}"), "seconds", "opening", &all)
}

/// `(file name, svg)` per metric, with one bar per report row.
pub fn report_charts(report: &MetricReport) -> Result<Vec<(String, String)>> {
    if report.is_empty() {
        return Err(Error::EmptyInput("report has no rows"));
    }
    let mut keys: Vec<&String> = report.rows.iter().flat_map(|r| r.metrics.keys()).collect();
    keys.sort();
    keys.dedup();
    if keys.is_empty() {
        return Err(Error::EmptyInput("report has no metrics"));
    }
    keys.into_iter()
        .map(|k| {
            let (labels, values): (Vec<String>, Vec<f64>) =
                report.rows.iter().filter_map(|r| r.get(k).map(|v| (r.label.clone(), v))).unzip();
            Ok((format!("metric_{k}.svg"), bar_chart(k, &labels, &values)?))
        })
        .collect()
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_report_charts(report: &MetricReport, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    report_charts(report)?
        .into_iter()
        .map(|(name, svg)| {
            let p = dir.join(name);
            write_text(&p, &svg)?;
            Ok(p)
        })
        .collect()
}

/// Frames side by side with a 2-pixel white gutter.
pub fn save_strip(frames: &[FaceImage], path: &Path) -> Result<()> {
    let first = frames.first().ok_or(Error::EmptyInput("strip frames"))?;
    let size = first.size();
    if frames.iter().any(|f| f.size() != size) {
        return Err(Error::shape("strip frame size", size, "mixed sizes"));
    }
    let gap = 2;
    let width = frames.len() * size + (frames.len() - 1) * gap;
    let mut img = image::RgbImage::from_pixel(width as u32, size as u32, image::Rgb([255, 255, 255]));
    for (k, f) in frames.iter().enumerate() {
        let rgb = f.to_rgb8();
        for r in 0..size {
            for c in 0..size {
                let o = (r * size + c) * 3;
                img.put_pixel((k * (size + gap) + c) as u32, r as u32, image::Rgb([rgb[o], rgb[o + 1], rgb[o + 2]]));
            }
        }
    }
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Predicted clean frames at `count` roughly evenly spaced points of the
/// reverse chain (noisiest first), each composited like the final frame.
pub fn denoise_progression<N: crate::ddpm::NoiseSource>(
    model: &L2iModel,
    request: &FrameRequest,
    sched: &NoiseSchedule,
    noise: &mut N,
    stride: usize,
    count: usize,
) -> Result<Vec<FaceImage>> {
    let [h, w, c] = request.cond.shape()?;
    let ladder = sched.ladder(stride)?;
    let count = count.clamp(1, ladder.len());
    let keep: Vec<usize> = (0..count)
        .map(|k| ladder[k * (ladder.len() - 1) / (count - 1).max(1)])
        .collect();
    let mut traced = Vec::new();
    sample_traced(model, &[1, h, w, c], std::slice::from_ref(&request.cond), sched, noise, stride, |t, x0| {
        if keep.contains(&t) {
            traced.push(x0.to_vec());
        }
    })?;
    traced
        .into_iter()
        .map(|x0| {
            let img = model.codec().decode(&LatentImage::new(h, w, c, x0)?)?.quantized();
            request.source.composite(&img, &request.mask)
        })
        .collect()
}
