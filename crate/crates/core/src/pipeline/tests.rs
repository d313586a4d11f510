use super::*;
use crate::geometry::{LandmarkFrame, LandmarkSequence};
use crate::metrics::{jitter, FRAME_CONSISTENCY, LMD, MA};
use crate::synthdata::{generate_clip, ClipDataset, GeneratorConfig};

pub(crate) fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.generator.landmarks = 12;
    cfg.generator.image_size = 16;
    cfg.generator.frames = 12;
    cfg.a2l.landmarks = 12;
    cfg.a2l.hidden = 8;
    cfg.a2l.blocks = 2;
    cfg.a2l.window = 6;
    cfg.l2i.image_size = 16;
    cfg.l2i.unet.base_channels = 4;
    cfg.l2i.unet.time_dim = 4;
    cfg.l2i.tau = 3;
    cfg.schedule.steps = 20;
    cfg.train.steps = 3;
    cfg.train.a2l_batch = 2;
    cfg.train.l2i_batch = 2;
    cfg.train.checkpoint_every = 2;
    cfg.infer.l2i_stride = 5;
    cfg.infer.frame_batch = 3;
    cfg
}

pub(crate) fn tiny_clip(cfg: &ExperimentConfig, seed: u64) -> ClipDataset {
    generate_clip(&GeneratorConfig { seed, ..cfg.generator.clone() }).unwrap()
}

pub(crate) fn tiny_data(cfg: &ExperimentConfig, n: u64) -> TrainingSet {
    TrainingSet::new((0..n).map(|s| tiny_clip(cfg, s)).collect()).unwrap()
}

fn trained(cfg: &ExperimentConfig) -> Checkpoint {
    let data = tiny_data(cfg, 2);
    let mut t = Trainer::new(cfg, &data).unwrap();
    t.run(None, |_| {}).unwrap();
    t.state
}

fn constant_window(len: usize, v: f64) -> LandmarkSequence {
    let f = LandmarkFrame::new(vec![[v, -v, 2.0 * v]; 4]).unwrap();
    LandmarkSequence::new(vec![f; len], 25.0).unwrap()
}

fn ramp_window(start: usize, len: usize) -> LandmarkSequence {
    let frames = (start..start + len)
        .map(|i| LandmarkFrame::new(vec![[i as f64, 0.5 * i as f64, 1.0]; 4]).unwrap())
        .collect();
    LandmarkSequence::new(frames, 25.0).unwrap()
}

#[test]
fn window_layout() {
    assert_eq!(window_starts(20, 20, 5).unwrap(), [0]);
    assert_eq!(window_starts(7, 20, 5).unwrap(), [0]);
    assert_eq!(window_starts(50, 20, 5).unwrap(), [0, 15, 30]);
    assert_eq!(window_starts(100, 20, 5).unwrap(), [0, 15, 30, 45, 60, 75, 80]);
    assert!(window_starts(100, 20, 20).is_err());
}

#[test]
fn single_window_passes_through() {
    let w = ramp_window(0, 6);
    assert_eq!(window_stitch(&[w.clone()], 1, 6).unwrap(), w);
    assert!(window_stitch(&[w.clone()], 6, 6).is_err());
    assert!(window_stitch(&[], 1, 6).is_err());
}

#[test]
fn identical_windows_stitch_to_the_same_values() {
    let w = constant_window(8, 1.5);
    let starts = window_starts(20, 8, 2).unwrap();
    let windows = vec![w.clone(); starts.len()];
    let s = window_stitch(&windows, 2, 20).unwrap();
    assert_eq!(s.len(), 20);
    for f in s.frames() {
        for (p, q) in f.points().iter().zip(w.frames()[0].points()) {
            for k in 0..3 {
                assert!((p[k] - q[k]).abs() < 1e-12);
            }
        }
    }
    assert!(jitter(&s).unwrap() <= jitter(&w).unwrap() + 1e-6);
}

#[test]
fn windows_cut_from_one_linear_track_rebuild_it() {
    let (total, l, o) = (23, 8, 2);
    let windows: Vec<_> = window_starts(total, l, o).unwrap().iter().map(|&s| ramp_window(s, l)).collect();
    let s = window_stitch(&windows, o, total).unwrap();
    let truth = ramp_window(0, total);
    for (a, b) in s.to_flat().iter().zip(truth.to_flat()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn cross_fade_is_linear_between_windows() {
    let windows = vec![constant_window(4, 0.0), constant_window(4, 3.0)];
    let s = window_stitch(&windows, 2, 6).unwrap();
    let xs: Vec<f64> = s.frames().iter().map(|f| f.points()[0][0]).collect();
    assert_eq!(xs, [0.0, 0.0, 1.0, 2.0, 3.0, 3.0]);
}

#[test]
fn inference_contract() {
    let cfg = tiny_config();
    let ckpt = trained(&cfg);
    let clip = tiny_clip(&cfg, 9);
    let source = prepare_source(&clip, StatsSource::FromClip).unwrap();
    let audio = clip.audio.window(0, 10).unwrap();
    let out = infer(&ckpt, &source, &audio, &cfg.infer).unwrap();
    assert_eq!(out.frames.len(), 10);
    assert_eq!(out.landmarks.len(), 10);
    assert_eq!(out.canonical.len(), 10);
    assert_eq!(out, infer(&ckpt, &source, &audio, &cfg.infer).unwrap());

    let mut batched = cfg.infer.clone();
    batched.frame_batch = 1;
    assert_eq!(out, infer(&ckpt, &source, &audio, &batched).unwrap());

    let mut reseeded = cfg.infer.clone();
    reseeded.seed = 1;
    assert_ne!(out.frames, infer(&ckpt, &source, &audio, &reseeded).unwrap().frames);

    for (i, f) in out.frames.iter().enumerate() {
        let src = &clip.images[i];
        let mask = crate::l2i::mouth_region_mask(&out.landmarks.frames()[i], 16, cfg.l2i.mask_margin);
        for r in 0..16 {
            for c in 0..16 {
                if !mask.get(r, c) {
                    assert_eq!(f.get(r, c), src.get(r, c));
                }
            }
        }
    }
}

#[test]
fn audio_length_sets_output_length() {
    let cfg = tiny_config();
    let ckpt = trained(&cfg);
    let clip = tiny_clip(&cfg, 3);
    let source = prepare_source(&clip, StatsSource::FromClip).unwrap();
    // shorter than one window, and longer than the source clip
    for n in [1, 4, 12] {
        let audio = clip.audio.window(0, n).unwrap();
        assert_eq!(infer(&ckpt, &source, &audio, &cfg.infer).unwrap().frames.len(), n);
    }
    let long = crate::a2l::AudioFeatureSequence::new(
        clip.audio.features().repeat(2),
        clip.audio.dim(),
        clip.audio.fps(),
    )
    .unwrap();
    assert_eq!(infer(&ckpt, &source, &long, &cfg.infer).unwrap().frames.len(), 24);
    assert_eq!(source.frame_index(11), 11);
    assert_eq!(source.frame_index(12), 10);
    assert_eq!(source.frame_index(22), 0);
}

#[test]
fn driven_frame_landmarks_are_never_read() {
    let cfg = tiny_config();
    let ckpt = trained(&cfg);
    let clip = tiny_clip(&cfg, 4);
    let stats_source = prepare_source(&clip, StatsSource::FromClip).unwrap();
    let reads = &stats_source.landmark_reads;
    assert!(reads.iter().all(|r| r.purpose == LandmarkPurpose::Statistics || r.frame == 0));
    assert_eq!(reads.iter().filter(|r| r.purpose == LandmarkPurpose::Reference).count(), 1);

    // with the statistics given, scrambling the landmarks of every frame but
    // the reference changes nothing
    let provided = StatsSource::Provided(stats_source.stats.clone());
    let a = prepare_source(&clip, provided.clone()).unwrap();
    assert!(a.landmark_reads.iter().all(|r| r.frame == 0));
    let mut scrambled = clip.clone();
    let frames: Vec<_> = scrambled
        .landmarks
        .frames()
        .iter()
        .enumerate()
        .map(|(i, f)| if i == 0 { f.clone() } else { f.map_points(|k, p| [p[0] + k as f64, p[1] - 3.0, p[2]]) })
        .collect();
    scrambled.landmarks = LandmarkSequence::new(frames, clip.fps()).unwrap();
    let b = prepare_source(&scrambled, provided).unwrap();
    let out_a = infer(&ckpt, &a, &clip.audio, &cfg.infer).unwrap();
    let out_b = infer(&ckpt, &b, &clip.audio, &cfg.infer).unwrap();
    assert_eq!(out_a, out_b);
}

#[test]
fn single_frame_source_modes() {
    let cfg = tiny_config();
    let ckpt = trained(&cfg);
    let clip = tiny_clip(&cfg, 5);
    let audio = clip.audio.window(0, 7).unwrap();
    let random = StatsSource::SingleFrame {
        frame: 2,
        std: StdInit::Random { seed: 3, scale: 0.01 },
    };
    let s = prepare_source(&clip, random).unwrap();
    assert_eq!(s.images.len(), 1);
    assert!(s.landmark_reads.iter().all(|r| r.frame == 2));
    let out = infer(&ckpt, &s, &audio, &cfg.infer).unwrap();
    assert_eq!(out.frames.len(), 7);
    assert!(out.canonical.to_flat().iter().all(|v| v.is_finite()));

    let other = prepare_source(&tiny_clip(&cfg, 6), StatsSource::FromClip).unwrap();
    let borrowed = StatsSource::SingleFrame {
        frame: 0,
        std: StdInit::Provided(other.stats.std().to_vec()),
    };
    let s = prepare_source(&clip, borrowed).unwrap();
    assert_eq!(infer(&ckpt, &s, &audio, &cfg.infer).unwrap().frames.len(), 7);
    assert!(prepare_source(&clip, StatsSource::SingleFrame { frame: 99, std: StdInit::Provided(vec![]) }).is_err());
}

#[test]
fn regression_objective_infers_deterministically() {
    let mut cfg = tiny_config();
    cfg.a2l.objective = crate::a2l::A2lObjective::Regression;
    let ckpt = trained(&cfg);
    let clip = tiny_clip(&cfg, 7);
    let source = prepare_source(&clip, StatsSource::FromClip).unwrap();
    let mut other_seed = cfg.infer.clone();
    other_seed.seed = 11;
    let a = infer(&ckpt, &source, &clip.audio, &cfg.infer).unwrap();
    let b = infer(&ckpt, &source, &clip.audio, &other_seed).unwrap();
    assert_eq!(a.canonical, b.canonical);
}

#[test]
fn ground_truth_scores_perfectly() {
    let cfg = tiny_config();
    let m = ground_truth_metrics(&tiny_clip(&cfg, 1)).unwrap();
    for k in [LMD, crate::metrics::LMD_V, crate::metrics::ERROR_NORM] {
        assert_eq!(m[k], 0.0, "{k}");
    }
    assert_eq!(m[MA], 1.0);
    assert_eq!(m[MA_IMAGE], 1.0);
    assert!(m[FRAME_CONSISTENCY] > 0.5);
}

#[test]
fn evaluation_rows_and_keys() {
    let cfg = tiny_config();
    let full = trained(&cfg);
    let none = trained(&cfg.with_ablation(crate::l2i::ConditionAblation::Unconditional));
    let clips = vec![tiny_clip(&cfg, 20), tiny_clip(&cfg, 21)];
    let mut ecfg = cfg.eval.clone();
    ecfg.max_frames = Some(8);
    let e = evaluate(
        &[("full".into(), &full), ("unconditional".into(), &none)],
        &clips,
        &ecfg,
        &cfg.infer,
    )
    .unwrap();
    let labels: Vec<_> = e.report.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["full", "full/gt_landmarks", "unconditional", "unconditional/gt_landmarks"]);
    let json = e.report.to_json();
    for k in [LMD, crate::metrics::LMD_V, MA, crate::metrics::ERROR_NORM, crate::metrics::JITTER, FRAME_CONSISTENCY] {
        assert!(json[k].is_f64(), "missing {k}");
    }
    assert_eq!(e.report.rows[0].frames, 16);
    assert_eq!(e.traces.len(), 2);
    assert_eq!(e.traces[0].predicted.len(), 8);

    let dir = tempfile::tempdir().unwrap();
    write_evaluation(&e, dir.path(), true).unwrap();
    for f in ["report.json", "report.txt", "metric_lmd.svg", "lip_opening_full.svg"] {
        assert!(std::fs::metadata(dir.path().join(f)).unwrap().len() > 0, "{f}");
    }
}

#[test]
fn tau_sweep_emits_one_row_per_interval() {
    let mut cfg = tiny_config();
    cfg.train.steps = 1;
    cfg.eval.max_frames = Some(6);
    cfg.eval.ground_truth_landmark_row = false;
    let data = tiny_data(&cfg, 1);
    let e = tau_sweep(&cfg, &data, &[tiny_clip(&cfg, 30)], &[1, 2, 4]).unwrap();
    let labels: Vec<_> = e.report.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["tau=1", "tau=2", "tau=4"]);
    let keys: Vec<_> = e.report.rows.iter().map(|r| r.metrics.keys().cloned().collect::<Vec<_>>()).collect();
    assert!(keys.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn progression_ends_at_the_generated_frame() {
    let cfg = tiny_config();
    let ckpt = trained(&cfg);
    let clip = tiny_clip(&cfg, 8);
    let source = prepare_source(&clip, StatsSource::FromClip).unwrap();
    let audio = clip.audio.window(0, 5).unwrap();
    let out = infer(&ckpt, &source, &audio, &cfg.infer).unwrap();
    let steps = frame_progression(&ckpt, &source, &out.landmarks, 3, &cfg.infer, 3).unwrap();
    assert_eq!(steps.len(), 3);
    assert_eq!(steps.last().unwrap(), &out.frames[3]);
    assert!(frame_progression(&ckpt, &source, &out.landmarks, 5, &cfg.infer, 3).is_err());
}
