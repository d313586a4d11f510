use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use crate::a2l::{A2lCondition, A2lModel, AudioFeatureSequence};
use crate::ddpm::NoiseSchedule;
use crate::error::{Error, Result};
use crate::geometry::{compute_stats, normalize_sequence, LandmarkFrame};
use crate::l2i::{select_reference, Codec, CodecKind, L2iConditionSet, L2iModel, ReferenceMode};
use crate::nn::{Adam, Grads};
use crate::synthdata::ClipDataset;

const A2L_INIT_SALT: u64 = 0xa2_1000;
const L2I_INIT_SALT: u64 = 0x12_1000;
const LOOP_SALT: u64 = 0x700b;

/// Per-clip landmark-stage training material.
#[derive(Debug, Clone)]
struct A2lClip {
    /// Normalized canonical landmarks, `T × 3L`.
    normalized: Vec<f64>,
    mean: LandmarkFrame,
    audio: AudioFeatureSequence,
}

/// Training clips plus everything derived from them once.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    clips: Vec<ClipDataset>,
    a2l: Vec<A2lClip>,
}

impl TrainingSet {
    pub fn new(clips: Vec<ClipDataset>) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::EmptyInput("training clips"));
        }
        let mut a2l = Vec::with_capacity(clips.len());
        for clip in &clips {
            clip.validate()?;
            let canon = clip.canonical_landmarks()?;
            let stats = compute_stats(&canon)?;
            a2l.push(A2lClip {
                normalized: normalize_sequence(&canon, &stats)?.to_flat(),
                mean: stats.mean().clone(),
                audio: clip.audio.clone(),
            });
        }
        Ok(Self { clips, a2l })
    }

    pub fn clips(&self) -> &[ClipDataset] {
        &self.clips
    }

    /// Checks that every clip fits the configured models.
    pub fn check(&self, cfg: &ExperimentConfig) -> Result<()> {
        for (k, clip) in self.clips.iter().enumerate() {
            let mismatch = |what: &str, want: usize, got: usize| {
                Err(Error::InvalidConfig(format!(
                    "clip {k}: {what} is {got} but the config expects {want}"
                )))
            };
            if clip.landmark_count() != cfg.a2l.landmarks {
                return mismatch("landmark count", cfg.a2l.landmarks, clip.landmark_count());
            }
            if clip.audio.dim() != cfg.a2l.audio_dim {
                return mismatch("audio dimension", cfg.a2l.audio_dim, clip.audio.dim());
            }
            if clip.image_size() != cfg.l2i.image_size {
                return mismatch("image size", cfg.l2i.image_size, clip.image_size());
            }
            if clip.len() < cfg.a2l.window {
                return mismatch("frame count (at least one window)", cfg.a2l.window, clip.len());
            }
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss_a2l: Option<f64>,
    pub loss_l2i: Option<f64>,
    pub wall_time: f64,
}

pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(format!("log line {}", i + 1), e.to_string())))
        .collect()
}

impl Checkpoint {
    /// Fresh models and optimizers; PCA codecs are fitted on the training frames.
    pub fn initialize(config: &ExperimentConfig, data: &TrainingSet) -> Result<Self> {
        config.validate()?;
        data.check(config)?;
        let codec = match config.l2i.codec {
            CodecKind::Patch => Codec::patch(config.l2i.factor),
            CodecKind::Pca => {
                let frames: Vec<_> = data.clips.iter().flat_map(|c| c.images.iter().cloned()).collect();
                Codec::fit_pca(config.l2i.factor, &frames)?
            }
        };
        let a2l = A2lModel::new(config.a2l.clone(), config.seed ^ A2L_INIT_SALT)?;
        let l2i = L2iModel::new(config.l2i.clone(), codec, config.seed ^ L2I_INIT_SALT)?;
        Ok(Self {
            a2l_opt: Adam::new(config.train.a2l_optimizer, a2l.params()),
            l2i_opt: Adam::new(config.train.l2i_optimizer, l2i.params()),
            config: config.clone(),
            step: 0,
            a2l,
            l2i,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ LOOP_SALT),
        })
    }
}

fn check_finite(loss: f64, grads: &Grads, what: &str, step: u64) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFinite { what: format!("{what} loss ({loss})"), step });
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite { what: format!("{what} gradient"), step });
    }
    Ok(())
}

fn a2l_batch<R: Rng>(data: &TrainingSet, window: usize, batch: usize, rng: &mut R) -> Result<(Vec<f64>, Vec<A2lCondition>)> {
    let mut x0 = Vec::new();
    let mut conds = Vec::with_capacity(batch);
    for _ in 0..batch {
        let c = &data.a2l[rng.gen_range(0..data.a2l.len())];
        let len = c.audio.len();
        let start = rng.gen_range(0..=len - window);
        let per = c.normalized.len() / len;
        x0.extend_from_slice(&c.normalized[start * per..(start + window) * per]);
        conds.push(A2lCondition {
            audio: c.audio.window(start, window)?,
            mean_landmarks: c.mean.clone(),
        });
    }
    Ok((x0, conds))
}

fn l2i_batch<R: Rng>(
    data: &TrainingSet,
    model: &L2iModel,
    batch: usize,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<L2iConditionSet>)> {
    let mut x0 = Vec::new();
    let mut conds = Vec::with_capacity(batch);
    for _ in 0..batch {
        let clip = &data.clips[rng.gen_range(0..data.clips.len())];
        let i = rng.gen_range(0..clip.len());
        let (_, ref_img, ref_frame) = select_reference(clip, i, model.config().tau, ReferenceMode::Train)?;
        let target = &clip.images[i];
        let (cond, _) =
            model.build_conditions(target, &clip.landmarks.frames()[i], ref_img, ref_frame, &clip.mouth_idx)?;
        x0.extend(model.codec().encode(target)?.into_data());
        conds.push(cond);
    }
    Ok((x0, conds))
}

/// Alternating-batch trainer over a fixed training set.
pub struct Trainer<'d> {
    pub state: Checkpoint,
    sched: NoiseSchedule,
    data: &'d TrainingSet,
    started: Instant,
}

impl<'d> Trainer<'d> {
    pub fn new(config: &ExperimentConfig, data: &'d TrainingSet) -> Result<Self> {
        Self::resume(Checkpoint::initialize(config, data)?, data)
    }

    pub fn resume(state: Checkpoint, data: &'d TrainingSet) -> Result<Self> {
        data.check(&state.config)?;
        Ok(Self {
            sched: state.schedule()?,
            state,
            data,
            started: Instant::now(),
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    /// One A2L batch then one L2I batch (each if enabled), then the optimizer updates.
    pub fn step(&mut self) -> Result<StepRecord> {
        let s = &mut self.state;
        let tc = s.config.train.clone();
        let step = s.step + 1;
        let mut loss_a2l = None;
        let mut loss_l2i = None;
        if tc.train_a2l {
            let (x0, conds) = a2l_batch(self.data, s.config.a2l.window, tc.a2l_batch, &mut s.rng)?;
            let (loss, grads) = s.a2l.training_step(&x0, &conds, &self.sched, tc.loss, &mut s.rng)?;
            check_finite(loss, &grads, "a2l", step)?;
            s.a2l_opt.update(s.a2l.params_mut(), &grads);
            loss_a2l = Some(loss);
        }
        if tc.train_l2i {
            let (x0, conds) = l2i_batch(self.data, &s.l2i, tc.l2i_batch, &mut s.rng)?;
            let (loss, grads) = s.l2i.training_step(&x0, &conds, &self.sched, tc.loss, &mut s.rng)?;
            check_finite(loss, &grads, "l2i", step)?;
            s.l2i_opt.update(s.l2i.params_mut(), &grads);
            loss_l2i = Some(loss);
        }
        s.step = step;
        Ok(StepRecord {
            step,
            loss_a2l,
            loss_l2i,
            wall_time: self.started.elapsed().as_secs_f64(),
        })
    }

    /// Mean losses over `batches` fixed batches drawn from `seed`; training
    /// state is untouched.
    pub fn probe_losses(&self, seed: u64, batches: usize) -> Result<(f64, f64)> {
        let s = &self.state;
        let tc = &s.config.train;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut a, mut l) = (0.0, 0.0);
        for _ in 0..batches {
            let (x0, conds) = a2l_batch(self.data, s.config.a2l.window, tc.a2l_batch, &mut rng)?;
            a += s.a2l.training_step(&x0, &conds, &self.sched, tc.loss, &mut rng)?.0;
            let (x0, conds) = l2i_batch(self.data, &s.l2i, tc.l2i_batch, &mut rng)?;
            l += s.l2i.training_step(&x0, &conds, &self.sched, tc.loss, &mut rng)?.0;
        }
        let n = batches.max(1) as f64;
        Ok((a / n, l / n))
    }

    /// Trains up to `config.train.steps`. With an output directory, appends
    /// JSON lines to `train_log.jsonl`, writes `step_NNNNNN.ckpt` every
    /// `checkpoint_every` steps and `last.ckpt` at the end.
    pub fn run(&mut self, out: Option<&Path>, mut progress: impl FnMut(&StepRecord)) -> Result<Vec<PathBuf>> {
        let tc = self.state.config.train.clone();
        let mut log = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let p = dir.join("train_log.jsonl");
                let f = File::options().create(true).append(true).open(&p).map_err(|e| Error::io(&p, e))?;
                Some((BufWriter::new(f), p))
            }
            None => None,
        };
        let mut written = Vec::new();
        while self.state.step < tc.steps {
            let rec = self.step()?;
            if rec.step % tc.log_every == 0 || rec.step == tc.steps {
                if let Some((w, p)) = log.as_mut() {
                    let line = serde_json::to_string(&rec).expect("record serializes");
                    writeln!(w, "{line}").map_err(|e| Error::io(p.as_path(), e))?;
                }
                progress(&rec);
            }
            if let Some(dir) = out {
                if tc.checkpoint_every > 0 && rec.step % tc.checkpoint_every == 0 {
                    let p = dir.join(format!("step_{:06}.ckpt", rec.step));
                    self.state.save(&p)?;
                    written.push(p);
                }
            }
        }
        if let Some((w, p)) = log.as_mut() {
            w.flush().map_err(|e| Error::io(p.as_path(), e))?;
        }
        if let Some(dir) = out {
            let p = dir.join("last.ckpt");
            self.state.save(&p)?;
            written.push(p);
        }
        Ok(written)
    }
}
