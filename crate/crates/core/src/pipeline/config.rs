use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::a2l::A2lConfig;
use crate::ddpm::{LossNorm, ScheduleConfig};
use crate::error::{Error, Result};
use crate::l2i::{ConditionAblation, L2iConfig};
use crate::nn::AdamConfig;
use crate::synthdata::{read_json, GeneratorConfig};

fn default_adam() -> AdamConfig {
    AdamConfig {
        lr: 1e-3,
        ..AdamConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Optimizer steps; each step takes one batch of every enabled hierarchy.
    pub steps: u64,
    pub a2l_batch: usize,
    pub l2i_batch: usize,
    pub train_a2l: bool,
    pub train_l2i: bool,
    pub a2l_optimizer: AdamConfig,
    pub l2i_optimizer: AdamConfig,
    pub loss: LossNorm,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            a2l_batch: 16,
            l2i_batch: 8,
            train_a2l: true,
            train_l2i: true,
            a2l_optimizer: default_adam(),
            l2i_optimizer: default_adam(),
            loss: LossNorm::SquaredL2,
            checkpoint_every: 500,
            log_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub seed: u64,
    /// Sampling stride for the landmark chain; 1 is exact ancestral sampling.
    pub a2l_stride: usize,
    pub l2i_stride: usize,
    /// Frames shared by consecutive landmark windows; defaults to a quarter window.
    pub overlap: Option<usize>,
    /// Frames generated per L2I batch; results do not depend on it.
    pub frame_batch: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            a2l_stride: 1,
            l2i_stride: 10,
            overlap: None,
            frame_batch: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Evaluate at most this many frames per clip.
    pub max_frames: Option<usize>,
    /// Evaluate at most this many clips.
    pub max_clips: Option<usize>,
    /// Also score L2I conditioned on ground-truth landmarks.
    pub ground_truth_landmark_row: bool,
    pub plots: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_frames: None,
            max_clips: None,
            ground_truth_landmark_row: true,
            plots: true,
        }
    }
}

/// Everything an experiment needs, loaded from one JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub generator: GeneratorConfig,
    pub schedule: ScheduleConfig,
    pub a2l: A2lConfig,
    pub l2i: L2iConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: None,
            test_data: None,
            generator: GeneratorConfig::default(),
            schedule: ScheduleConfig::default(),
            a2l: A2lConfig::default(),
            l2i: L2iConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.generator.validate()?;
        self.a2l.validate()?;
        self.l2i.validate()?;
        self.schedule.build()?;
        if self.a2l.landmarks != self.generator.landmarks || self.a2l.audio_dim != self.generator.audio_dim {
            return bad(format!(
                "a2l expects L={} / audio_dim={}, generator produces L={} / audio_dim={}",
                self.a2l.landmarks, self.a2l.audio_dim, self.generator.landmarks, self.generator.audio_dim
            ));
        }
        if self.l2i.image_size != self.generator.image_size {
            return bad(format!(
                "l2i image_size {} != generator image_size {}",
                self.l2i.image_size, self.generator.image_size
            ));
        }
        let t = &self.train;
        if t.a2l_batch == 0 || t.l2i_batch == 0 || t.log_every == 0 {
            return bad("train: batch sizes and log_every must be positive".into());
        }
        for (name, opt) in [("a2l", &t.a2l_optimizer), ("l2i", &t.l2i_optimizer)] {
            if !(opt.lr > 0.0 && opt.lr.is_finite()) {
                return bad(format!("train: {name} learning rate must be positive, got {}", opt.lr));
            }
        }
        let i = &self.infer;
        let steps = self.schedule.steps;
        for (name, s) in [("a2l_stride", i.a2l_stride), ("l2i_stride", i.l2i_stride)] {
            if s == 0 || steps % s != 0 {
                return bad(format!("infer: {name} {s} must divide the {steps} diffusion steps"));
            }
        }
        if i.frame_batch == 0 {
            return bad("infer: frame_batch must be positive".into());
        }
        if self.overlap() >= self.a2l.window {
            return bad(format!(
                "infer: overlap {} must be smaller than the window {}",
                self.overlap(),
                self.a2l.window
            ));
        }
        Ok(())
    }

    pub fn overlap(&self) -> usize {
        self.infer.overlap.unwrap_or(self.a2l.window / 4)
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copy with a different L2I condition ablation.
    pub fn with_ablation(&self, ablation: ConditionAblation) -> Self {
        let mut c = self.clone();
        c.l2i.ablation = ablation;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_json_str(&cfg.to_json_string()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.overlap(), 5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_json_str(r#"{"sed": 1}"#).is_err());
        assert!(ExperimentConfig::from_json_str(r#"{"a2l": {"hiden": 4}}"#).is_err());
        let cfg = ExperimentConfig::from_json_str(r#"{"seed": 7, "a2l": {"blocks": 4}}"#).unwrap();
        assert_eq!((cfg.seed, cfg.a2l.blocks, cfg.a2l.hidden), (7, 4, 128));
    }

    #[test]
    fn inconsistent_settings_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.a2l.landmarks = 40;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.infer.overlap = Some(20);
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.infer.l2i_stride = 7;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 1;
        assert_ne!(cfg.hash(), ExperimentConfig::default().hash());
    }
}
