//! Experiment orchestration: configuration, alternating training of both
//! hierarchies, checkpoints, inference from audio and evaluation.

mod checkpoint;
mod config;
mod evaluate;
mod infer;
mod train;

pub use checkpoint::Checkpoint;
pub use config::{EvalConfig, ExperimentConfig, InferConfig, TrainConfig};
pub use evaluate::{
    evaluate, ground_truth_metrics, image_metrics, landmark_metrics, lip_track, pearson, tau_sweep,
    write_evaluation, Evaluation, LipTrace, LIP_CORRELATION, MA_IMAGE,
};
pub use infer::{
    frame_progression, frame_request, generate_landmarks, infer, prepare_source, render_frames, sample_normalized_track, stream_rng,
    window_starts, window_stitch, write_inference, InferenceManifest, InferenceOutput, InferenceSource,
    LandmarkPurpose, LandmarkRead, StatsSource, StdInit,
};
pub use train::{read_log, StepRecord, Trainer, TrainingSet};

#[cfg(test)]
mod tests;
