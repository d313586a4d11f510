//! Two-stage diffusion for audio-driven talking heads: audio features to
//! landmark sequences, then landmarks to face images.

pub mod a2l;
pub mod ddpm;
pub mod error;
pub mod geometry;
pub mod imaging;
pub mod l2i;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod raster;
pub mod synthdata;

pub use error::{Error, Result};
