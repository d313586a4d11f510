//! Minimal reverse-mode differentiation over dense `f64` buffers, sized for
//! the two small denoisers in this crate.

mod layers;
mod params;
mod tape;

pub use layers::{sinusoidal_embedding, Conv3x3, LayerNorm, Linear, TemporalConv};
pub use params::{Adam, AdamConfig, Param, ParamId, ParamStore};
pub use tape::{Grads, Graph, NodeId};

#[cfg(test)]
pub(crate) use tape::gemm;

#[cfg(test)]
mod tests;
