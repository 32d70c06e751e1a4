//! Minimal f64 tensor substrate: dense tensors, a reverse-mode op tape with
//! a stop-gradient primitive, MLP building blocks, and AdamW/EMA updates
//! over named parameter sets.

mod mlp;
mod params;
mod tape;
mod tensor;

pub use mlp::{sinusoidal_features, Linear, MlpBody, EMBED_DIM};
pub use params::{Param, ParamSet, TapeBinding};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::{matmul_into, Tensor};
