//! Dense `f64` tensors with tape-based reverse-mode differentiation, the
//! layers assembled from them, AdamW, and the checkpoint container.

pub mod checkpoint;
pub mod gradcheck;
pub mod nn;
pub mod optim;
mod params;
mod tape;
mod value;

pub use checkpoint::Checkpoint;
pub use nn::{multihead_attention, AttentionOutput, LayerNorm, Linear, Mlp, MultiHeadAttention};
pub use optim::{adamw_step, AdamWConfig, OptimizerState, PolySchedule};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use tape::{Gradients, Groups, Tape, Var};
pub use value::Tensor;
