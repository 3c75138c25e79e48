//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Provides exactly the layers the planning models need: linear, causal
//! self-attention, temporal convolution, layer/group norm, relu/gelu/mish,
//! plus Adam and a self-describing checkpoint file. 64-bit floats
//! throughout; determinism beats speed at this scale.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;

pub use graph::{Graph, Var};
pub use params::{adam_step, AdamConfig, ParamStore};
pub use tensor::Tensor;
