//! Minimal dense tensor engine: row-major buffers, a recording graph with
//! reverse-mode differentiation, transformer layer primitives and Adam.

pub mod check;
pub mod error;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{AttnLayout, Graph, Segment, Var};
pub use nn::{Dropout, FeedForward, LayerNorm, Linear, MultiHeadAttention, TransformerBlock};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{Gradients, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
