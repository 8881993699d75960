//! Edit-based sequence generation and refinement: vocabulary and corpora,
//! the insertion/deletion edit environment with its dynamic-programming
//! oracles, the policy network, imitation training and iterative decoding.

pub mod data;
pub mod decode;
pub mod edit;
pub mod error;
pub mod metrics;
pub mod model;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
