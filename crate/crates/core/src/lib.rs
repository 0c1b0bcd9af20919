//! Loss-distribution data curation for multimodal training sets, ViT
//! intermediate-layer fusion probes, and token-sampling primitives.

pub mod error;
pub mod fusion;
pub mod pipeline;
pub mod record;
pub mod sampling;
pub mod scorer;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
