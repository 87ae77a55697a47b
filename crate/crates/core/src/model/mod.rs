//! Decoder-only multimodal transformer with an activation cache and
//! residual-stream patching.

mod config;
pub mod container;
mod forward;
mod sequence;
mod weights;

pub use config::{ModelConfig, NormKind, LAYER_NORM_EPS};
pub use forward::{target_probability, ActivationCache, ForwardOutput, InterventionSpec, Model};
pub use sequence::{MultiModalSequence, Segment, SequenceElement};
pub use weights::{BlockWeights, ModelWeights, NormParams, Shape};
