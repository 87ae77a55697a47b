//! # causal-trace
//!
//! Causal tracing (activation patching) for a small, deterministic,
//! decoder-only transformer that reads interleaved audio frames and text
//! tokens.
//!
//! For each sample the tracer runs the model three times: on the clean
//! input, on the input with every audio frame replaced by silence, and on
//! the silenced input with selected residual-stream states copied in from
//! the clean run. The recovery rate
//! `(p_patched - p_corrupted) / (p_clean - p_corrupted)` measures how much of
//! the answer probability the copied states bring back. Sweeping the patch
//! over sites (layer-wise) or single positions (token-wise) maps where audio
//! information enters the textual stream.
//!
//! [`oracle`] builds a copy-circuit model whose causal map is known in
//! closed form, which the test-suite uses to check the tracer end to end.
//!
//! ## Features
//!
//! - `parallel` (default): sweeps fan out over a rayon pool. Without it
//!   every sweep runs on the calling thread. Results are bit-identical
//!   either way.

pub mod cli;
pub mod error;
pub mod model;
pub mod oracle;
pub mod par;
pub mod report;
pub mod sweep;
pub mod tensor;
pub mod tracing;

pub use error::{Error, Result};
pub use model::{
    ActivationCache, InterventionSpec, Model, ModelConfig, ModelWeights, MultiModalSequence,
    NormKind, Segment, SequenceElement,
};
pub use oracle::{build_oracle, expected_layer_map, expected_token_map, gen_dataset, OracleSpec};
pub use sweep::{layer_sweep, single_sweep, token_sweep, SweepOptions};
pub use tensor::Tensor2;
pub use tracing::{
    recovery_rate, trace_one, CorruptionSpec, Dataset, TraceResult, TraceSample, Verdict,
};
