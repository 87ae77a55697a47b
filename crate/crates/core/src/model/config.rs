use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Epsilon used by every layer norm in the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    LayerNorm,
    /// Pass-through; used by analytically constructed models.
    Identity,
}

/// Architecture hyperparameters. Sites are numbered `0..=n_layers`: site 0 is
/// the embedding output and site `s` is the residual stream after block `s`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub d_audio: usize,
    pub max_seq_len: usize,
    pub norm_kind: NormKind,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("d_audio", self.d_audio),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::Config(format!(
                "vocab_size must be >= 2, got {}",
                self.vocab_size
            )));
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::Config(format!(
                "d_model ({}) != n_heads ({}) * d_head ({})",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        Ok(())
    }

    /// Number of patchable sites, `n_layers + 1`.
    pub fn n_sites(&self) -> usize {
        self.n_layers + 1
    }
}
