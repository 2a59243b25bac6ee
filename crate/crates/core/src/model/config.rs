use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::DType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_context: usize,
    pub mlp_ratio: usize,
    pub dtype: DType,
}

impl ModelConfig {
    /// Desk-scale decoder: d_model 64, 4 heads, 2 layers, context 64.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            max_context: 64,
            mlp_ratio: 4,
            dtype: DType::F32,
        }
    }

    /// Gradient-checkable model with well under 5k parameters.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            max_context: 12,
            mlp_ratio: 2,
            dtype: DType::F64,
        }
    }

    /// Larger desk variant for size sweeps.
    pub fn small(vocab_size: usize) -> Self {
        Self {
            d_model: 128,
            n_layers: 4,
            ..Self::desk(vocab_size)
        }
    }

    /// Named preset: `tiny`, `desk` or `small`.
    pub fn preset(name: &str, vocab_size: usize) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny(vocab_size)),
            "desk" => Ok(Self::desk(vocab_size)),
            "small" => Ok(Self::small(vocab_size)),
            other => Err(Error::config(format!(
                "unknown model size {other:?} (tiny, desk, small)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be >= 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_context < 2 {
            return Err(Error::config("max_context must be >= 2"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_ff(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (v, d, c, f) = (self.vocab_size, self.d_model, self.max_context, self.d_ff());
        let per_layer = 4 * d * d + 4 * d + d * f + f + f * d + d;
        v * d + c * d + self.n_layers * per_layer + 2 * d + d * v
    }
}
