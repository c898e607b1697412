use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AttentionMode {
    Dense,
    /// Each token sees neighbours within `window` positions plus every
    /// global position; global positions see everything.
    Sliding { window: usize, global: Vec<usize> },
}

impl AttentionMode {
    /// Sliding attention with only position 0 (CLS) global.
    pub fn sliding(window: usize) -> Self {
        AttentionMode::Sliding {
            window,
            global: vec![0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub attention: AttentionMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 2048,
            dim: 64,
            layers: 2,
            heads: 4,
            ff_dim: 128,
            max_positions: 129,
            dropout: 0.1,
            attention: AttentionMode::Dense,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("encoder: {m}")));
        if self.vocab_size < 4 || self.dim == 0 || self.layers == 0 || self.ff_dim == 0 || self.max_positions == 0 {
            return fail(format!("sizes must be positive: {self:?}"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if let AttentionMode::Sliding { window, global } = &self.attention {
            if *window < 1 {
                return fail("sliding window must be at least 1".into());
            }
            if !global.contains(&0) {
                return fail("position 0 (CLS) must be global".into());
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}
