use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::sequence::RESERVED_IDS;

/// Architecture plus the split hyperparameters a model was trained with.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Number of query slots between `[CLS]` and the query `[SEP]`.
    pub q_max: usize,
    /// Last layer in which query and document may not attend to each other.
    pub split_layer: usize,
    /// Width of the stored document representation, `None` for no compressor.
    pub comp_dim: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            vocab_size: 4096,
            max_len: 64,
            q_max: 8,
            split_layer: 1,
            comp_dim: Some(16),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return fail("d_model, n_heads and d_ff must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.q_max == 0 {
            return fail("q_max must be at least 1".into());
        }
        if self.max_len < self.q_max + 3 {
            return fail(format!(
                "max_len {} must be at least q_max + 3 = {}",
                self.max_len,
                self.q_max + 3
            ));
        }
        if self.split_layer > self.n_layers {
            return fail(format!(
                "split_layer {} exceeds n_layers {}",
                self.split_layer, self.n_layers
            ));
        }
        if let Some(e) = self.comp_dim {
            if e == 0 || e > self.d_model {
                return fail(format!("comp_dim {e} outside [1, {}]", self.d_model));
            }
        }
        if self.vocab_size <= RESERVED_IDS as usize {
            return fail(format!("vocab_size must exceed {RESERVED_IDS}"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Document tokens that fit after the query block and the two separators.
    pub fn max_doc_tokens(&self) -> usize {
        self.max_len - self.q_max - 3
    }

    /// Width of one stored document token.
    pub fn stored_width(&self) -> usize {
        self.comp_dim.unwrap_or(self.d_model)
    }

    pub fn with_split_layer(&self, l: usize) -> Self {
        Self {
            split_layer: l,
            ..self.clone()
        }
    }
}
