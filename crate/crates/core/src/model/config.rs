use crate::error::{Error, Result};

/// Byte ids occupy 0..=255; three specials follow.
pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;
pub const BYTE_VOCAB: usize = 259;

/// Shape of the decoder-only transformer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub context_len: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 16,
            d_model: 64,
            n_heads: 4,
            d_ffn: 256,
            context_len: 128,
            vocab_size: BYTE_VOCAB,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(m));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.context_len < 2 {
            return fail(format!("degenerate model config {self:?}"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ffn < 2 * self.d_model {
            return fail(format!(
                "d_ffn {} must be at least twice d_model {}",
                self.d_ffn, self.d_model
            ));
        }
        if self.vocab_size < BYTE_VOCAB {
            return fail(format!(
                "vocab_size {} cannot hold the byte vocabulary",
                self.vocab_size
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}
