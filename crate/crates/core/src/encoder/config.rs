use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the shared-parameter bi-encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Number of poly-attention context codes.
    pub context_codes: usize,
    pub d_compress: usize,
    pub dropout: f64,
    /// Query side attends with context codes; when off the query uses its CLS output.
    pub poly: bool,
    /// Apply the compression layer; when off embeddings are `d_model` wide.
    pub compression: bool,
    pub init_std: f64,
    pub layernorm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            vocab_size: 1024,
            max_len: 64,
            context_codes: 4,
            d_compress: 16,
            dropout: 0.1,
            poly: true,
            compression: true,
            init_std: 0.02,
            layernorm_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    /// Published production architecture (6 layers, 768 wide, 16 codes, 256-d compression).
    pub fn production() -> Self {
        Self {
            n_layers: 6,
            d_model: 768,
            n_heads: 12,
            d_ff: 3072,
            vocab_size: 18_000,
            max_len: 128,
            context_codes: 16,
            d_compress: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Input(msg));
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.context_codes == 0 {
            return bad("context_codes must be at least 1".into());
        }
        if self.d_compress == 0 || self.d_compress > self.d_model {
            return bad(format!(
                "d_compress {} must be in 1..={}",
                self.d_compress, self.d_model
            ));
        }
        if self.vocab_size <= super::FIRST_WORD_ID as usize {
            return bad("vocab_size must exceed the reserved ids".into());
        }
        if self.max_len < 2 || self.n_layers == 0 || self.d_ff == 0 {
            return bad("max_len >= 2, n_layers >= 1 and d_ff >= 1 are required".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Width of the embeddings the model emits.
    pub fn output_dim(&self) -> usize {
        if self.compression {
            self.d_compress
        } else {
            self.d_model
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}
