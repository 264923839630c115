use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokens;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub latent_dim: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub n_languages: usize,
    pub max_len: usize,
    /// Output projection as `3d→d→V` instead of `3d→V`.
    pub factored_projection: bool,
    /// One encoder stack shared by the semantic and language posteriors.
    pub single_encoder: bool,
    pub n_language_encoders: usize,
    pub use_encoder_lang_emb: bool,
    pub use_decoder_lang_emb: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            model_dim: 64,
            latent_dim: 32,
            n_enc_layers: 2,
            n_dec_layers: 1,
            n_heads: 4,
            ff_dim: 128,
            n_languages: 4,
            max_len: 32,
            factored_projection: false,
            single_encoder: false,
            n_language_encoders: 1,
            use_encoder_lang_emb: true,
            use_decoder_lang_emb: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::config(field, msg));
        if self.model_dim == 0 {
            return fail("model_dim", "must be positive".into());
        }
        if self.n_heads == 0 || !self.model_dim.is_multiple_of(self.n_heads) {
            return fail(
                "n_heads",
                format!("model_dim {} not divisible by {}", self.model_dim, self.n_heads),
            );
        }
        if self.latent_dim == 0 {
            return fail("latent_dim", "must be at least 1".into());
        }
        if self.max_len < 2 {
            return fail("max_len", format!("{} < 2", self.max_len));
        }
        if self.n_languages < 2 {
            return fail("n_languages", format!("{} < 2", self.n_languages));
        }
        if self.ff_dim == 0 {
            return fail("ff_dim", "must be positive".into());
        }
        if self.n_dec_layers == 0 {
            return fail("n_dec_layers", "must be at least 1".into());
        }
        if self.n_language_encoders == 0 || self.n_language_encoders > self.n_languages {
            return fail("n_language_encoders", format!("must lie in 1..={}", self.n_languages));
        }
        if self.single_encoder && self.n_language_encoders != 1 {
            return fail(
                "n_language_encoders",
                "single_encoder requires exactly one language encoder".into(),
            );
        }
        let min_vocab = tokens::N_RESERVED + self.n_languages;
        if self.vocab_size <= min_vocab {
            return fail(
                "vocab_size",
                format!("{} leaves no room beyond {min_vocab} reserved ids", self.vocab_size),
            );
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    /// Round-robin assignment of languages to language encoders.
    pub fn language_encoder_of(&self, lang: usize) -> usize {
        lang % self.n_language_encoders
    }

    pub fn check_language(&self, lang: usize) -> Result<()> {
        if lang >= self.n_languages {
            return Err(Error::config(
                "lang_id",
                format!("language {lang} out of range for {} languages", self.n_languages),
            ));
        }
        Ok(())
    }

    /// Scalar count of the output projection (`3d·V`, or `3d·d + d·V` when factored).
    pub fn projection_params(&self) -> usize {
        let (d, v) = (self.model_dim, self.vocab_size);
        if self.factored_projection {
            3 * d * d + d * v
        } else {
            3 * d * v
        }
    }
}
