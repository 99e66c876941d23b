use serde::{Deserialize, Serialize};

use crate::ctc::{TokenId, Vocab};
use crate::error::{Error, Result};

/// Which decoder sits on top of the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// Causal decoder fed the shifted target; one pass per emitted token.
    Autoregressive,
    /// Parallel decoder fed a fixed sequence of learnable query tokens.
    LqtParallel,
    /// Parallel decoder fed the encoder output states themselves.
    EncoderOutputParallel,
}

impl DecoderKind {
    pub fn is_parallel(self) -> bool {
        !matches!(self, DecoderKind::Autoregressive)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub ffn_mult: f64,
    pub vocab_in: Vocab,
    pub vocab_out: Vocab,
    /// Number of learnable queries, i.e. rows of the parallel logit grid.
    pub n_queries: usize,
    pub max_src_len: usize,
    /// Longest sequence the autoregressive decoder is positioned for,
    /// excluding BOS and EOS.
    pub max_tgt_len: usize,
    pub decoder_kind: DecoderKind,
    /// Standard deviation of the normal weight initialization.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    /// Defaults: D=64, 4 heads, 2+2 layers, FFN width 4D.
    pub fn new(vocab_in: Vocab, vocab_out: Vocab, decoder_kind: DecoderKind) -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            ffn_mult: 4.0,
            vocab_in,
            vocab_out,
            n_queries: 24,
            max_src_len: 32,
            max_tgt_len: 24,
            decoder_kind,
            init_std: default_init_std(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vocab_in.validate()?;
        self.vocab_out.validate()?;
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::usage(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_dec_layers == 0 {
            return Err(Error::usage("the decoder needs at least one layer"));
        }
        if self.ffn_width() == 0 {
            return Err(Error::usage("ffn_mult yields an empty feed-forward layer"));
        }
        if self.max_src_len == 0 {
            return Err(Error::usage("max_src_len must be positive"));
        }
        match self.decoder_kind {
            DecoderKind::LqtParallel if self.n_queries == 0 => {
                Err(Error::usage("a query-token decoder needs at least one query"))
            }
            DecoderKind::Autoregressive if self.max_tgt_len == 0 => {
                Err(Error::usage("max_tgt_len must be positive for an autoregressive decoder"))
            }
            _ if !(self.init_std.is_finite() && self.init_std >= 0.0) => {
                Err(Error::usage("init_std must be a finite non-negative number"))
            }
            _ => Ok(()),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_width(&self) -> usize {
        (self.d_model as f64 * self.ffn_mult).round() as usize
    }

    /// End-of-sequence id of the autoregressive output layer; one past the
    /// shared output vocabulary.
    pub fn eos_id(&self) -> TokenId {
        self.vocab_out.size() as TokenId
    }

    /// Start-of-sequence id fed to the autoregressive decoder.
    pub fn bos_id(&self) -> TokenId {
        self.vocab_out.size() as TokenId + 1
    }

    /// Width of the decoder's logit rows.
    pub fn output_classes(&self) -> usize {
        match self.decoder_kind {
            DecoderKind::Autoregressive => self.vocab_out.size() + 1,
            _ => self.vocab_out.size(),
        }
    }
}
