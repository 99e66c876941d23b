use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ctc::TokenId;
use crate::decoding::{
    ar_beam, ar_greedy, nar_greedy, nar_greedy_positional, nar_prefix_beam, BeamConfig, DecodeResult,
    NarReading,
};
use crate::error::{Error, Result};
use crate::model::{decode_parallel, decode_parallel_encoder_input, encode, DecoderKind, ModelParams};
use crate::tasks::{Dataset, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecodeMethod {
    Greedy,
    PrefixBeam { width: usize },
    ArBeam { width: usize },
}

impl FromStr for DecodeMethod {
    type Err = Error;

    /// `greedy`, `prefix-beam:W` or `ar-beam:W`.
    fn from_str(s: &str) -> Result<Self> {
        let width = |w: &str| {
            w.parse::<usize>()
                .ok()
                .filter(|&w| w >= 1)
                .ok_or_else(|| Error::usage(format!("bad beam width `{w}`")))
        };
        match s.split_once(':') {
            None if s == "greedy" => Ok(DecodeMethod::Greedy),
            Some(("prefix-beam", w)) => Ok(DecodeMethod::PrefixBeam { width: width(w)? }),
            Some(("ar-beam", w)) => Ok(DecodeMethod::ArBeam { width: width(w)? }),
            _ => Err(Error::usage(format!(
                "unknown decode method `{s}` (expected greedy, prefix-beam:W or ar-beam:W)"
            ))),
        }
    }
}

impl std::fmt::Display for DecodeMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DecodeMethod::Greedy => write!(f, "greedy"),
            DecodeMethod::PrefixBeam { width } => write!(f, "prefix-beam:{width}"),
            DecodeMethod::ArBeam { width } => write!(f, "ar-beam:{width}"),
        }
    }
}

/// Decodes one input with any model kind.
pub fn predict(
    params: &ModelParams,
    input: &[TokenId],
    method: DecodeMethod,
    reading: NarReading,
) -> Result<DecodeResult> {
    let cfg = params.config();
    let enc = encode(params, input)?;
    match (cfg.decoder_kind, method) {
        (DecoderKind::Autoregressive, DecodeMethod::Greedy) => ar_greedy(params, &enc, cfg.max_tgt_len),
        (DecoderKind::Autoregressive, DecodeMethod::ArBeam { width }) => ar_beam(
            params,
            &enc,
            &BeamConfig {
                width,
                max_len: cfg.max_tgt_len,
            },
        ),
        (DecoderKind::Autoregressive, DecodeMethod::PrefixBeam { .. }) => {
            Err(Error::usage("prefix beam search needs a parallel decoder"))
        }
        (_, DecodeMethod::ArBeam { .. }) => {
            Err(Error::usage("autoregressive beam search needs an autoregressive decoder"))
        }
        (kind, method) => {
            let out = if kind == DecoderKind::LqtParallel {
                decode_parallel(params, &enc)?
            } else {
                decode_parallel_encoder_input(params, &enc)?
            };
            let vocab = &cfg.vocab_out;
            match (method, reading) {
                (DecodeMethod::PrefixBeam { width }, _) => {
                    nar_prefix_beam(&out.logits, vocab, &BeamConfig::new(width))
                }
                (_, NarReading::Collapse) => Ok(nar_greedy(&out.logits, vocab)),
                (_, NarReading::Positional) => Ok(nar_greedy_positional(&out.logits, vocab)),
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub split: String,
    pub method: DecodeMethod,
    pub n_samples: usize,
    /// Fraction of predictions equal to some reference.
    pub exact_match: f64,
    /// Mean position-wise agreement with the closest reference.
    pub token_accuracy: f64,
    pub mean_decoder_passes: f64,
}

fn token_agreement(pred: &[TokenId], reference: &[TokenId]) -> f64 {
    let longest = pred.len().max(reference.len());
    if longest == 0 {
        return 1.0;
    }
    let same = pred.iter().zip(reference).filter(|(a, b)| a == b).count();
    same as f64 / longest as f64
}

/// Scores `params` on one split. Scoring ignores the dataset's filler token
/// and accepts any valid reference.
pub fn evaluate(
    params: &ModelParams,
    data: &Dataset,
    split: Split,
    method: DecodeMethod,
    reading: NarReading,
) -> Result<Metrics> {
    let cfg = params.config();
    if cfg.vocab_in.size() != data.header.vocab_in.size()
        || cfg.vocab_out.size() != data.header.vocab_out.size()
    {
        return Err(Error::usage("checkpoint vocabularies do not match the dataset"));
    }
    let samples = data.split(split);
    let mut exact = 0usize;
    let mut tokens = 0.0;
    let mut passes = 0usize;
    for s in samples {
        let r = predict(params, &s.input, method, reading)?;
        passes += r.passes;
        if data.is_correct(s, &r.sequence) {
            exact += 1;
        }
        let p = data.normalize(&r.sequence);
        tokens += s
            .valid_refs
            .iter()
            .map(|rf| token_agreement(&p, &data.normalize(rf)))
            .fold(0.0, f64::max);
    }
    let n = samples.len().max(1) as f64;
    Ok(Metrics {
        split: split.name().into(),
        method,
        n_samples: samples.len(),
        exact_match: exact as f64 / n,
        token_accuracy: tokens / n,
        mean_decoder_passes: passes as f64 / n,
    })
}
