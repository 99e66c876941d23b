use std::cmp::Ordering;

use crate::ctc::{TokenId, TokenSeq};
use crate::decoding::{BeamConfig, DecodeResult};
use crate::error::{Error, Result};
use crate::model::{decode_ar_step, DecoderKind, EncoderOutput, ModelParams};
use crate::numerics::{argmax, log_softmax_row, LogProb};

/// Next-token log-probabilities with the blank column excluded, and
/// optionally EOS as well.
fn step_log_probs(
    params: &ModelParams,
    enc: &EncoderOutput,
    prefix: &[TokenId],
    allow_eos: bool,
) -> Result<Vec<f64>> {
    let (mut logits, _) = decode_ar_step(params, enc, prefix)?;
    logits[params.config().vocab_out.blank_id() as usize] = f64::NEG_INFINITY;
    if !allow_eos {
        logits[params.config().eos_id() as usize] = f64::NEG_INFINITY;
    }
    Ok(log_softmax_row(&logits))
}

fn check(params: &ModelParams, beam: &BeamConfig) -> Result<()> {
    beam.validate()?;
    if params.config().decoder_kind != DecoderKind::Autoregressive {
        return Err(Error::usage("autoregressive decoding needs an autoregressive model"));
    }
    if beam.max_len == 0 || beam.max_len > params.config().max_tgt_len {
        return Err(Error::usage(format!(
            "max_len {} outside [1, {}]",
            beam.max_len,
            params.config().max_tgt_len
        )));
    }
    Ok(())
}

fn normalized(sum: f64, emitted: usize) -> LogProb {
    LogProb::new(sum / emitted.max(1) as f64).unwrap_or(LogProb::ZERO_PROB)
}

/// Argmax decoding until EOS or `max_len` tokens. The score is the summed
/// log-probability divided by the emitted length, EOS included.
pub fn ar_greedy(params: &ModelParams, enc: &EncoderOutput, max_len: usize) -> Result<DecodeResult> {
    check(params, &BeamConfig { width: 1, max_len })?;
    let eos = params.config().eos_id();
    let mut prefix = vec![params.config().bos_id()];
    let mut sum = 0.0;
    let mut passes = 0;
    while prefix.len() - 1 < max_len {
        let lp = step_log_probs(params, enc, &prefix, true)?;
        passes += 1;
        let tok = argmax(&lp);
        sum += lp[tok];
        if tok as TokenId == eos {
            break;
        }
        prefix.push(tok as TokenId);
    }
    Ok(DecodeResult {
        sequence: prefix[1..].to_vec(),
        score: normalized(sum, passes),
        raw_path: None,
        passes,
    })
}

/// Greedy decoding of exactly `len` tokens with EOS suppressed; used to
/// time the autoregressive decoder at a controlled output length.
pub fn ar_greedy_fixed_length(
    params: &ModelParams,
    enc: &EncoderOutput,
    len: usize,
) -> Result<DecodeResult> {
    check(params, &BeamConfig { width: 1, max_len: len })?;
    let mut prefix = vec![params.config().bos_id()];
    let mut sum = 0.0;
    for _ in 0..len {
        let lp = step_log_probs(params, enc, &prefix, false)?;
        let tok = argmax(&lp);
        sum += lp[tok];
        prefix.push(tok as TokenId);
    }
    Ok(DecodeResult {
        sequence: prefix[1..].to_vec(),
        score: normalized(sum, len),
        raw_path: None,
        passes: len,
    })
}

#[derive(Clone, Debug)]
struct Hyp {
    /// Emitted symbols, EOS included once finished.
    path: TokenSeq,
    sum: f64,
}

impl Hyp {
    fn score(&self) -> f64 {
        self.sum / self.path.len().max(1) as f64
    }
}

fn by_sum(a: &Hyp, b: &Hyp) -> Ordering {
    b.sum
        .partial_cmp(&a.sum)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.path.cmp(&b.path))
}

fn by_score(a: &Hyp, b: &Hyp) -> Ordering {
    b.score()
        .partial_cmp(&a.score())
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.path.cmp(&b.path))
}

/// Beam search over autoregressive steps. Each step keeps the `width` best
/// expansions by summed log-probability; finished hypotheses are ranked by
/// the length-normalized score. `passes` counts decoding steps, each one
/// batched pass over the live beam.
pub fn ar_beam(params: &ModelParams, enc: &EncoderOutput, beam: &BeamConfig) -> Result<DecodeResult> {
    check(params, beam)?;
    let eos = params.config().eos_id();
    let bos = params.config().bos_id();
    let mut alive = vec![Hyp {
        path: Vec::new(),
        sum: 0.0,
    }];
    let mut finished: Vec<Hyp> = Vec::new();
    let mut passes = 0;
    while !alive.is_empty() {
        passes += 1;
        let mut candidates = Vec::with_capacity(alive.len() * 8);
        for h in &alive {
            let mut prefix = Vec::with_capacity(h.path.len() + 1);
            prefix.push(bos);
            prefix.extend_from_slice(&h.path);
            let lp = step_log_probs(params, enc, &prefix, true)?;
            for (c, &l) in lp.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let mut path = h.path.clone();
                path.push(c as TokenId);
                candidates.push(Hyp { path, sum: h.sum + l });
            }
        }
        candidates.sort_by(by_sum);
        candidates.truncate(beam.width);
        alive.clear();
        for h in candidates {
            if h.path.last() == Some(&eos) || h.path.len() == beam.max_len {
                finished.push(h);
            } else {
                alive.push(h);
            }
        }
    }
    let best = finished
        .into_iter()
        .min_by(by_score)
        .expect("every hypothesis finishes by max_len");
    let mut sequence = best.path.clone();
    if sequence.last() == Some(&eos) {
        sequence.pop();
    }
    Ok(DecodeResult {
        score: normalized(best.sum, best.path.len()),
        sequence,
        raw_path: None,
        passes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::Vocab;
    use crate::model::{encode, ModelConfig};
    use crate::numerics::Rng;

    fn model(seed: u64, std: f64) -> ModelParams {
        let mut c = ModelConfig::new(Vocab::new(6).unwrap(), Vocab::new(5).unwrap(), DecoderKind::Autoregressive);
        c.d_model = 8;
        c.n_heads = 2;
        c.n_enc_layers = 1;
        c.n_dec_layers = 1;
        c.max_src_len = 6;
        c.max_tgt_len = 6;
        c.init_std = std;
        ModelParams::init(&c, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn greedy_counts_one_pass_per_emitted_symbol() {
        for seed in 0..20 {
            let p = model(seed, 1.0);
            let enc = encode(&p, &[1, 2, 3]).unwrap();
            let r = ar_greedy(&p, &enc, 6).unwrap();
            let eos = usize::from(r.sequence.len() < 6 || r.passes > r.sequence.len());
            assert_eq!(r.passes, r.sequence.len() + eos);
            assert!(r.score.value() <= 0.0);
            assert!(r.sequence.iter().all(|&t| t != 0 && t < 5));
            let one = ar_greedy(&p, &enc, 1).unwrap();
            assert!(one.sequence.len() <= 1 && one.passes == 1);
        }
    }

    #[test]
    fn fixed_length_decoding_uses_exactly_len_passes() {
        let p = model(1, 1.0);
        let enc = encode(&p, &[1, 2]).unwrap();
        for len in 1..=6 {
            let r = ar_greedy_fixed_length(&p, &enc, len).unwrap();
            assert_eq!((r.sequence.len(), r.passes), (len, len));
        }
    }

    #[test]
    fn width_one_beam_equals_greedy() {
        for seed in 0..50 {
            let p = model(100 + seed, 1.0);
            let enc = encode(&p, &[(seed % 5 + 1) as TokenId, 2, 4]).unwrap();
            let g = ar_greedy(&p, &enc, 6).unwrap();
            let b = ar_beam(&p, &enc, &BeamConfig { width: 1, max_len: 6 }).unwrap();
            assert_eq!(g.sequence, b.sequence);
            assert_eq!(g.score, b.score);
            assert_eq!(g.passes, b.passes);
        }
    }

    #[test]
    fn beam_scores_at_least_greedy() {
        for seed in 0..40 {
            let p = model(200 + seed, 1.0);
            let enc = encode(&p, &[3, 1, 4]).unwrap();
            let g = ar_greedy(&p, &enc, 6).unwrap().score.value();
            let b2 = ar_beam(&p, &enc, &BeamConfig { width: 2, max_len: 6 }).unwrap().score.value();
            let b5 = ar_beam(&p, &enc, &BeamConfig { width: 5, max_len: 6 }).unwrap().score.value();
            assert!(b2 >= g - 1e-12, "seed {seed}: beam 2 {b2} < greedy {g}");
            assert!(b5 >= b2 - 1e-12, "seed {seed}: beam 5 {b5} < beam 2 {b2}");
        }
    }

    #[test]
    fn misuse_is_rejected() {
        let p = model(3, 0.02);
        let enc = encode(&p, &[1]).unwrap();
        assert!(ar_greedy(&p, &enc, 0).is_err());
        assert!(ar_greedy(&p, &enc, 7).is_err());
        assert!(ar_beam(&p, &enc, &BeamConfig { width: 0, max_len: 3 }).is_err());
    }
}
