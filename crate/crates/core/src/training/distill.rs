use serde::{Deserialize, Serialize};

use crate::decoding::{ar_beam, ar_greedy, BeamConfig};
use crate::error::{Error, Result};
use crate::model::{encode, DecoderKind, ModelParams};
use crate::tasks::Dataset;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistillStats {
    pub samples: usize,
    /// Targets that differ from the original after replacement.
    pub changed: usize,
    /// Teacher outputs that were empty; the original target was kept.
    pub kept_empty: usize,
    /// Teacher outputs not among the sample's references.
    pub outside_refs: usize,
}

/// Replaces every training target with the teacher's decode of its input.
/// Validation and test splits are untouched; per-epoch target resampling is
/// switched off. `beam_width` 1 is greedy.
pub fn distill_targets(
    teacher: &ModelParams,
    data: &Dataset,
    beam_width: usize,
) -> Result<(Dataset, DistillStats)> {
    let cfg = teacher.config();
    if cfg.decoder_kind != DecoderKind::Autoregressive {
        return Err(Error::usage("distillation needs an autoregressive teacher"));
    }
    if cfg.vocab_in.size() != data.header.vocab_in.size()
        || cfg.vocab_out.size() != data.header.vocab_out.size()
    {
        return Err(Error::usage("teacher vocabularies do not match the dataset"));
    }
    let max_len = data.max_target_len().clamp(1, cfg.max_tgt_len);
    let mut out = data.clone();
    let mut stats = DistillStats {
        samples: out.train.len(),
        ..Default::default()
    };
    for s in out.train.iter_mut() {
        let enc = encode(teacher, &s.input)?;
        let decoded = if beam_width <= 1 {
            ar_greedy(teacher, &enc, max_len)?
        } else {
            ar_beam(teacher, &enc, &BeamConfig { width: beam_width, max_len })?
        };
        if decoded.sequence.is_empty() {
            stats.kept_empty += 1;
            continue;
        }
        if decoded.sequence != s.target {
            stats.changed += 1;
        }
        if !s.valid_refs.contains(&decoded.sequence) {
            stats.outside_refs += 1;
            s.valid_refs.push(decoded.sequence.clone());
        }
        s.target = decoded.sequence;
    }
    out.header.resample_targets = false;
    out.header.distilled = true;
    Ok((out, stats))
}
