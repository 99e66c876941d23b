//! The collapse rule and the alignment space it induces.

use crate::ctc::vocab::{AlignmentPath, TokenId, TokenSeq, Vocab};
use crate::error::{Error, Result};

/// Default limit on the number of candidate paths scanned by
/// [`enumerate_valid_paths`].
pub const DEFAULT_ENUMERATION_CAP: u64 = 10_000_000;

/// Merges runs of equal non-blank tokens, then drops blanks. Equal tokens
/// separated by a blank stay distinct.
pub fn collapse(path: &[TokenId], vocab: &Vocab) -> TokenSeq {
    let blank = vocab.blank_id();
    let mut out = Vec::with_capacity(path.len());
    let mut prev: Option<TokenId> = None;
    for &tok in path {
        if tok != blank && prev != Some(tok) {
            out.push(tok);
        }
        prev = Some(tok);
    }
    out
}

/// Shortest alignment length that can collapse to `target`: its length plus
/// one separating blank per adjacent repeated pair.
pub fn min_path_length(target: &[TokenId]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// All length-`n_positions` paths collapsing to `target`, by scanning every
/// one of the `d^N` candidates in lexicographic order.
pub fn enumerate_valid_paths(
    target: &[TokenId],
    n_positions: usize,
    vocab: &Vocab,
) -> Result<Vec<AlignmentPath>> {
    enumerate_valid_paths_capped(target, n_positions, vocab, DEFAULT_ENUMERATION_CAP)
}

pub fn enumerate_valid_paths_capped(
    target: &[TokenId],
    n_positions: usize,
    vocab: &Vocab,
    cap: u64,
) -> Result<Vec<AlignmentPath>> {
    vocab.check_target(target)?;
    if n_positions == 0 {
        return Err(Error::usage("alignment length must be at least 1"));
    }
    let d = vocab.size() as u64;
    let total = (0..n_positions).try_fold(1u64, |acc, _| acc.checked_mul(d));
    match total {
        Some(t) if t <= cap => {}
        _ => {
            return Err(Error::usage(format!(
                "enumerating {}^{} paths exceeds the cap of {cap}; use the dynamic program instead",
                vocab.size(),
                n_positions
            )))
        }
    }
    let mut out = Vec::new();
    if min_path_length(target) > n_positions {
        return Ok(out);
    }
    for_each_path(n_positions, vocab.size(), |path| {
        if collapse(path, vocab) == target {
            out.push(path.to_vec());
        }
    });
    Ok(out)
}

/// Visits all `d^n` sequences over `0..d` in lexicographic order.
pub fn for_each_path<F: FnMut(&[TokenId])>(n: usize, d: usize, mut visit: F) {
    let mut path = vec![0 as TokenId; n];
    loop {
        visit(&path);
        let mut i = n;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            path[i] += 1;
            if (path[i] as usize) < d {
                break;
            }
            path[i] = 0;
        }
    }
}
