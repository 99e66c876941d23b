use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::ctc::{collapse, sequence_log_prob, TokenId, TokenSeq, Vocab};
use crate::decoding::{BeamConfig, DecodeResult};
use crate::error::Result;
use crate::numerics::{argmax, log_softmax_row, LogProb, Tensor2};
use crate::numerics::logspace::lse2;

fn best_path(logits: &Tensor2) -> (Vec<TokenId>, f64) {
    let mut path = Vec::with_capacity(logits.rows());
    let mut score = 0.0;
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let c = argmax(row);
        score += log_softmax_row(row)[c];
        path.push(c as TokenId);
    }
    (path, score)
}

/// Per-position argmax followed by the collapse rule. The score is the log
/// probability of the chosen path, not of the collapsed sequence.
pub fn nar_greedy(logits: &Tensor2, vocab: &Vocab) -> DecodeResult {
    let (path, score) = best_path(logits);
    DecodeResult {
        sequence: collapse(&path, vocab),
        score: LogProb::new(score).unwrap_or(LogProb::ZERO_PROB),
        raw_path: Some(path),
        passes: 1,
    }
}

/// Per-position argmax with blanks dropped but repeats kept: the reading of
/// a grid trained with position-wise cross-entropy.
pub fn nar_greedy_positional(logits: &Tensor2, vocab: &Vocab) -> DecodeResult {
    let (path, score) = best_path(logits);
    DecodeResult {
        sequence: path.iter().copied().filter(|&t| t != vocab.blank_id()).collect(),
        score: LogProb::new(score).unwrap_or(LogProb::ZERO_PROB),
        raw_path: Some(path),
        passes: 1,
    }
}

/// Log mass of a collapsed prefix split by the last emitted symbol.
#[derive(Clone, Copy, Debug)]
struct Mass {
    blank: f64,
    non_blank: f64,
}

impl Mass {
    const ZERO: Mass = Mass {
        blank: f64::NEG_INFINITY,
        non_blank: f64::NEG_INFINITY,
    };

    fn total(self) -> f64 {
        lse2(self.blank, self.non_blank)
    }
}

fn by_mass(a: &(TokenSeq, Mass), b: &(TokenSeq, Mass)) -> Ordering {
    b.1.total()
        .partial_cmp(&a.1.total())
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(&b.0))
}

/// CTC prefix beam search: keeps the `width` collapsed prefixes with the
/// largest summed alignment mass, then returns the survivor with the largest
/// exact sequence probability. Ties go to the lexicographically smaller
/// prefix.
pub fn nar_prefix_beam(logits: &Tensor2, vocab: &Vocab, beam: &BeamConfig) -> Result<DecodeResult> {
    beam.validate()?;
    let blank = vocab.blank_id() as usize;
    let mut beams: Vec<(TokenSeq, Mass)> = vec![(
        Vec::new(),
        Mass {
            blank: 0.0,
            non_blank: f64::NEG_INFINITY,
        },
    )];
    for i in 0..logits.rows() {
        let lp = log_softmax_row(logits.row(i));
        let mut next: BTreeMap<TokenSeq, Mass> = BTreeMap::new();
        for (prefix, mass) in &beams {
            let total = mass.total();
            let e = next.entry(prefix.clone()).or_insert(Mass::ZERO);
            e.blank = lse2(e.blank, total + lp[blank]);
            let last = prefix.last().copied();
            for (c, &lpc) in lp.iter().enumerate() {
                if c == blank {
                    continue;
                }
                let tok = c as TokenId;
                if last == Some(tok) {
                    // repeat without a blank stays on the same prefix
                    let e = next.entry(prefix.clone()).or_insert(Mass::ZERO);
                    e.non_blank = lse2(e.non_blank, mass.non_blank + lpc);
                    if mass.blank > f64::NEG_INFINITY {
                        let mut ext = prefix.clone();
                        ext.push(tok);
                        let e = next.entry(ext).or_insert(Mass::ZERO);
                        e.non_blank = lse2(e.non_blank, mass.blank + lpc);
                    }
                } else {
                    let mut ext = prefix.clone();
                    ext.push(tok);
                    let e = next.entry(ext).or_insert(Mass::ZERO);
                    e.non_blank = lse2(e.non_blank, total + lpc);
                }
            }
        }
        let mut ranked: Vec<(TokenSeq, Mass)> = next
            .into_iter()
            .filter(|(_, m)| m.total() > f64::NEG_INFINITY)
            .collect();
        ranked.sort_by(by_mass);
        ranked.truncate(beam.width);
        beams = ranked;
    }
    // pruning drops alignments, so rank the survivors by their exact mass
    let mut best: Option<(TokenSeq, f64)> = None;
    for (prefix, _) in beams {
        let lp = sequence_log_prob(logits, &prefix, vocab)?;
        let better = match &best {
            None => true,
            Some((bp, bl)) => lp > *bl || (lp == *bl && prefix < *bp),
        };
        if better {
            best = Some((prefix, lp));
        }
    }
    let (sequence, mass) = best.expect("beam is never empty");
    Ok(DecodeResult {
        sequence,
        score: LogProb::new(mass).unwrap_or(LogProb::ZERO_PROB),
        raw_path: None,
        passes: 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::{for_each_path, qctc_loss};
    use crate::numerics::Rng;
    use std::collections::HashMap;

    fn probs_grid(rows: &[Vec<f64>]) -> Tensor2 {
        Tensor2::from_rows(&rows.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect::<Vec<_>>())
    }

    fn one_hot(path: &[usize], d: usize) -> Tensor2 {
        let mut t = Tensor2::filled(path.len(), d, -30.0);
        for (i, &c) in path.iter().enumerate() {
            t.set(i, c, 30.0);
        }
        t
    }

    /// Exhaustive argmax over collapsed sequences of summed path mass.
    fn exhaustive(logits: &Tensor2, vocab: &Vocab) -> (TokenSeq, f64) {
        let lps: Vec<Vec<f64>> = (0..logits.rows()).map(|i| log_softmax_row(logits.row(i))).collect();
        let mut mass: HashMap<TokenSeq, f64> = HashMap::new();
        for_each_path(logits.rows(), vocab.size(), |p| {
            let lp: f64 = p.iter().enumerate().map(|(i, &c)| lps[i][c as usize]).sum();
            let e = mass.entry(collapse(p, vocab)).or_insert(0.0);
            *e += lp.exp();
        });
        let mut all: Vec<_> = mass.into_iter().collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        (all[0].0.clone(), all[0].1.ln())
    }

    #[test]
    fn greedy_collapses_argmax_path() {
        let v = Vocab::new(3).unwrap();
        let r = nar_greedy(&one_hot(&[1, 0, 2], 3), &v);
        assert_eq!(r.sequence, vec![1, 2]);
        assert_eq!(r.raw_path, Some(vec![1, 0, 2]));
        assert_eq!(r.passes, 1);
        assert!(nar_greedy(&one_hot(&[0, 0, 0], 3), &v).sequence.is_empty());
        assert_eq!(nar_greedy(&one_hot(&[1, 1, 2], 3), &v).sequence, vec![1, 2]);
        assert_eq!(nar_greedy_positional(&one_hot(&[1, 1, 0], 3), &v).sequence, vec![1, 1]);
    }

    #[test]
    fn greedy_ties_pick_lowest_id_and_ignore_row_shifts() {
        let v = Vocab::new(3).unwrap();
        let r = nar_greedy(&Tensor2::from_rows(&[vec![0.0, 1.0, 1.0]]), &v);
        assert_eq!(r.raw_path, Some(vec![1]));
        let mut rng = Rng::new(5);
        let g = Tensor2::randn(5, 3, 2.0, &mut rng);
        let mut shifted = g.clone();
        for i in 0..5 {
            let s = 50.0 * rng.standard_normal();
            shifted.row_mut(i).iter_mut().for_each(|x| *x += s);
        }
        assert_eq!(nar_greedy(&g, &v).raw_path, nar_greedy(&shifted, &v).raw_path);
    }

    #[test]
    fn beam_recovers_mass_that_greedy_misses() {
        let v = Vocab::new(2).unwrap();
        let g = probs_grid(&[vec![0.6, 0.4], vec![0.6, 0.4]]);
        assert!(nar_greedy(&g, &v).sequence.is_empty());
        let r = nar_prefix_beam(&g, &v, &BeamConfig::new(2)).unwrap();
        assert_eq!(r.sequence, vec![1]);
        assert!((r.score.value() - 0.64f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn beam_on_one_hot_grid_matches_greedy() {
        let v = Vocab::new(4).unwrap();
        for path in [[1, 0, 2, 2], [3, 3, 0, 3], [0, 0, 0, 0]] {
            let g = one_hot(&path, 4);
            let b = nar_prefix_beam(&g, &v, &BeamConfig::new(3)).unwrap();
            assert_eq!(b.sequence, nar_greedy(&g, &v).sequence);
        }
    }

    #[test]
    fn full_width_beam_is_exact() {
        let mut rng = Rng::new(77);
        for d in 2..=3 {
            let v = Vocab::new(d).unwrap();
            for n in 1..=4 {
                for _ in 0..20 {
                    let g = Tensor2::randn(n, d, 1.5, &mut rng);
                    let width = d.pow(n as u32);
                    let b = nar_prefix_beam(&g, &v, &BeamConfig::new(width)).unwrap();
                    let (seq, lm) = exhaustive(&g, &v);
                    assert_eq!(b.sequence, seq);
                    assert!((b.score.value() - lm).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn beam_score_is_the_sequence_marginal() {
        let mut rng = Rng::new(78);
        let v = Vocab::new(4).unwrap();
        for _ in 0..20 {
            let g = Tensor2::randn(5, 4, 1.0, &mut rng);
            let b = nar_prefix_beam(&g, &v, &BeamConfig::new(4)).unwrap();
            let lg = qctc_loss(&g, &b.sequence, &v).unwrap();
            assert!((b.score.value() + lg.loss).abs() < 1e-9);
        }
    }

    #[test]
    fn best_mass_grows_with_width() {
        let mut rng = Rng::new(79);
        let v = Vocab::new(4).unwrap();
        for _ in 0..30 {
            let g = Tensor2::randn(6, 4, 1.0, &mut rng);
            let mut prev = f64::NEG_INFINITY;
            for w in [1, 2, 4, 8, 16, 64] {
                let s = nar_prefix_beam(&g, &v, &BeamConfig::new(w)).unwrap().score.value();
                assert!(s >= prev - 1e-12, "width {w}: {s} < {prev}");
                prev = s;
            }
        }
    }
}
