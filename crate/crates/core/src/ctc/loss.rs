//! Alignment-marginal (CTC-style) loss over a grid of query logits, and the
//! position-wise cross-entropy baseline.

use crate::ctc::paths::min_path_length;
use crate::ctc::vocab::{TokenId, Vocab};
use crate::error::{Error, Result};
use crate::numerics::logspace::{log_softmax_row, lse2, lse3};
use crate::numerics::Tensor2;

/// Scalar loss together with its gradient with respect to every logit.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Tensor2,
}

/// `[-, y1, -, y2, ..., yT, -]`: the state space of the alignment DP.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtendedTarget {
    ids: Vec<TokenId>,
    blank: TokenId,
}

impl ExtendedTarget {
    pub fn new(target: &[TokenId], blank: TokenId) -> Self {
        let mut ids = Vec::with_capacity(2 * target.len() + 1);
        ids.push(blank);
        for &t in target {
            ids.push(t);
            ids.push(blank);
        }
        ExtendedTarget { ids, blank }
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Whether state `s` may be entered directly from `s - 2`, skipping the
    /// blank between two different labels.
    fn can_skip_into(&self, s: usize) -> bool {
        s >= 2 && self.ids[s] != self.blank && self.ids[s] != self.ids[s - 2]
    }
}

fn check_grid(logits: &Tensor2, vocab: &Vocab) -> Result<()> {
    if logits.rows() == 0 {
        return Err(Error::usage("logit grid needs at least one position"));
    }
    if logits.cols() != vocab.size() {
        return Err(Error::usage(format!(
            "logit grid has {} columns for a vocabulary of {}",
            logits.cols(),
            vocab.size()
        )));
    }
    if !logits.is_finite() {
        return Err(Error::numerical("logit grid contains non-finite values"));
    }
    Ok(())
}

/// Per-position state occupancies of the alignment DP.
struct Lattice {
    log_probs: Vec<Vec<f64>>,
    alpha: Vec<Vec<f64>>,
    beta: Vec<Vec<f64>>,
    log_z: f64,
}

fn run_lattice(logits: &Tensor2, ext: &ExtendedTarget) -> Lattice {
    let n = logits.rows();
    let s_len = ext.len();
    let ids = ext.ids();
    let ninf = f64::NEG_INFINITY;
    let log_probs: Vec<Vec<f64>> = (0..n).map(|i| log_softmax_row(logits.row(i))).collect();
    let emit = |t: usize, s: usize| log_probs[t][ids[s] as usize];

    let mut alpha = vec![vec![ninf; s_len]; n];
    alpha[0][0] = emit(0, 0);
    if s_len > 1 {
        alpha[0][1] = emit(0, 1);
    }
    for t in 1..n {
        for s in 0..s_len {
            let stay = alpha[t - 1][s];
            let step = if s >= 1 { alpha[t - 1][s - 1] } else { ninf };
            let skip = if ext.can_skip_into(s) { alpha[t - 1][s - 2] } else { ninf };
            let acc = lse3(stay, step, skip);
            alpha[t][s] = if acc == ninf { ninf } else { acc + emit(t, s) };
        }
    }

    let mut beta = vec![vec![ninf; s_len]; n];
    beta[n - 1][s_len - 1] = 0.0;
    if s_len > 1 {
        beta[n - 1][s_len - 2] = 0.0;
    }
    for t in (0..n - 1).rev() {
        for s in 0..s_len {
            let stay = beta[t + 1][s] + emit(t + 1, s);
            let step = if s + 1 < s_len {
                beta[t + 1][s + 1] + emit(t + 1, s + 1)
            } else {
                ninf
            };
            let skip = if s + 2 < s_len && ext.can_skip_into(s + 2) {
                beta[t + 1][s + 2] + emit(t + 1, s + 2)
            } else {
                ninf
            };
            beta[t][s] = lse3(stay, step, skip);
        }
    }

    let last = alpha[n - 1][s_len - 1];
    let log_z = if s_len > 1 {
        lse2(last, alpha[n - 1][s_len - 2])
    } else {
        last
    };
    Lattice {
        log_probs,
        alpha,
        beta,
        log_z,
    }
}

/// Negative log of the total probability of every alignment path that
/// collapses to `target`, and its exact gradient with respect to the logits.
///
/// Each position's distribution is the softmax of its logit row. The gradient
/// is `softmax - posterior`, where the posterior is the probability, under the
/// distribution restricted to valid paths, that a position emits each token.
pub fn qctc_loss(logits: &Tensor2, target: &[TokenId], vocab: &Vocab) -> Result<LossGrad> {
    check_grid(logits, vocab)?;
    vocab.check_target(target)?;
    let n = logits.rows();
    let required = min_path_length(target);
    if n < required {
        return Err(Error::InfeasibleAlignment {
            positions: n,
            required,
        });
    }
    let ext = ExtendedTarget::new(target, vocab.blank_id());
    let lat = run_lattice(logits, &ext);
    if !lat.log_z.is_finite() {
        return Err(Error::numerical(format!(
            "alignment log-likelihood is {} for a feasible target",
            lat.log_z
        )));
    }

    let d = vocab.size();
    let mut grad = Tensor2::zeros(n, d);
    for t in 0..n {
        let row = grad.row_mut(t);
        for (c, g) in row.iter_mut().enumerate() {
            *g = lat.log_probs[t][c].exp();
        }
        for (s, &tok) in ext.ids().iter().enumerate() {
            let a = lat.alpha[t][s];
            let b = lat.beta[t][s];
            if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
                continue;
            }
            row[tok as usize] -= (a + b - lat.log_z).exp();
        }
    }
    Ok(LossGrad {
        loss: (-lat.log_z).max(0.0),
        grad,
    })
}

/// Log of the total probability of the alignments collapsing to `target`,
/// from the forward pass alone.
pub fn sequence_log_prob(logits: &Tensor2, target: &[TokenId], vocab: &Vocab) -> Result<f64> {
    check_grid(logits, vocab)?;
    vocab.check_target(target)?;
    let n = logits.rows();
    let required = min_path_length(target);
    if n < required {
        return Err(Error::InfeasibleAlignment {
            positions: n,
            required,
        });
    }
    let ext = ExtendedTarget::new(target, vocab.blank_id());
    let ids = ext.ids();
    let ninf = f64::NEG_INFINITY;
    let lp0 = log_softmax_row(logits.row(0));
    let mut alpha = vec![ninf; ext.len()];
    alpha[0] = lp0[ids[0] as usize];
    if ext.len() > 1 {
        alpha[1] = lp0[ids[1] as usize];
    }
    let mut next = vec![ninf; ext.len()];
    for t in 1..n {
        let lp = log_softmax_row(logits.row(t));
        for s in 0..ext.len() {
            let step = if s >= 1 { alpha[s - 1] } else { ninf };
            let skip = if ext.can_skip_into(s) { alpha[s - 2] } else { ninf };
            let acc = lse3(alpha[s], step, skip);
            next[s] = if acc == ninf { ninf } else { acc + lp[ids[s] as usize] };
        }
        std::mem::swap(&mut alpha, &mut next);
    }
    let s_len = ext.len();
    Ok(if s_len > 1 {
        lse2(alpha[s_len - 1], alpha[s_len - 2])
    } else {
        alpha[0]
    }
    .min(0.0))
}

/// Posterior token marginals `softmax - grad` recovered from a [`qctc_loss`]
/// gradient; each row sums to one.
pub fn posterior_marginals(logits: &Tensor2, grad: &Tensor2) -> Tensor2 {
    let mut out = Tensor2::zeros(logits.rows(), logits.cols());
    for t in 0..logits.rows() {
        let p = crate::numerics::softmax_row(logits.row(t));
        for (c, o) in out.row_mut(t).iter_mut().enumerate() {
            *o = p[c] - grad.get(t, c);
        }
    }
    out
}

/// Position-wise cross-entropy with the target padded to the grid length by
/// blanks; averaged over positions.
pub fn ce_loss(logits: &Tensor2, target: &[TokenId], vocab: &Vocab) -> Result<LossGrad> {
    check_grid(logits, vocab)?;
    vocab.check_target(target)?;
    let n = logits.rows();
    if target.len() > n {
        return Err(Error::usage(format!(
            "cross-entropy target of length {} does not fit {n} positions",
            target.len()
        )));
    }
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Tensor2::zeros(n, vocab.size());
    for i in 0..n {
        let gold = target.get(i).copied().unwrap_or(vocab.blank_id()) as usize;
        let lp = log_softmax_row(logits.row(i));
        loss -= lp[gold];
        let row = grad.row_mut(i);
        for (c, g) in row.iter_mut().enumerate() {
            *g = lp[c].exp() * scale;
        }
        row[gold] -= scale;
    }
    Ok(LossGrad {
        loss: loss * scale,
        grad,
    })
}

/// Mean of per-example losses and per-example gradients scaled to match.
pub fn batch_mean(items: Vec<LossGrad>) -> (f64, Vec<Tensor2>) {
    let k = items.len().max(1) as f64;
    let mut total = 0.0;
    let grads = items
        .into_iter()
        .map(|mut lg| {
            total += lg.loss;
            lg.grad.scale_in_place(1.0 / k);
            lg.grad
        })
        .collect();
    (total / k, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::paths::{collapse, enumerate_valid_paths};
    use crate::numerics::{grad_check, Rng};

    /// `-log` of the summed probability of enumerated valid paths.
    fn enumeration_nll(logits: &Tensor2, target: &[TokenId], vocab: &Vocab) -> f64 {
        let paths = enumerate_valid_paths(target, logits.rows(), vocab).unwrap();
        let probs: Vec<Vec<f64>> = (0..logits.rows())
            .map(|i| {
                let z: f64 = logits.row(i).iter().map(|v| v.exp()).sum();
                logits.row(i).iter().map(|v| v.exp() / z).collect()
            })
            .collect();
        let total: f64 = paths
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &c)| probs[i][c as usize]).product::<f64>())
            .sum();
        -total.ln()
    }

    fn random_target(rng: &mut Rng, d: usize, max_len: usize, n: usize) -> Vec<TokenId> {
        loop {
            let t = rng.range_inclusive(0, max_len);
            let y: Vec<TokenId> = (0..t).map(|_| 1 + rng.below(d - 1) as TokenId).collect();
            if min_path_length(&y) <= n {
                return y;
            }
        }
    }

    #[test]
    fn single_position_uniform() {
        let v = Vocab::new(3).unwrap();
        let lg = qctc_loss(&Tensor2::zeros(1, 3), &[1], &v).unwrap();
        assert!((lg.loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_positions_binary_uniform() {
        let v = Vocab::new(2).unwrap();
        let lg = qctc_loss(&Tensor2::zeros(2, 2), &[1], &v).unwrap();
        assert!((lg.loss - 0.287_682_072_451_780_9).abs() < 1e-12);
        assert!((lg.loss + (0.75f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_target_is_all_blank_path() {
        let v = Vocab::new(3).unwrap();
        let mut rng = Rng::new(2);
        let logits = Tensor2::randn(4, 3, 1.0, &mut rng);
        let lg = qctc_loss(&logits, &[], &v).unwrap();
        let expected: f64 = (0..4).map(|i| -log_softmax_row(logits.row(i))[0]).sum();
        assert!((lg.loss - expected).abs() < 1e-12);
    }

    #[test]
    fn matches_enumeration_on_random_instances() {
        let mut rng = Rng::new(17);
        for _ in 0..60 {
            let d = rng.range_inclusive(2, 5);
            let n = rng.range_inclusive(1, 6);
            let v = Vocab::new(d).unwrap();
            let y = random_target(&mut rng, d, 4.min(n), n);
            let logits = Tensor2::randn(n, d, 2.0, &mut rng);
            let lg = qctc_loss(&logits, &y, &v).unwrap();
            let oracle = enumeration_nll(&logits, &y, &v);
            assert!((lg.loss - oracle).abs() < 1e-9, "{} vs {oracle}", lg.loss);
            let fwd = sequence_log_prob(&logits, &y, &v).unwrap();
            assert!((fwd + oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(23);
        for _ in 0..10 {
            let d = rng.range_inclusive(2, 5);
            let n = rng.range_inclusive(1, 6);
            let v = Vocab::new(d).unwrap();
            let y = random_target(&mut rng, d, 3.min(n), n);
            let logits = Tensor2::randn(n, d, 1.5, &mut rng);
            let f = |x: &[f64]| {
                let g = Tensor2::from_vec(n, d, x.to_vec());
                let lg = qctc_loss(&g, &y, &v).unwrap();
                (lg.loss, lg.grad.into_vec())
            };
            let err = grad_check(f, logits.data(), 1e-5).unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn posteriors_are_normalized() {
        let mut rng = Rng::new(29);
        let v = Vocab::new(4).unwrap();
        let logits = Tensor2::randn(6, 4, 1.0, &mut rng);
        let lg = qctc_loss(&logits, &[1, 1, 3], &v).unwrap();
        let post = posterior_marginals(&logits, &lg.grad);
        for t in 0..6 {
            let s: f64 = post.row(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(post.row(t).iter().all(|&p| p > -1e-12));
        }
    }

    #[test]
    fn infeasible_alignment_is_typed() {
        let v = Vocab::new(3).unwrap();
        let err = qctc_loss(&Tensor2::zeros(2, 3), &[1, 1], &v).unwrap_err();
        assert!(matches!(
            err,
            Error::InfeasibleAlignment {
                positions: 2,
                required: 3
            }
        ));
    }

    #[test]
    fn bad_inputs_are_usage_errors() {
        let v = Vocab::new(3).unwrap();
        assert!(matches!(qctc_loss(&Tensor2::zeros(2, 4), &[1], &v), Err(Error::Usage(_))));
        assert!(matches!(qctc_loss(&Tensor2::zeros(2, 3), &[0], &v), Err(Error::Usage(_))));
        let mut bad = Tensor2::zeros(2, 3);
        bad.set(0, 0, f64::NAN);
        assert!(matches!(qctc_loss(&bad, &[1], &v), Err(Error::Numerical(_))));
    }

    #[test]
    fn confident_valid_path_drives_loss_to_zero() {
        let v = Vocab::new(3).unwrap();
        let path: [TokenId; 4] = [1, 0, 2, 2];
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let mut logits = Tensor2::zeros(4, 3);
            for (i, &c) in path.iter().enumerate() {
                logits.set(i, c as usize, margin);
            }
            let lg = qctc_loss(&logits, &collapse(&path, &v), &v).unwrap();
            assert!(lg.loss >= 0.0 && lg.loss < prev);
            prev = lg.loss;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn ce_examples() {
        let v = Vocab::new(3).unwrap();
        let lg = ce_loss(&Tensor2::zeros(3, 3), &[1, 2, 1], &v).unwrap();
        assert!((lg.loss - 3f64.ln()).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for m in [1.0, 10.0, 40.0] {
            let mut logits = Tensor2::zeros(3, 3);
            logits.set(0, 1, m);
            logits.set(1, 2, m);
            logits.set(2, 0, m);
            let l = ce_loss(&logits, &[1, 2], &v).unwrap().loss;
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-15);
        assert!(matches!(ce_loss(&Tensor2::zeros(1, 3), &[1, 2], &v), Err(Error::Usage(_))));
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = Rng::new(31);
        let v = Vocab::new(5).unwrap();
        let logits = Tensor2::randn(4, 5, 1.0, &mut rng);
        let f = |x: &[f64]| {
            let lg = ce_loss(&Tensor2::from_vec(4, 5, x.to_vec()), &[3, 1], &v).unwrap();
            (lg.loss, lg.grad.into_vec())
        };
        assert!(grad_check(f, logits.data(), 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn one_slot_shift_penalizes_ce_more_than_qctc() {
        // Logits spell the target one slot late: [-, 1, 2, 3, -].
        let v = Vocab::new(5).unwrap();
        let target = [1, 2, 3];
        let mut logits = Tensor2::zeros(5, 5);
        for (i, c) in [0usize, 1, 2, 3, 0].into_iter().enumerate() {
            logits.set(i, c, 4.0);
        }
        let ce = ce_loss(&logits, &target, &v).unwrap().loss;
        let ctc = qctc_loss(&logits, &target, &v).unwrap().loss;
        assert!(ce > ctc, "{ce} vs {ctc}");
        assert!(ce > 10.0 * ctc);
    }

    #[test]
    fn batch_mean_scales_grads() {
        let a = LossGrad { loss: 1.0, grad: Tensor2::filled(1, 2, 2.0) };
        let b = LossGrad { loss: 3.0, grad: Tensor2::filled(1, 2, 4.0) };
        let (l, g) = batch_mean(vec![a, b]);
        assert_eq!(l, 2.0);
        assert_eq!(g[0].data(), &[1.0, 1.0]);
        assert_eq!(g[1].data(), &[2.0, 2.0]);
    }
}
