use serde::{Deserialize, Serialize};

use crate::ctc::{ce_loss, qctc_loss, LossGrad, TokenId};
use crate::error::{Error, Result};
use crate::model::config::DecoderKind;
use crate::model::params::ModelParams;
use crate::model::transformer::Graph;
use crate::numerics::{log_softmax_row, Tensor2};

/// Training objective applied to a parallel decoder's logit grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentObjective {
    /// Marginal over all alignments of the target to the grid.
    Qctc,
    /// Position-wise cross-entropy against the blank-padded target.
    Ce,
}

/// Loss of one example and its gradient for every parameter tensor.
#[derive(Clone, Debug)]
pub struct ExampleGrad {
    pub loss: f64,
    pub grads: Vec<Tensor2>,
}

/// Student loss of a parallel model on one example.
pub fn student_loss(
    params: &ModelParams,
    src: &[TokenId],
    target: &[TokenId],
    objective: StudentObjective,
) -> Result<ExampleGrad> {
    let cfg = params.config();
    let mut g = Graph::new(params);
    let enc = g.encode(src)?;
    let logits = match cfg.decoder_kind {
        DecoderKind::LqtParallel => g.decode_queries(enc)?,
        DecoderKind::EncoderOutputParallel => g.decode_encoder_states(enc)?,
        DecoderKind::Autoregressive => {
            return Err(Error::usage("student objectives need a parallel decoder"))
        }
    };
    let grid = g.value(logits);
    let LossGrad { loss, grad } = match objective {
        StudentObjective::Qctc => qctc_loss(grid, target, &cfg.vocab_out)?,
        StudentObjective::Ce => ce_loss(grid, target, &cfg.vocab_out)?,
    };
    if !loss.is_finite() {
        return Err(Error::numerical("non-finite student loss"));
    }
    let grads = g.backward(logits, grad);
    Ok(ExampleGrad { loss, grads })
}

/// Teacher-forced cross-entropy of an autoregressive model: predicts
/// `y1..yT, EOS` from `BOS, y1..yT`, averaged over the `T + 1` positions.
pub fn teacher_loss(params: &ModelParams, src: &[TokenId], target: &[TokenId]) -> Result<ExampleGrad> {
    let cfg = params.config();
    if cfg.decoder_kind != DecoderKind::Autoregressive {
        return Err(Error::usage("teacher loss needs an autoregressive decoder"));
    }
    cfg.vocab_out.check_target(target)?;
    if target.len() > cfg.max_tgt_len {
        return Err(Error::usage(format!(
            "target of length {} exceeds max_tgt_len {}",
            target.len(),
            cfg.max_tgt_len
        )));
    }
    let mut prefix = Vec::with_capacity(target.len() + 1);
    prefix.push(cfg.bos_id());
    prefix.extend_from_slice(target);
    let mut gold = target.to_vec();
    gold.push(cfg.eos_id());

    let mut g = Graph::new(params);
    let enc = g.encode(src)?;
    let logits = g.decode_causal(enc, &prefix)?;
    let grid = g.value(logits);
    let scale = 1.0 / gold.len() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor2::zeros(grid.rows(), grid.cols());
    for (i, &y) in gold.iter().enumerate() {
        let lp = log_softmax_row(grid.row(i));
        loss -= lp[y as usize];
        let row = grad.row_mut(i);
        for (c, v) in row.iter_mut().enumerate() {
            *v = lp[c].exp() * scale;
        }
        row[y as usize] -= scale;
    }
    let loss = loss * scale;
    if !loss.is_finite() {
        return Err(Error::numerical("non-finite teacher loss"));
    }
    let grads = g.backward(logits, grad);
    Ok(ExampleGrad { loss, grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::Vocab;
    use crate::model::config::ModelConfig;
    use crate::numerics::{grad_check_coords, Rng};

    fn tiny(kind: DecoderKind) -> ModelParams {
        let mut c = ModelConfig::new(Vocab::new(6).unwrap(), Vocab::new(5).unwrap(), kind);
        c.d_model = 8;
        c.n_heads = 2;
        c.n_enc_layers = 1;
        c.n_dec_layers = 1;
        c.ffn_mult = 2.0;
        c.n_queries = 4;
        c.max_src_len = 6;
        c.max_tgt_len = 4;
        c.init_std = 0.5;
        let mut p = ModelParams::init(&c, &mut Rng::new(11)).unwrap();
        // perturb the zero/one initialized tensors so every path is exercised
        let mut rng = Rng::new(12);
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v += 0.1 * rng.standard_normal();
            }
        }
        p
    }

    fn check<F>(p: &ModelParams, f: F)
    where
        F: Fn(&ModelParams) -> ExampleGrad,
    {
        let point = p.to_flat();
        let eval = |x: &[f64]| {
            let mut q = p.clone();
            q.set_flat(x);
            let eg = f(&q);
            let flat: Vec<f64> = eg.grads.iter().flat_map(|t| t.data().iter().copied()).collect();
            (eg.loss, flat)
        };
        let stride = (point.len() / 150).max(1);
        let coords = (0..point.len()).step_by(stride);
        let err = grad_check_coords(eval, &point, 1e-5, coords).unwrap();
        assert!(err < 1e-5, "relative gradient error {err}");
    }

    #[test]
    fn lqt_qctc_gradient_matches_finite_differences() {
        let p = tiny(DecoderKind::LqtParallel);
        check(&p, |q| student_loss(q, &[1, 2, 3], &[2, 2], StudentObjective::Qctc).unwrap());
    }

    #[test]
    fn lqt_ce_gradient_matches_finite_differences() {
        let p = tiny(DecoderKind::LqtParallel);
        check(&p, |q| student_loss(q, &[4, 1], &[3, 1], StudentObjective::Ce).unwrap());
    }

    #[test]
    fn encoder_input_gradient_matches_finite_differences() {
        let p = tiny(DecoderKind::EncoderOutputParallel);
        check(&p, |q| {
            student_loss(q, &[1, 2, 3, 4], &[1, 4], StudentObjective::Qctc).unwrap()
        });
    }

    #[test]
    fn teacher_gradient_matches_finite_differences() {
        let p = tiny(DecoderKind::Autoregressive);
        check(&p, |q| teacher_loss(q, &[5, 3, 1], &[4, 4, 2]).unwrap());
    }

    #[test]
    fn wrong_kind_and_infeasible_targets_are_rejected() {
        let ar = tiny(DecoderKind::Autoregressive);
        assert!(matches!(
            student_loss(&ar, &[1], &[1], StudentObjective::Qctc),
            Err(Error::Usage(_))
        ));
        let lqt = tiny(DecoderKind::LqtParallel);
        assert!(teacher_loss(&lqt, &[1], &[1]).is_err());
        let err = student_loss(&lqt, &[1], &[1, 1, 1], StudentObjective::Qctc).unwrap_err();
        assert!(err.is_infeasible());
        assert!(teacher_loss(&ar, &[1], &[1, 2, 3, 4, 1]).is_err());
    }
}
