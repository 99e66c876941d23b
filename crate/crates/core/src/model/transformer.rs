//! Pre-norm transformer encoder and the three decoder variants, expressed as
//! operations on a [`Tape`] so that the same code serves inference and
//! training.

use crate::ctc::TokenId;
use crate::error::{Error, Result};
use crate::model::config::DecoderKind;
use crate::model::params::{AttnIdx, FfnIdx, LnIdx, ModelParams};
use crate::numerics::{Tape, Tensor2, Var};

/// Per-position encoder states, one row per source position (`L x D`).
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub states: Tensor2,
    pub src_len: usize,
}

/// A decoder pass result with its matrix-product cost.
#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub logits: Tensor2,
    /// Multiply-accumulates spent inside the decoder stack and output layer.
    pub flops: u64,
}

/// Forward graph of one example over borrowed parameters.
pub struct Graph<'p> {
    tape: Tape<'p>,
    params: &'p ModelParams,
    vars: Vec<Var>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        let mut tape = Tape::new();
        let vars = params
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(t, i))
            .collect();
        Graph { tape, params, vars }
    }

    pub fn tape(&self) -> &Tape<'p> {
        &self.tape
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        self.tape.value(v)
    }

    fn p(&self, slot: usize) -> Var {
        self.vars[slot]
    }

    fn linear(&mut self, x: Var, w: usize, b: usize) -> Var {
        let y = self.tape.matmul(x, self.p(w));
        self.tape.add_row(y, self.p(b))
    }

    fn ln(&mut self, x: Var, idx: LnIdx) -> Var {
        self.tape.layer_norm(x, self.p(idx.gain), self.p(idx.bias))
    }

    fn ffn(&mut self, x: Var, idx: FfnIdx) -> Var {
        let h = self.linear(x, idx.w1, idx.b1);
        let h = self.tape.gelu(h);
        self.linear(h, idx.w2, idx.b2)
    }

    /// Multi-head attention of `queries` over `keys`. `bias` is a learned
    /// additive score term shared by all heads; `mask` a constant one.
    fn attention(
        &mut self,
        queries: Var,
        keys: Var,
        idx: AttnIdx,
        bias: Option<Var>,
        mask: Option<&Tensor2>,
    ) -> Var {
        let heads = self.params.config().n_heads;
        let hd = self.params.config().head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let q = self.linear(queries, idx.wq, idx.bq);
        let k = self.linear(keys, idx.wk, idx.bk);
        let v = self.linear(keys, idx.wv, idx.bv);
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    self.tape.slice_cols(q, h * hd, hd),
                    self.tape.slice_cols(k, h * hd, hd),
                    self.tape.slice_cols(v, h * hd, hd),
                )
            };
            let s = self.tape.matmul_t(qh, kh);
            let mut s = self.tape.scale(s, scale);
            if let Some(b) = bias {
                s = self.tape.add(s, b);
            }
            if let Some(m) = mask {
                s = self.tape.add_const(s, m);
            }
            let p = self.tape.softmax_rows(s);
            outs.push(self.tape.matmul(p, vh));
        }
        let joined = if heads == 1 {
            outs[0]
        } else {
            self.tape.concat_cols(&outs)
        };
        self.linear(joined, idx.wo, idx.bo)
    }

    /// Encoder states for `src` (`L x D`).
    pub fn encode(&mut self, src: &[TokenId]) -> Result<Var> {
        let cfg = self.params.config();
        if src.is_empty() || src.len() > cfg.max_src_len {
            return Err(Error::usage(format!(
                "source length {} outside [1, {}]",
                src.len(),
                cfg.max_src_len
            )));
        }
        if let Some(&bad) = src.iter().find(|&&t| !cfg.vocab_in.contains(t)) {
            return Err(Error::usage(format!("source token {bad} outside the input vocabulary")));
        }
        let layout = self.params.layout().clone();
        let ids: Vec<usize> = src.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..src.len()).collect();
        let tok = self.tape.gather(self.p(layout.src_embed), &ids);
        let pos = self.tape.gather(self.p(layout.src_pos), &positions);
        let mut x = self.tape.add(tok, pos);
        for layer in &layout.enc_layers {
            let h = self.ln(x, layer.ln1);
            let a = self.attention(h, h, layer.attn, None, None);
            x = self.tape.add(x, a);
            let h = self.ln(x, layer.ln2);
            let f = self.ffn(h, layer.ffn);
            x = self.tape.add(x, f);
        }
        Ok(self.ln(x, layout.enc_ln))
    }

    /// Places precomputed encoder states on the tape as a constant.
    pub fn encoder_constant(&mut self, enc: &EncoderOutput) -> Var {
        self.tape.input(enc.states.clone())
    }

    fn decoder_stack(
        &mut self,
        x0: Var,
        enc: Var,
        self_bias: Option<Var>,
        mask: Option<&Tensor2>,
    ) -> Var {
        let layout = self.params.layout().clone();
        let mut x = x0;
        for layer in &layout.dec_layers {
            let h = self.ln(x, layer.ln1);
            let a = self.attention(h, h, layer.self_attn, self_bias, mask);
            x = self.tape.add(x, a);
            let h = self.ln(x, layer.ln2);
            let c = self.attention(h, enc, layer.cross_attn, None, None);
            x = self.tape.add(x, c);
            let h = self.ln(x, layer.ln3);
            let f = self.ffn(h, layer.ffn);
            x = self.tape.add(x, f);
        }
        let h = self.ln(x, layout.dec_ln);
        self.linear(h, layout.out_w, layout.out_b)
    }

    fn expect_kind(&self, kind: DecoderKind) -> Result<()> {
        let actual = self.params.config().decoder_kind;
        if actual != kind {
            return Err(Error::usage(format!(
                "operation needs a {kind:?} decoder but the model has {actual:?}"
            )));
        }
        Ok(())
    }

    /// `N x d` logits from the learnable queries. Queries attend to each
    /// other without a mask, with the learned position bias added to the
    /// self-attention scores of every layer.
    pub fn decode_queries(&mut self, enc: Var) -> Result<Var> {
        self.expect_kind(DecoderKind::LqtParallel)?;
        let layout = self.params.layout();
        let q = self.p(layout.query_tokens.expect("query tokens"));
        let bias = self.p(layout.query_pos_bias.expect("query position bias"));
        Ok(self.decoder_stack(q, enc, Some(bias), None))
    }

    /// `L x d` logits from the encoder states used as decoder inputs.
    pub fn decode_encoder_states(&mut self, enc: Var) -> Result<Var> {
        self.expect_kind(DecoderKind::EncoderOutputParallel)?;
        Ok(self.decoder_stack(enc, enc, None, None))
    }

    /// Causal decoder over `prefix` (which starts with BOS); row `t` holds
    /// the logits for the token following `prefix[..=t]`.
    pub fn decode_causal(&mut self, enc: Var, prefix: &[TokenId]) -> Result<Var> {
        self.expect_kind(DecoderKind::Autoregressive)?;
        let cfg = self.params.config();
        if prefix.first() != Some(&cfg.bos_id()) {
            return Err(Error::usage("autoregressive prefix must start with BOS"));
        }
        if prefix.len() > cfg.max_tgt_len + 1 {
            return Err(Error::usage(format!(
                "prefix of length {} exceeds max_tgt_len {} + BOS",
                prefix.len(),
                cfg.max_tgt_len
            )));
        }
        if let Some(&bad) = prefix[1..]
            .iter()
            .find(|&&t| t == cfg.bos_id() || t as usize > cfg.vocab_out.size())
        {
            return Err(Error::usage(format!("prefix token {bad} is not an output token")));
        }
        let layout = self.params.layout().clone();
        let ids: Vec<usize> = prefix.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..prefix.len()).collect();
        let tok = self.tape.gather(self.p(layout.tgt_embed.expect("target embedding")), &ids);
        let pos = self.tape.gather(self.p(layout.tgt_pos.expect("target positions")), &positions);
        let x = self.tape.add(tok, pos);
        let mask = causal_mask(prefix.len());
        Ok(self.decoder_stack(x, enc, None, Some(&mask)))
    }

    /// Runs `build` and reports the matrix-product work it recorded.
    pub fn measured<T>(&mut self, build: impl FnOnce(&mut Self) -> Result<T>) -> Result<(T, u64)> {
        let before = self.tape.matmul_flops();
        let out = build(self)?;
        Ok((out, self.tape.matmul_flops() - before))
    }

    /// Gradients for every parameter slot (zeros where unused) given the
    /// gradient `seed` of the objective with respect to `output`.
    pub fn backward(&self, output: Var, seed: Tensor2) -> Vec<Tensor2> {
        let grads = self.tape.backward(output, seed, self.vars.len());
        grads
            .into_iter()
            .zip(self.params.tensors())
            .map(|(g, t)| g.unwrap_or_else(|| Tensor2::zeros(t.rows(), t.cols())))
            .collect()
    }
}

/// `-inf` strictly above the diagonal.
pub fn causal_mask(n: usize) -> Tensor2 {
    let mut m = Tensor2::zeros(n, n);
    for r in 0..n {
        for c in r + 1..n {
            m.set(r, c, f64::NEG_INFINITY);
        }
    }
    m
}

/// Encoder states for `src`.
pub fn encode(params: &ModelParams, src: &[TokenId]) -> Result<EncoderOutput> {
    let mut g = Graph::new(params);
    let v = g.encode(src)?;
    Ok(EncoderOutput {
        states: g.value(v).clone(),
        src_len: src.len(),
    })
}

fn check_enc(params: &ModelParams, enc: &EncoderOutput) -> Result<()> {
    let cfg = params.config();
    if enc.states.cols() != cfg.d_model || enc.states.rows() != enc.src_len {
        return Err(Error::usage("encoder output does not match the model width"));
    }
    if enc.src_len == 0 || enc.src_len > cfg.max_src_len {
        return Err(Error::usage("encoder output length outside [1, max_src_len]"));
    }
    Ok(())
}

/// One parallel pass of the query-token decoder: the full `N x d` grid.
pub fn decode_parallel(params: &ModelParams, enc: &EncoderOutput) -> Result<DecoderOutput> {
    check_enc(params, enc)?;
    let mut g = Graph::new(params);
    let e = g.encoder_constant(enc);
    let (v, flops) = g.measured(|g| g.decode_queries(e))?;
    Ok(DecoderOutput {
        logits: g.value(v).clone(),
        flops,
    })
}

/// One parallel pass of the encoder-input decoder: an `L x d` grid.
pub fn decode_parallel_encoder_input(
    params: &ModelParams,
    enc: &EncoderOutput,
) -> Result<DecoderOutput> {
    check_enc(params, enc)?;
    let mut g = Graph::new(params);
    let e = g.encoder_constant(enc);
    let (v, flops) = g.measured(|g| g.decode_encoder_states(e))?;
    Ok(DecoderOutput {
        logits: g.value(v).clone(),
        flops,
    })
}

/// Next-token logits (output vocabulary plus EOS) after `prefix`.
pub fn decode_ar_step(
    params: &ModelParams,
    enc: &EncoderOutput,
    prefix: &[TokenId],
) -> Result<(Vec<f64>, u64)> {
    check_enc(params, enc)?;
    let mut g = Graph::new(params);
    let e = g.encoder_constant(enc);
    let (v, flops) = g.measured(|g| g.decode_causal(e, prefix))?;
    let logits = g.value(v);
    Ok((logits.row(logits.rows() - 1).to_vec(), flops))
}

/// Teacher-forced logits for every prefix of `prefix` in one pass.
pub fn decode_ar_teacher_forced(
    params: &ModelParams,
    enc: &EncoderOutput,
    prefix: &[TokenId],
) -> Result<Tensor2> {
    check_enc(params, enc)?;
    let mut g = Graph::new(params);
    let e = g.encoder_constant(enc);
    let v = g.decode_causal(e, prefix)?;
    Ok(g.value(v).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::Vocab;
    use crate::model::config::ModelConfig;
    use crate::numerics::Rng;

    fn params(kind: DecoderKind, seed: u64) -> ModelParams {
        let mut c = ModelConfig::new(Vocab::new(7).unwrap(), Vocab::new(5).unwrap(), kind);
        c.d_model = 16;
        c.n_heads = 2;
        c.n_enc_layers = 1;
        c.n_dec_layers = 2;
        c.n_queries = 6;
        c.max_src_len = 10;
        c.max_tgt_len = 8;
        c.init_std = 0.3;
        ModelParams::init(&c, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn encode_is_deterministic_and_shaped() {
        let p = params(DecoderKind::LqtParallel, 1);
        let a = encode(&p, &[1, 2, 3, 4]).unwrap();
        let b = encode(&p, &[1, 2, 3, 4]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.states.shape(), (4, 16));
        let c = encode(&p, &[4, 3, 2, 1]).unwrap();
        assert_ne!(a.states, c.states);
        assert!(encode(&p, &[]).is_err());
        assert!(encode(&p, &[1; 11]).is_err());
        assert!(encode(&p, &[9]).is_err());
    }

    #[test]
    fn parallel_grid_shape_is_fixed() {
        let p = params(DecoderKind::LqtParallel, 2);
        for len in [1, 3, 9] {
            let enc = encode(&p, &vec![2; len]).unwrap();
            let out = decode_parallel(&p, &enc).unwrap();
            assert_eq!(out.logits.shape(), (6, 5));
            assert!(out.flops > 0);
        }
    }

    #[test]
    fn zeroed_cross_attention_ignores_encoder() {
        let mut p = params(DecoderKind::LqtParallel, 3);
        for l in 0..2 {
            for w in ["wv", "wo"] {
                let t = p.get_mut(&format!("dec.{l}.cross.{w}")).unwrap();
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let a = decode_parallel(&p, &encode(&p, &[1, 2, 3]).unwrap()).unwrap();
        let b = decode_parallel(&p, &encode(&p, &[6, 5, 4, 3, 2]).unwrap()).unwrap();
        assert_eq!(a.logits, b.logits);
        let q = params(DecoderKind::LqtParallel, 3);
        let c = decode_parallel(&q, &encode(&q, &[1, 2, 3]).unwrap()).unwrap();
        let d = decode_parallel(&q, &encode(&q, &[6, 5, 4, 3, 2]).unwrap()).unwrap();
        assert_ne!(c.logits, d.logits);
    }

    #[test]
    fn queries_attend_bidirectionally() {
        let p = params(DecoderKind::LqtParallel, 4);
        let enc = encode(&p, &[1, 2, 3]).unwrap();
        let base = decode_parallel(&p, &enc).unwrap().logits;
        let j = 5;
        let mut q = p.clone();
        let qt = q.get_mut("query.tokens").unwrap();
        for c in 0..16 {
            qt.set(j, c, qt.get(j, c) + 0.5);
        }
        let moved = decode_parallel(&q, &enc).unwrap().logits;
        // the last query influences an earlier position
        assert!((0..j).any(|i| moved.row(i) != base.row(i)));
    }

    #[test]
    fn encoder_input_decoder_has_source_length_rows() {
        let p = params(DecoderKind::EncoderOutputParallel, 5);
        let enc = encode(&p, &[1, 2, 3, 4, 5, 6, 1]).unwrap();
        let a = decode_parallel_encoder_input(&p, &enc).unwrap();
        let b = decode_parallel_encoder_input(&p, &enc).unwrap();
        assert_eq!(a.logits.shape(), (7, 5));
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn longer_inputs_cost_the_encoder_input_decoder_more() {
        let lqt = params(DecoderKind::LqtParallel, 6);
        let eo = params(DecoderKind::EncoderOutputParallel, 6);
        let src: Vec<TokenId> = (0..9).map(|i| 1 + i % 6).collect();
        let f_lqt = decode_parallel(&lqt, &encode(&lqt, &src).unwrap()).unwrap().flops;
        let f_eo = decode_parallel_encoder_input(&eo, &encode(&eo, &src).unwrap())
            .unwrap()
            .flops;
        assert!(f_eo > f_lqt, "{f_eo} vs {f_lqt}");
    }

    #[test]
    fn kind_mismatch_is_usage_error() {
        let p = params(DecoderKind::Autoregressive, 7);
        let enc = encode(&p, &[1, 2]).unwrap();
        assert!(matches!(decode_parallel(&p, &enc), Err(Error::Usage(_))));
        assert!(matches!(decode_parallel_encoder_input(&p, &enc), Err(Error::Usage(_))));
        let q = params(DecoderKind::LqtParallel, 7);
        let enc = encode(&q, &[1, 2]).unwrap();
        assert!(matches!(decode_ar_step(&q, &enc, &[q.config().bos_id()]), Err(Error::Usage(_))));
    }

    #[test]
    fn ar_step_is_causal_and_prefix_sensitive() {
        let p = params(DecoderKind::Autoregressive, 8);
        let bos = p.config().bos_id();
        let enc = encode(&p, &[3, 1, 4]).unwrap();
        let seq = [bos, 2, 4, 1, 3];
        let full = decode_ar_teacher_forced(&p, &enc, &seq).unwrap();
        assert_eq!(full.cols(), 6);
        for t in 0..seq.len() {
            let (step, _) = decode_ar_step(&p, &enc, &seq[..=t]).unwrap();
            for (a, b) in step.iter().zip(full.row(t)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let (a, _) = decode_ar_step(&p, &enc, &[bos, 2, 4]).unwrap();
        let (b, _) = decode_ar_step(&p, &enc, &[bos, 2, 3]).unwrap();
        assert_ne!(a, b);
        assert!(decode_ar_step(&p, &enc, &[2, 4]).is_err());
    }
}
