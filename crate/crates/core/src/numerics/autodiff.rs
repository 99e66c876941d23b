//! Reverse-mode differentiation over [`Tensor2`] values.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! output value. [`Tape::backward`] walks the nodes in reverse, applying each
//! operation's vector-Jacobian product. Parameters are borrowed rather than
//! copied onto the tape and are identified by their slot index so that
//! gradients can be gathered per parameter afterwards.

use std::borrow::Cow;

use crate::numerics::tensor::{axpy, dot, Tensor2};

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// `x + 1 x n` row vector broadcast over rows.
    AddRow(Var, Var),
    /// `x + c` for a constant `c`; used for attention masks.
    AddConst(Var),
    Scale(Var, f64),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Tensor2,
        rstd: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
}

struct Node<'p> {
    value: Cow<'p, Tensor2>,
    op: Op,
}

/// Operation recorder for one forward pass.
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    matmul_flops: u64,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
            matmul_flops: 0,
        }
    }

    /// Multiply-accumulate count of all matrix products recorded so far.
    pub fn matmul_flops(&self) -> u64 {
        self.matmul_flops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor2>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    /// A constant input; gradients flowing into it are dropped.
    pub fn input(&mut self, value: Tensor2) -> Var {
        self.push(Cow::Owned(value), Op::Input)
    }

    /// A trainable parameter living in slot `slot` of the caller's store.
    pub fn param(&mut self, value: &'p Tensor2, slot: usize) -> Var {
        self.push(Cow::Borrowed(value), Op::Param(slot))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let (m, k) = self.value(a).shape();
        self.matmul_flops += (m * k * self.value(b).cols()) as u64;
        self.push(Cow::Owned(out), Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        let (m, k) = self.value(a).shape();
        self.matmul_flops += (m * k * self.value(b).rows()) as u64;
        self.push(Cow::Owned(out), Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(Cow::Owned(out), Op::Add(a, b))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "bias must be a row vector");
        assert_eq!(b.cols(), self.value(x).cols(), "bias width mismatch");
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(self.value(bias).data()) {
                *o += bv;
            }
        }
        self.push(Cow::Owned(out), Op::AddRow(x, bias))
    }

    pub fn add_const(&mut self, x: Var, c: &Tensor2) -> Var {
        let mut out = self.value(x).clone();
        out.add_assign(c);
        self.push(Cow::Owned(out), Op::AddConst(x))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale_in_place(s);
        self.push(Cow::Owned(out), Op::Scale(x, s))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            let u = *v;
            let t = (GELU_K * (u + GELU_C * u * u * u)).tanh();
            *v = 0.5 * u * (1.0 + t);
        }
        self.push(Cow::Owned(out), Op::Gelu(x))
    }

    /// Row-wise softmax. Entries equal to `-inf` receive probability zero;
    /// every row must hold at least one finite entry.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let mut out = Tensor2::zeros(src.rows(), src.cols());
        for r in 0..src.rows() {
            let row = src.row(r);
            let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = out.row_mut(r);
            let mut z = 0.0;
            for (o, v) in dst.iter_mut().zip(row) {
                *o = (v - hi).exp();
                z += *o;
            }
            dst.iter_mut().for_each(|o| *o /= z);
        }
        self.push(Cow::Owned(out), Op::SoftmaxRows(x))
    }

    /// Row-wise layer normalization with `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let src = self.value(x);
        let (rows, cols) = src.shape();
        let mut normalized = Tensor2::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = src.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in normalized.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
            rstd.push(s);
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = normalized.clone();
        for r in 0..rows {
            for ((o, gv), bv) in out.row_mut(r).iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                rstd,
            },
        )
    }

    /// Rows `ids` of `table`, in order.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Tensor2::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(
            Cow::Owned(out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_cols(start, len);
        self.push(Cow::Owned(out), Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Tensor2::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.rows(), rows, "concat row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        self.push(Cow::Owned(out), Op::ConcatCols(parts.to_vec()))
    }

    /// Back-propagates `seed` (the gradient of a scalar objective with respect
    /// to `output`) and returns gradients for every parameter slot in
    /// `0..n_slots`. Slots the output does not depend on get `None`.
    pub fn backward(&self, output: Var, seed: Tensor2, n_slots: usize) -> Vec<Option<Tensor2>> {
        assert_eq!(seed.shape(), self.value(output).shape(), "seed shape mismatch");
        let mut grads: Vec<Option<Tensor2>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[output.0] = Some(seed);
        let mut params: Vec<Option<Tensor2>> = Vec::with_capacity(n_slots);
        params.resize_with(n_slots, || None);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Param(slot) => accumulate(&mut params[*slot], g),
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::MatMulT(a, b) => {
                    // y = a b^T: da = g b, db = g^T a
                    let ga = g.matmul(self.value(*b));
                    let gb = g.t_matmul(self.value(*a));
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[b.0], g.clone());
                    accumulate(&mut grads[a.0], g);
                }
                Op::AddRow(x, bias) => {
                    let mut gb = Tensor2::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        axpy(1.0, g.row(r), gb.data_mut());
                    }
                    accumulate(&mut grads[bias.0], gb);
                    accumulate(&mut grads[x.0], g);
                }
                Op::AddConst(x) => accumulate(&mut grads[x.0], g),
                Op::Scale(x, s) => {
                    let mut g = g;
                    g.scale_in_place(*s);
                    accumulate(&mut grads[x.0], g);
                }
                Op::Gelu(x) => {
                    let mut g = g;
                    for (gv, &u) in g.data_mut().iter_mut().zip(self.value(*x).data()) {
                        let t = (GELU_K * (u + GELU_C * u * u * u)).tanh();
                        let dt = (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * u * u);
                        *gv *= 0.5 * (1.0 + t) + 0.5 * u * dt;
                    }
                    accumulate(&mut grads[x.0], g);
                }
                Op::SoftmaxRows(x) => {
                    let y = &self.nodes[idx].value;
                    let mut gx = Tensor2::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let inner = dot(yr, gr);
                        for ((o, yv), gv) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - inner);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normalized,
                    rstd,
                } => {
                    let gvals = self.value(*gain).data();
                    let cols = g.cols();
                    let mut ggain = Tensor2::zeros(1, cols);
                    let mut gbias = Tensor2::zeros(1, cols);
                    let mut gx = Tensor2::zeros(g.rows(), cols);
                    let mut dxhat = vec![0.0; cols];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = g.row(r);
                        let xh = normalized.row(r);
                        for c in 0..cols {
                            ggain.data_mut()[c] += gr[c] * xh[c];
                            gbias.data_mut()[c] += gr[c];
                            dxhat[c] = gr[c] * gvals[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dx = dot(&dxhat, xh) / cols as f64;
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = rs * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                    accumulate(&mut grads[gain.0], ggain);
                    accumulate(&mut grads[bias.0], gbias);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Gather { table, ids } => {
                    let (rows, cols) = self.value(*table).shape();
                    let mut gt = Tensor2::zeros(rows, cols);
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(1.0, g.row(r), gt.row_mut(id));
                    }
                    accumulate(&mut grads[table.0], gt);
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = self.value(*x).shape();
                    let mut gx = Tensor2::zeros(rows, cols);
                    for r in 0..rows {
                        gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let part = g.slice_cols(offset, w);
                        accumulate(&mut grads[p.0], part);
                        offset += w;
                    }
                }
            }
        }
        params
    }
}

fn accumulate(slot: &mut Option<Tensor2>, g: Tensor2) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::grad_check;
    use crate::numerics::rng::Rng;

    /// Builds a scalar objective `sum(w ⊙ f(params))` with fixed random
    /// weights `w` and checks its tape gradient against central differences.
    fn check_op<F>(shapes: &[(usize, usize)], seed: u64, build: F)
    where
        F: Fn(&mut Tape<'_>, &[Var]) -> Var,
    {
        let mut rng = Rng::new(seed);
        let sizes: Vec<usize> = shapes.iter().map(|(r, c)| r * c).collect();
        let point: Vec<f64> = (0..sizes.iter().sum())
            .map(|_| rng.standard_normal())
            .collect();
        let weights_seed = rng.next_u64();

        let eval = |flat: &[f64]| -> (f64, Vec<f64>) {
            let mut tensors = Vec::new();
            let mut off = 0;
            for &(r, c) in shapes {
                tensors.push(Tensor2::from_vec(r, c, flat[off..off + r * c].to_vec()));
                off += r * c;
            }
            let mut tape = Tape::new();
            let vars: Vec<Var> = tensors
                .iter()
                .enumerate()
                .map(|(i, t)| tape.param(t, i))
                .collect();
            let out = build(&mut tape, &vars);
            let y = tape.value(out);
            let w = Tensor2::randn(y.rows(), y.cols(), 1.0, &mut Rng::new(weights_seed));
            let value = dot(y.data(), w.data());
            let grads = tape.backward(out, w, tensors.len());
            let mut flat_grad = Vec::new();
            for (g, t) in grads.into_iter().zip(&tensors) {
                match g {
                    Some(g) => flat_grad.extend_from_slice(g.data()),
                    None => flat_grad.extend(std::iter::repeat_n(0.0, t.len())),
                }
            }
            (value, flat_grad)
        };
        let err = grad_check(eval, &point, 1e-5).unwrap();
        assert!(err < 1e-7, "relative gradient error {err}");
    }

    #[test]
    fn matmul_grads() {
        check_op(&[(3, 4), (4, 2)], 1, |t, v| t.matmul(v[0], v[1]));
        check_op(&[(3, 4), (5, 4)], 2, |t, v| t.matmul_t(v[0], v[1]));
    }

    #[test]
    fn elementwise_grads() {
        check_op(&[(3, 4), (3, 4)], 3, |t, v| t.add(v[0], v[1]));
        check_op(&[(3, 4), (1, 4)], 4, |t, v| t.add_row(v[0], v[1]));
        check_op(&[(3, 4)], 5, |t, v| t.scale(v[0], -1.7));
        check_op(&[(3, 4)], 6, |t, v| t.gelu(v[0]));
    }

    #[test]
    fn softmax_and_mask_grads() {
        check_op(&[(3, 5)], 7, |t, v| t.softmax_rows(v[0]));
        check_op(&[(3, 3)], 8, |t, v| {
            let mut mask = Tensor2::zeros(3, 3);
            for r in 0..3 {
                for c in r + 1..3 {
                    mask.set(r, c, f64::NEG_INFINITY);
                }
            }
            let m = t.add_const(v[0], &mask);
            t.softmax_rows(m)
        });
    }

    #[test]
    fn layer_norm_grads() {
        check_op(&[(4, 6), (1, 6), (1, 6)], 9, |t, v| t.layer_norm(v[0], v[1], v[2]));
    }

    #[test]
    fn gather_slice_concat_grads() {
        check_op(&[(5, 3)], 10, |t, v| t.gather(v[0], &[4, 0, 4, 2]));
        check_op(&[(3, 6)], 11, |t, v| {
            let a = t.slice_cols(v[0], 0, 2);
            let b = t.slice_cols(v[0], 3, 3);
            t.concat_cols(&[b, a])
        });
    }

    #[test]
    fn composite_attention_like_graph() {
        check_op(&[(4, 6), (6, 6), (6, 6)], 12, |t, v| {
            let q = t.matmul(v[0], v[1]);
            let k = t.matmul(v[0], v[2]);
            let s = t.matmul_t(q, k);
            let s = t.scale(s, 0.5);
            let p = t.softmax_rows(s);
            t.matmul(p, v[0])
        });
    }

    #[test]
    fn unused_param_has_no_grad_and_flops_are_counted() {
        let a = Tensor2::filled(2, 3, 1.0);
        let b = Tensor2::filled(3, 4, 1.0);
        let c = Tensor2::filled(1, 1, 1.0);
        let mut tape = Tape::new();
        let va = tape.param(&a, 0);
        let vb = tape.param(&b, 1);
        let _vc = tape.param(&c, 2);
        let y = tape.matmul(va, vb);
        assert_eq!(tape.matmul_flops(), 24);
        let grads = tape.backward(y, Tensor2::filled(2, 4, 1.0), 3);
        assert!(grads[0].is_some() && grads[1].is_some());
        assert!(grads[2].is_none());
    }
}
