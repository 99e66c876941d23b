use crate::error::{Error, Result};
use crate::model::config::{DecoderKind, ModelConfig};
use crate::numerics::{Rng, Tensor2};

#[derive(Clone, Copy, Debug)]
pub(crate) struct LnIdx {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnIdx {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FfnIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EncLayerIdx {
    pub ln1: LnIdx,
    pub attn: AttnIdx,
    pub ln2: LnIdx,
    pub ffn: FfnIdx,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecLayerIdx {
    pub ln1: LnIdx,
    pub self_attn: AttnIdx,
    pub ln2: LnIdx,
    pub cross_attn: AttnIdx,
    pub ln3: LnIdx,
    pub ffn: FfnIdx,
}

/// Slot indices of every tensor, derived deterministically from the config.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub src_embed: usize,
    pub src_pos: usize,
    pub enc_layers: Vec<EncLayerIdx>,
    pub enc_ln: LnIdx,
    pub tgt_embed: Option<usize>,
    pub tgt_pos: Option<usize>,
    pub query_tokens: Option<usize>,
    pub query_pos_bias: Option<usize>,
    pub dec_layers: Vec<DecLayerIdx>,
    pub dec_ln: LnIdx,
    pub out_w: usize,
    pub out_b: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

struct Spec {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
}

struct Builder {
    specs: Vec<Spec>,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.specs.push(Spec {
            name,
            rows,
            cols,
            init,
        });
        self.specs.len() - 1
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LnIdx {
        LnIdx {
            gain: self.add(format!("{prefix}.gain"), 1, d, Init::Ones),
            bias: self.add(format!("{prefix}.bias"), 1, d, Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        let mut pair = |n: &str| {
            (
                self.add(format!("{prefix}.w{n}"), d, d, Init::Normal),
                self.add(format!("{prefix}.b{n}"), 1, d, Init::Zeros),
            )
        };
        let (wq, bq) = pair("q");
        let (wk, bk) = pair("k");
        let (wv, bv) = pair("v");
        let (wo, bo) = pair("o");
        AttnIdx {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> FfnIdx {
        FfnIdx {
            w1: self.add(format!("{prefix}.w1"), d, f, Init::Normal),
            b1: self.add(format!("{prefix}.b1"), 1, f, Init::Zeros),
            w2: self.add(format!("{prefix}.w2"), f, d, Init::Normal),
            b2: self.add(format!("{prefix}.b2"), 1, d, Init::Zeros),
        }
    }
}

fn build_layout(config: &ModelConfig) -> (Layout, Vec<Spec>) {
    let d = config.d_model;
    let f = config.ffn_width();
    let mut b = Builder { specs: Vec::new() };
    let src_embed = b.add("src.embed".into(), config.vocab_in.size(), d, Init::Normal);
    let src_pos = b.add("src.pos".into(), config.max_src_len, d, Init::Normal);
    let enc_layers = (0..config.n_enc_layers)
        .map(|l| EncLayerIdx {
            ln1: b.ln(&format!("enc.{l}.ln1"), d),
            attn: b.attn(&format!("enc.{l}.attn"), d),
            ln2: b.ln(&format!("enc.{l}.ln2"), d),
            ffn: b.ffn(&format!("enc.{l}.ffn"), d, f),
        })
        .collect();
    let enc_ln = b.ln("enc.ln", d);

    let (mut tgt_embed, mut tgt_pos, mut query_tokens, mut query_pos_bias) = (None, None, None, None);
    match config.decoder_kind {
        DecoderKind::Autoregressive => {
            // Output vocabulary plus EOS and BOS rows.
            tgt_embed = Some(b.add("tgt.embed".into(), config.vocab_out.size() + 2, d, Init::Normal));
            // BOS + max_tgt_len tokens.
            tgt_pos = Some(b.add("tgt.pos".into(), config.max_tgt_len + 1, d, Init::Normal));
        }
        DecoderKind::LqtParallel => {
            let n = config.n_queries;
            query_tokens = Some(b.add("query.tokens".into(), n, d, Init::Normal));
            query_pos_bias = Some(b.add("query.pos_bias".into(), n, n, Init::Zeros));
        }
        DecoderKind::EncoderOutputParallel => {}
    }

    let dec_layers = (0..config.n_dec_layers)
        .map(|l| DecLayerIdx {
            ln1: b.ln(&format!("dec.{l}.ln1"), d),
            self_attn: b.attn(&format!("dec.{l}.self"), d),
            ln2: b.ln(&format!("dec.{l}.ln2"), d),
            cross_attn: b.attn(&format!("dec.{l}.cross"), d),
            ln3: b.ln(&format!("dec.{l}.ln3"), d),
            ffn: b.ffn(&format!("dec.{l}.ffn"), d, f),
        })
        .collect();
    let dec_ln = b.ln("dec.ln", d);
    let out_w = b.add("out.w".into(), d, config.output_classes(), Init::Normal);
    let out_b = b.add("out.b".into(), 1, config.output_classes(), Init::Zeros);

    let layout = Layout {
        src_embed,
        src_pos,
        enc_layers,
        enc_ln,
        tgt_embed,
        tgt_pos,
        query_tokens,
        query_pos_bias,
        dec_layers,
        dec_ln,
        out_w,
        out_b,
    };
    (layout, b.specs)
}

/// All learnable tensors of one model.
///
/// Tensors are kept in a flat, named list whose order is fixed by the config;
/// the same order is used by gradients, the optimizer and checkpoints. The
/// query tokens are stored one query per row (`N x D`).
#[derive(Clone, Debug)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor2>,
    layout: Layout,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.names == other.names && self.tensors == other.tensors
    }
}

impl ModelParams {
    /// Weights ~ Normal(0, init_std), norm gains 1, biases (including the
    /// query position bias) 0.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(config);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for s in specs {
            let t = match s.init {
                Init::Normal => Tensor2::randn(s.rows, s.cols, config.init_std, rng),
                Init::Zeros => Tensor2::zeros(s.rows, s.cols),
                Init::Ones => Tensor2::filled(s.rows, s.cols, 1.0),
            };
            names.push(s.name);
            tensors.push(t);
        }
        Ok(ModelParams {
            config: config.clone(),
            names,
            tensors,
            layout,
        })
    }

    /// Rebuilds parameters from named tensors, checking names and shapes
    /// against the layout implied by `config`.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor2)>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(config);
        if specs.len() != named.len() {
            return Err(Error::usage(format!(
                "expected {} tensors, found {}",
                specs.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (spec, (name, t)) in specs.into_iter().zip(named) {
            if spec.name != name || t.shape() != (spec.rows, spec.cols) {
                return Err(Error::usage(format!(
                    "tensor `{name}` {:?} does not match expected `{}` {:?}",
                    t.shape(),
                    spec.name,
                    (spec.rows, spec.cols)
                )));
            }
            if !t.is_finite() {
                return Err(Error::numerical(format!("tensor `{name}` has non-finite entries")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(ModelParams {
            config: config.clone(),
            names,
            tensors,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor2] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor2] {
        &mut self.tensors
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor2::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor2> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    /// The learnable query tokens, `N x D`; `None` unless the decoder is the
    /// query-token kind.
    pub fn query_tokens(&self) -> Option<&Tensor2> {
        self.layout.query_tokens.map(|i| &self.tensors[i])
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrites every tensor from a flat vector in slot order.
    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_scalars(), "flat parameter length mismatch");
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor2::is_finite)
    }

    /// Zero tensors shaped like the parameters.
    pub fn zeros_like(&self) -> Vec<Tensor2> {
        self.tensors
            .iter()
            .map(|t| Tensor2::zeros(t.rows(), t.cols()))
            .collect()
    }
}
