//! Wall-clock comparison of autoregressive and parallel decoding.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ctc::TokenId;
use crate::decoding::{ar_greedy_fixed_length, nar_greedy};
use crate::error::{Error, Result};
use crate::model::{decode_parallel, decode_parallel_encoder_input, encode, DecoderKind, ModelParams};
use crate::numerics::Rng;

/// Fewest timed decodes a reported mean may rest on.
pub const MIN_TIMED: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    /// Decodes run and discarded before timing each length.
    pub warmup: usize,
    /// Timed decodes per length and model.
    pub timed: usize,
    pub src_len: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            lengths: vec![2, 5, 10, 20],
            warmup: 10,
            timed: 200,
            src_len: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub target_len: usize,
    pub ar_mean_ms: f64,
    pub nar_mean_ms: f64,
    pub ar_passes: usize,
    pub nar_passes: usize,
    /// `ar_mean_ms / nar_mean_ms`.
    pub speedup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of mean latency against target length.
    pub ar_slope_ms_per_token: f64,
    pub nar_slope_ms_per_token: f64,
    /// `nar_slope / ar_slope`.
    pub slope_ratio: f64,
    pub environment: String,
}

/// Least-squares slope of `y` on `x`.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

fn environment() -> String {
    let cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!(
        "{} {}; single-threaded decoding on one of {cpus} available cpus; wall-clock values are measurements",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

/// One full parallel decode (encode, one decoder pass, greedy collapse).
pub fn nar_decode_once(params: &ModelParams, src: &[TokenId]) -> Result<usize> {
    let enc = encode(params, src)?;
    let out = match params.config().decoder_kind {
        DecoderKind::LqtParallel => decode_parallel(params, &enc)?,
        DecoderKind::EncoderOutputParallel => decode_parallel_encoder_input(params, &enc)?,
        DecoderKind::Autoregressive => return Err(Error::usage("expected a parallel model")),
    };
    Ok(nar_greedy(&out.logits, &params.config().vocab_out).passes)
}

fn time_ms<F: FnMut() -> Result<usize>>(warmup: usize, timed: usize, mut f: F) -> Result<(f64, usize)> {
    for _ in 0..warmup {
        f()?;
    }
    let mut passes = 0;
    let start = Instant::now();
    for _ in 0..timed {
        passes = f()?;
    }
    Ok((start.elapsed().as_secs_f64() * 1e3 / timed as f64, passes))
}

/// Mean per-sequence decode time of both models at each target length. The
/// autoregressive model emits exactly `T` tokens (EOS suppressed); the
/// parallel model runs its single pass regardless of `T`.
pub fn bench(ar: &ModelParams, nar: &ModelParams, cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.timed < MIN_TIMED {
        return Err(Error::usage(format!(
            "refusing to average {} timed decodes; at least {MIN_TIMED} are required",
            cfg.timed
        )));
    }
    if cfg.lengths.len() < 2 {
        return Err(Error::usage("bench needs at least two target lengths"));
    }
    if ar.config().decoder_kind != DecoderKind::Autoregressive || !nar.config().decoder_kind.is_parallel() {
        return Err(Error::usage("bench needs an autoregressive and a parallel checkpoint"));
    }
    let longest = *cfg.lengths.iter().max().expect("non-empty");
    if longest > ar.config().max_tgt_len {
        return Err(Error::usage(format!(
            "target length {longest} exceeds the autoregressive model's max_tgt_len {}",
            ar.config().max_tgt_len
        )));
    }
    let src_len = cfg.src_len.min(ar.config().max_src_len).min(nar.config().max_src_len);
    if src_len == 0 {
        return Err(Error::usage("src_len must be positive"));
    }
    let vocab_in = ar.config().vocab_in.size().min(nar.config().vocab_in.size());
    let mut rng = Rng::new(cfg.seed);
    let sources: Vec<Vec<TokenId>> = (0..cfg.timed.max(cfg.warmup))
        .map(|_| (0..src_len).map(|_| 1 + rng.below(vocab_in - 1) as TokenId).collect())
        .collect();
    let mut rows = Vec::with_capacity(cfg.lengths.len());
    for &t in &cfg.lengths {
        let mut i = 0;
        let (ar_ms, ar_passes) = time_ms(cfg.warmup, cfg.timed, || {
            let src = &sources[i % sources.len()];
            i += 1;
            let enc = encode(ar, src)?;
            Ok(ar_greedy_fixed_length(ar, &enc, t)?.passes)
        })?;
        let mut j = 0;
        let (nar_ms, nar_passes) = time_ms(cfg.warmup, cfg.timed, || {
            let src = &sources[j % sources.len()];
            j += 1;
            nar_decode_once(nar, src)
        })?;
        rows.push(BenchRow {
            target_len: t,
            ar_mean_ms: ar_ms,
            nar_mean_ms: nar_ms,
            ar_passes,
            nar_passes,
            speedup: ar_ms / nar_ms,
        });
    }
    let x: Vec<f64> = rows.iter().map(|r| r.target_len as f64).collect();
    let ar_slope = slope(&x, &rows.iter().map(|r| r.ar_mean_ms).collect::<Vec<_>>());
    let nar_slope = slope(&x, &rows.iter().map(|r| r.nar_mean_ms).collect::<Vec<_>>());
    Ok(BenchReport {
        config: cfg.clone(),
        rows,
        ar_slope_ms_per_token: ar_slope,
        nar_slope_ms_per_token: nar_slope,
        slope_ratio: nar_slope / ar_slope,
        environment: environment(),
    })
}
