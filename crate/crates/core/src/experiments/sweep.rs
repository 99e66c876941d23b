//! Accuracy and latency of the query-token student across query counts.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::decoding::NarReading;
use crate::error::{Error, Result};
use crate::experiments::bench::nar_decode_once;
use crate::experiments::eval::{evaluate, DecodeMethod};
use crate::model::{DecoderKind, ModelConfig};
use crate::tasks::{Dataset, Split};
use crate::training::{train_student, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_queries: usize,
    /// Alignment length the hardest target needs.
    pub required: usize,
    pub feasible: bool,
    pub exact_match: Option<f64>,
    pub token_accuracy: Option<f64>,
    /// Measurement: mean wall-clock of one full decode.
    pub mean_latency_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: String,
    pub rows: Vec<SweepRow>,
}

/// Trains and scores one student per query count. Counts below the
/// dataset's largest minimum path length give an infeasible row.
pub fn sweep_queries(
    data: &Dataset,
    base: &ModelConfig,
    train: &TrainConfig,
    n_list: &[usize],
    split: Split,
    latency_repeats: usize,
) -> Result<SweepReport> {
    if base.decoder_kind != DecoderKind::LqtParallel {
        return Err(Error::usage("the query sweep needs a query-token decoder config"));
    }
    if n_list.is_empty() {
        return Err(Error::usage("the query list is empty"));
    }
    let eval_samples = data.split(split);
    if eval_samples.is_empty() {
        return Err(Error::usage(format!("the {} split is empty", split.name())));
    }
    let required = data.max_min_path_length();
    let reading = NarReading::for_objective(train.loss_kind);
    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let mut model = base.clone();
        model.n_queries = n;
        if n < required || n == 0 {
            rows.push(SweepRow {
                n_queries: n,
                required,
                feasible: false,
                exact_match: None,
                token_accuracy: None,
                mean_latency_ms: None,
            });
            continue;
        }
        let (params, _) = train_student(data, &model, train)?;
        let m = evaluate(&params, data, split, DecodeMethod::Greedy, reading)?;
        let repeats = latency_repeats.max(1);
        for s in eval_samples.iter().take(10) {
            nar_decode_once(&params, &s.input)?;
        }
        let start = Instant::now();
        for k in 0..repeats {
            nar_decode_once(&params, &eval_samples[k % eval_samples.len()].input)?;
        }
        rows.push(SweepRow {
            n_queries: n,
            required,
            feasible: true,
            exact_match: Some(m.exact_match),
            token_accuracy: Some(m.token_accuracy),
            mean_latency_ms: Some(start.elapsed().as_secs_f64() * 1e3 / repeats as f64),
        });
    }
    Ok(SweepReport {
        model: base.clone(),
        train: train.clone(),
        split: split.name().into(),
        rows,
    })
}

impl SweepReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::format(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv_rows(path: &Path) -> Result<Vec<SweepRow>> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
        r.deserialize()
            .map(|row| row.map_err(|e| Error::format(path, e)))
            .collect()
    }
}
