//! How far an error on the first box coordinate spreads to the other three.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoding::NarReading;
use crate::error::{Error, Result};
use crate::experiments::eval::{predict, DecodeMethod};
use crate::model::{DecoderKind, ModelParams};
use crate::tasks::{Dataset, GroundingLayout, Split, TaskKind};

/// Bins holding fewer samples are flagged unreliable.
pub const MIN_RELIABLE_COUNT: usize = 10;

/// First-coordinate error and mean error of the remaining three.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleError {
    pub first: usize,
    pub remaining: f64,
}

/// Per-coordinate absolute errors of one prediction. A missing or
/// non-coordinate token counts as the largest possible error.
pub fn coordinate_errors(layout: &GroundingLayout, pred: &[u32], gold: &[u32]) -> [usize; 4] {
    let mut out = [layout.grid - 1; 4];
    for (k, slot) in out.iter_mut().enumerate() {
        let g = layout.output_value(gold[k]).expect("gold coordinates are valid");
        if let Some(p) = pred.get(k).and_then(|&t| layout.output_value(t)) {
            *slot = p.abs_diff(g);
        }
    }
    out
}

pub fn sample_errors(
    params: &ModelParams,
    data: &Dataset,
    split: Split,
    reading: NarReading,
) -> Result<Vec<SampleError>> {
    if data.header.spec.kind != TaskKind::Grounding {
        return Err(Error::usage("the error-propagation study needs a grounding dataset"));
    }
    let layout = GroundingLayout {
        n_labels: data.header.spec.n_labels,
        grid: data.header.spec.grid,
    };
    data.split(split)
        .iter()
        .map(|s| {
            let r = predict(params, &s.input, DecodeMethod::Greedy, reading)?;
            let e = coordinate_errors(&layout, &r.sequence, &s.target);
            Ok(SampleError {
                first: e[0],
                remaining: (e[1] + e[2] + e[3]) as f64 / 3.0,
            })
        })
        .collect()
}

/// One threshold row: samples whose first-coordinate error is at least
/// `threshold`, for both models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorPropRow {
    pub threshold: usize,
    pub ar_count: usize,
    pub ar_mean_remaining: Option<f64>,
    pub ar_reliable: bool,
    pub nar_count: usize,
    pub nar_mean_remaining: Option<f64>,
    pub nar_reliable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorPropReport {
    pub n_samples: usize,
    pub rows: Vec<ErrorPropRow>,
    /// Fraction of samples with an exact first coordinate.
    pub ar_zero_error_fraction: f64,
    pub nar_zero_error_fraction: f64,
}

fn at_least(errors: &[SampleError], t: usize) -> (usize, Option<f64>) {
    let sel: Vec<f64> = errors.iter().filter(|e| e.first >= t).map(|e| e.remaining).collect();
    let mean = (!sel.is_empty()).then(|| sel.iter().sum::<f64>() / sel.len() as f64);
    (sel.len(), mean)
}

/// Thresholds run from 0 to the largest first-coordinate error observed
/// for either model.
pub fn summarize(ar: &[SampleError], nar: &[SampleError]) -> ErrorPropReport {
    let max_t = ar.iter().chain(nar).map(|e| e.first).max().unwrap_or(0);
    let rows = (0..=max_t)
        .map(|t| {
            let (ac, am) = at_least(ar, t);
            let (nc, nm) = at_least(nar, t);
            ErrorPropRow {
                threshold: t,
                ar_count: ac,
                ar_mean_remaining: am,
                ar_reliable: ac >= MIN_RELIABLE_COUNT,
                nar_count: nc,
                nar_mean_remaining: nm,
                nar_reliable: nc >= MIN_RELIABLE_COUNT,
            }
        })
        .collect();
    let zero = |e: &[SampleError]| e.iter().filter(|x| x.first == 0).count() as f64 / e.len().max(1) as f64;
    ErrorPropReport {
        n_samples: ar.len(),
        rows,
        ar_zero_error_fraction: zero(ar),
        nar_zero_error_fraction: zero(nar),
    }
}

/// Runs both models over a grounding split.
pub fn error_propagation(
    ar: &ModelParams,
    nar: &ModelParams,
    nar_reading: NarReading,
    data: &Dataset,
    split: Split,
) -> Result<ErrorPropReport> {
    if ar.config().decoder_kind != DecoderKind::Autoregressive {
        return Err(Error::usage("the first checkpoint must be autoregressive"));
    }
    if !nar.config().decoder_kind.is_parallel() {
        return Err(Error::usage("the second checkpoint must be parallel"));
    }
    let a = sample_errors(ar, data, split, NarReading::Collapse)?;
    let n = sample_errors(nar, data, split, nar_reading)?;
    Ok(summarize(&a, &n))
}

impl ErrorPropReport {
    /// Threshold rows where both curves are reliable.
    pub fn reliable_rows(&self) -> impl Iterator<Item = &ErrorPropRow> {
        self.rows.iter().filter(|r| r.ar_reliable && r.nar_reliable)
    }

    /// Whether the AR curve never decreases across its reliable thresholds.
    pub fn ar_non_decreasing(&self) -> bool {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.ar_reliable)
            .filter_map(|r| r.ar_mean_remaining)
            .collect();
        vals.windows(2).all(|w| w[1] >= w[0])
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::format(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv_rows(path: &Path) -> Result<Vec<ErrorPropRow>> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
        r.deserialize()
            .map(|row| row.map_err(|e| Error::format(path, e)))
            .collect()
    }
}
