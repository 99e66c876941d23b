//! Teacher and student training loops and sequence-level distillation.

pub mod distill;
pub mod optim;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ctc::{min_path_length, TokenSeq};
use crate::decoding::NarReading;
use crate::error::{Error, Result};
use crate::experiments::eval::{evaluate, DecodeMethod, Metrics};
use crate::model::{
    student_loss, teacher_loss, DecoderKind, ExampleGrad, ModelConfig, ModelParams, StudentObjective,
};
use crate::numerics::{Rng, Tensor2};
use crate::tasks::{Dataset, Sample, Split};

pub use distill::{distill_targets, DistillStats};
pub use optim::Adam;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_betas: (f64, f64),
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub loss_kind: StudentObjective,
    /// Whether the training targets come from a teacher; recorded only.
    pub distill: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            lr: 3e-4,
            adam_betas: (0.9, 0.98),
            weight_decay: 0.0,
            grad_clip: 1.0,
            seed: 0,
            loss_kind: StudentObjective::Qctc,
            distill: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::usage("lr must be a positive number"));
        }
        if self.batch_size == 0 {
            return Err(Error::usage("batch_size must be at least 1"));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::usage("adam betas must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 || self.grad_clip.is_nan() {
            return Err(Error::usage("weight_decay must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// `teacher` or `student`.
    pub role: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Greedy metrics on the validation split, when it is non-empty.
    pub final_metrics: Option<Metrics>,
    pub optimizer_steps: u64,
    /// Decoder forward passes spent on training examples.
    pub decoder_passes: u64,
    /// Frobenius distance of the query tokens from their initialization.
    pub query_token_drift: Option<f64>,
    /// Measurement; not reproducible across runs.
    pub wall_clock_seconds: f64,
}

impl TrainReport {
    /// The report with measured fields zeroed, for reproducibility checks.
    pub fn without_measurements(&self) -> TrainReport {
        TrainReport {
            wall_clock_seconds: 0.0,
            ..self.clone()
        }
    }
}

/// Model config sized to a dataset's vocabularies and lengths, with the
/// default architecture.
pub fn model_config_for(data: &Dataset, kind: DecoderKind, n_queries: usize) -> ModelConfig {
    let mut c = ModelConfig::new(data.header.vocab_in.clone(), data.header.vocab_out.clone(), kind);
    c.n_queries = n_queries;
    c.max_src_len = data.max_input_len().max(1);
    c.max_tgt_len = data.max_target_len().max(1);
    c
}

fn check_compatible(model: &ModelConfig, data: &Dataset) -> Result<()> {
    model.validate()?;
    if model.vocab_in.size() != data.header.vocab_in.size()
        || model.vocab_out.size() != data.header.vocab_out.size()
    {
        return Err(Error::usage("model vocabularies do not match the dataset"));
    }
    if data.max_input_len() > model.max_src_len {
        return Err(Error::usage(format!(
            "dataset inputs reach length {} but max_src_len is {}",
            data.max_input_len(),
            model.max_src_len
        )));
    }
    if data.train.is_empty() {
        return Err(Error::usage("the training split is empty"));
    }
    Ok(())
}

/// Typed error naming the first sample a parallel student cannot align.
pub fn check_student_feasible(model: &ModelConfig, data: &Dataset, objective: StudentObjective) -> Result<()> {
    match model.decoder_kind {
        DecoderKind::LqtParallel => match objective {
            StudentObjective::Qctc => data.check_feasible(model.n_queries),
            StudentObjective::Ce => {
                let longest = data.max_target_len();
                if longest > model.n_queries {
                    Err(Error::usage(format!(
                        "cross-entropy needs n_queries >= longest target {longest}"
                    )))
                } else {
                    Ok(())
                }
            }
        },
        DecoderKind::EncoderOutputParallel => {
            for split in Split::ALL {
                for (index, s) in data.split(split).iter().enumerate() {
                    let need = std::iter::once(&s.target)
                        .chain(&s.valid_refs)
                        .map(|t| match objective {
                            StudentObjective::Qctc => min_path_length(t),
                            StudentObjective::Ce => t.len(),
                        })
                        .max()
                        .unwrap_or(0);
                    if need > s.input.len() {
                        return Err(Error::InfeasibleSample {
                            split: split.name().into(),
                            index,
                            required: need,
                            available: s.input.len(),
                        });
                    }
                }
            }
            Ok(())
        }
        DecoderKind::Autoregressive => Err(Error::usage("a student needs a parallel decoder")),
    }
}

/// Shared minibatch loop. `loss` evaluates one example against the target
/// chosen for this step.
fn fit<F>(
    params: &mut ModelParams,
    data: &Dataset,
    cfg: &TrainConfig,
    loss: F,
) -> Result<(Vec<f64>, u64, u64)>
where
    F: Fn(&ModelParams, &Sample, &TokenSeq) -> Result<ExampleGrad>,
{
    let root = Rng::new(cfg.seed);
    let mut order_rng = root.fork(2);
    let mut target_rng = root.fork(3);
    let mut opt = Adam::new(params.tensors(), cfg.lr, cfg.adam_betas, cfg.weight_decay, cfg.grad_clip);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut passes = 0u64;
    for epoch in 0..cfg.epochs {
        order_rng.shuffle(&mut order);
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f64;
            let mut acc: Vec<Tensor2> = params.zeros_like();
            for &i in batch {
                let sample = &data.train[i];
                let target = data.training_target(sample, &mut target_rng);
                let eg = loss(params, sample, target)?;
                passes += 1;
                if !eg.loss.is_finite() || eg.grads.iter().any(|g| !g.is_finite()) {
                    return Err(Error::numerical(format!(
                        "non-finite loss or gradient at epoch {epoch}, batch {b}, sample {i}"
                    )));
                }
                total += eg.loss;
                for (a, mut g) in acc.iter_mut().zip(eg.grads) {
                    g.scale_in_place(scale);
                    a.add_assign(&g);
                }
            }
            opt.step(params.tensors_mut(), &acc);
        }
        let mean = total / data.train.len() as f64;
        if !params.all_finite() {
            return Err(Error::numerical(format!("parameters diverged in epoch {epoch}")));
        }
        epoch_losses.push(mean);
    }
    Ok((epoch_losses, opt.steps(), passes))
}

fn final_metrics(
    params: &ModelParams,
    data: &Dataset,
    method: DecodeMethod,
    reading: NarReading,
) -> Result<Option<Metrics>> {
    if data.val.is_empty() {
        return Ok(None);
    }
    evaluate(params, data, Split::Val, method, reading).map(Some)
}

/// Trains an autoregressive model with teacher-forced cross-entropy.
pub fn train_teacher(
    data: &Dataset,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    check_compatible(model, data)?;
    if model.decoder_kind != DecoderKind::Autoregressive {
        return Err(Error::usage("a teacher needs an autoregressive decoder"));
    }
    if data.max_target_len() > model.max_tgt_len {
        return Err(Error::usage("dataset targets exceed max_tgt_len"));
    }
    let start = Instant::now();
    let mut params = ModelParams::init(model, &mut Rng::new(cfg.seed).fork(1))?;
    let (epoch_losses, steps, passes) = fit(&mut params, data, cfg, |p, s, t| teacher_loss(p, &s.input, t))?;
    let final_metrics = final_metrics(&params, data, DecodeMethod::Greedy, NarReading::Collapse)?;
    let report = TrainReport {
        role: "teacher".into(),
        model: model.clone(),
        train: cfg.clone(),
        epoch_losses,
        final_metrics,
        optimizer_steps: steps,
        decoder_passes: passes,
        query_token_drift: None,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((params, report))
}

/// Trains a parallel model with Q-CTC or padded cross-entropy.
pub fn train_student(
    data: &Dataset,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    check_compatible(model, data)?;
    check_student_feasible(model, data, cfg.loss_kind)?;
    let start = Instant::now();
    let mut params = ModelParams::init(model, &mut Rng::new(cfg.seed).fork(1))?;
    let initial_queries = params.query_tokens().cloned();
    let objective = cfg.loss_kind;
    let (epoch_losses, steps, passes) =
        fit(&mut params, data, cfg, |p, s, t| student_loss(p, &s.input, t, objective))?;
    let query_token_drift = initial_queries.map(|q0| {
        let q = params.query_tokens().expect("query tokens persist");
        q.data()
            .iter()
            .zip(q0.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    });
    let reading = NarReading::for_objective(objective);
    let final_metrics = final_metrics(&params, data, DecodeMethod::Greedy, reading)?;
    let report = TrainReport {
        role: "student".into(),
        model: model.clone(),
        train: cfg.clone(),
        epoch_losses,
        final_metrics,
        optimizer_steps: steps,
        decoder_passes: passes,
        query_token_drift,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((params, report))
}
