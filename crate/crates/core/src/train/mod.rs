//! Training loop with periodic validation and early stopping, inference over
//! whole stores, transfer evaluation and the repeated-run experiment.

mod metrics;
mod variance;

pub use metrics::{evaluate_metrics, MetricsReport};
pub use variance::{variance_experiment, ModeSummary, RunMetrics, VarianceReport};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{total_loss, LossBreakdown, LossConfig};
use crate::model::{sst_forward, sst_forward_pair, ModelConfig, ModelParams};
use crate::optim::{adam_step, clip_global_norm, AdamConfig, AdamState};
use crate::sampling::{
    draw_pair_batch, update_memory, EpochRef, EpochStore, PairBatch, SamplingMemory, SamplingMode, WindowIndex,
};
use crate::tensor::Tensor;
use crate::N_CLASSES;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Validation score used for early stopping and checkpoint selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMetric {
    MacroF1,
    Accuracy,
    Kappa,
}

impl SelectMetric {
    pub fn of(self, m: &MetricsReport) -> f64 {
        match self {
            SelectMetric::MacroF1 => m.macro_f1,
            SelectMetric::Accuracy => m.accuracy,
            SelectMetric::Kappa => m.kappa,
        }
    }
}

impl fmt::Display for SelectMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectMetric::MacroF1 => "macro_f1",
            SelectMetric::Accuracy => "accuracy",
            SelectMetric::Kappa => "kappa",
        })
    }
}

impl FromStr for SelectMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macro_f1" => Ok(SelectMetric::MacroF1),
            "accuracy" => Ok(SelectMetric::Accuracy),
            "kappa" => Ok(SelectMetric::Kappa),
            other => Err(Error::Config(format!("unknown metric `{other}` (macro_f1, accuracy, kappa)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_steps: usize,
    pub validate_every: usize,
    /// Consecutive non-improving validations before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub clip_norm: f64,
    /// Share of subjects held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
    pub sampling: SamplingMode,
    pub p0: f64,
    pub select: SelectMetric,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 10_000,
            validate_every: 100,
            patience: 10,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 1e-4,
            betas: (0.9, 0.999),
            clip_norm: 5.0,
            val_fraction: 0.1,
            seed: 0,
            sampling: SamplingMode::EasyDifficult,
            p0: 0.25,
            select: SelectMetric::MacroF1,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.max_steps", self.max_steps),
            ("train.validate_every", self.validate_every),
            ("train.patience", self.patience),
            ("train.batch_size", self.batch_size),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if !(self.lr > 0.0 && self.weight_decay >= 0.0 && self.clip_norm > 0.0) {
            return Err(Error::Config("train.lr and train.clip_norm must be positive, weight_decay >= 0".into()));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!("Adam betas must lie in [0, 1), got ({b1}, {b2})")));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("train.val_fraction must lie in (0, 1), got {}", self.val_fraction)));
        }
        SamplingMemory::new(self.p0, self.sampling)?;
        self.loss.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, betas: self.betas, weight_decay: self.weight_decay, ..AdamConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: usize,
    pub val_loss: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub kappa: f64,
    pub score: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub best_val_metric: f64,
    pub best_step: usize,
    pub steps_trained: usize,
    pub stopped_early: bool,
    pub history: Vec<ValidationRecord>,
    /// Validation metrics of the returned checkpoint.
    pub final_report: MetricsReport,
}

/// Anything that maps `[B, S, C, T]` epochs to `[B, S, 5]` logits.
pub trait Classifier {
    fn logits(&self, x: &Tensor) -> Result<Tensor>;
}

/// Inference with `X' = X` on borrowed weights.
pub struct Inference<'a> {
    pub config: &'a ModelConfig,
    pub params: &'a ModelParams,
}

impl Classifier for Inference<'_> {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let xv = g.constant(x);
        let trace = sst_forward(&mut g, &bound, self.config, xv, xv)?;
        Ok(g.tensor(trace.logits))
    }
}

impl Classifier for crate::model::Sst {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        crate::model::Sst::logits(self, x)
    }
}

/// Scores the current weights; called every `validate_every` steps.
pub trait Validator {
    fn validate(&mut self, config: &ModelConfig, params: &ModelParams, step: usize) -> Result<(f64, MetricsReport)>;
}

/// Validation on a held-out store.
pub struct StoreValidator<'a> {
    pub store: &'a EpochStore,
    pub loss: LossConfig,
}

impl Validator for StoreValidator<'_> {
    fn validate(&mut self, config: &ModelConfig, params: &ModelParams, _step: usize) -> Result<(f64, MetricsReport)> {
        validate(&Inference { config, params }, self.store, config.seq_len, &self.loss)
    }
}

/// Windows of `seq_len` epochs with stride `seq_len`, plus one end-aligned
/// window when the subject length is not a multiple. Each epoch is scored by
/// exactly one window; the second element lists which positions count.
pub fn sequential_windows(store: &EpochStore, seq_len: usize) -> Vec<(Vec<EpochRef>, std::ops::Range<usize>)> {
    let mut out = Vec::new();
    for (subject, rec) in store.subjects().iter().enumerate() {
        let n = rec.labels.len();
        if n < seq_len {
            continue;
        }
        let window = |start: usize| (start..start + seq_len).map(|pos| EpochRef { subject, pos }).collect();
        let mut start = 0;
        while start + seq_len <= n {
            out.push((window(start), 0..seq_len));
            start += seq_len;
        }
        if start < n {
            out.push((window(n - seq_len), seq_len - (n - start)..seq_len));
        }
    }
    out
}

/// Scored predictions over a whole store.
#[derive(Debug, Clone, PartialEq)]
pub struct StorePredictions {
    pub truth: Vec<u8>,
    pub pred: Vec<u8>,
    /// Mean label-smoothing loss over the scored epochs.
    pub loss: f64,
}

const EVAL_CHUNK: usize = 32;

pub fn predict_store(
    model: &impl Classifier,
    store: &EpochStore,
    seq_len: usize,
    loss: &LossConfig,
) -> Result<StorePredictions> {
    let windows = sequential_windows(store, seq_len);
    if windows.is_empty() {
        return Err(Error::Data(format!("no subject has the {seq_len} epochs needed for one window")));
    }
    let mut out = StorePredictions { truth: Vec::new(), pred: Vec::new(), loss: 0.0 };
    for chunk in windows.chunks(EVAL_CHUNK) {
        let refs: Vec<Vec<EpochRef>> = chunk.iter().map(|(w, _)| w.clone()).collect();
        let logits = model.logits(&store.gather(&refs)?)?;
        let z = logits.data();
        for (b, (w, keep)) in chunk.iter().enumerate() {
            for s in keep.clone() {
                let row = &z[(b * seq_len + s) * N_CLASSES..(b * seq_len + s + 1) * N_CLASSES];
                let y = store.label(w[s]);
                out.loss += smoothed_nll(row, y, loss);
                out.truth.push(y);
                out.pred.push(argmax(row));
            }
        }
    }
    out.loss /= out.truth.len() as f64;
    Ok(out)
}

fn argmax(row: &[f64]) -> u8 {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best as u8
}

/// `-sum_i q_i log softmax_i(z / tau)` for one row.
fn smoothed_nll(row: &[f64], y: u8, cfg: &LossConfig) -> f64 {
    let scaled: Vec<f64> = row.iter().map(|v| v / cfg.tau).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    scaled
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let q = cfg.alpha / N_CLASSES as f64 + if i == y as usize { 1.0 - cfg.alpha } else { 0.0 };
            -q * (v - lse)
        })
        .sum()
}

/// Inference over sequential windows of `store` with `X' = X`. The returned
/// loss is the mean training objective, which reduces to the label-smoothing
/// term because the cosine and KL terms vanish for identical inputs.
pub fn validate(
    model: &impl Classifier,
    store: &EpochStore,
    seq_len: usize,
    loss: &LossConfig,
) -> Result<(f64, MetricsReport)> {
    let p = predict_store(model, store, seq_len, loss)?;
    Ok((p.loss, evaluate_metrics(&p.truth, &p.pred)?))
}

/// Metrics of a trained model on a store from another source, without any
/// parameter update. The store must already be at the model's rate.
pub fn transfer_evaluate(config: &ModelConfig, params: &ModelParams, store: &EpochStore, loss: &LossConfig) -> Result<MetricsReport> {
    if store.fs != config.fs {
        return Err(Error::Config(format!(
            "test data is at {} Hz but the model expects {} Hz; resample it to {} Hz first",
            store.fs, config.fs, config.fs
        )));
    }
    if store.channels != config.channels || store.samples_per_epoch != config.samples_per_epoch {
        return Err(Error::Config(format!(
            "test epochs are {}x{} but the model expects {}x{}",
            store.channels, store.samples_per_epoch, config.channels, config.samples_per_epoch
        )));
    }
    Ok(validate(&Inference { config, params }, store, config.seq_len, loss)?.1)
}

/// Subject indices `(train, validation)`; at least one subject on each side.
pub fn split_subjects(n_subjects: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_subjects < 2 {
        return Err(Error::Data(format!("a subject-level split needs at least 2 subjects, found {n_subjects}")));
    }
    let n_val = ((n_subjects as f64 * val_fraction).round() as usize).clamp(1, n_subjects - 1);
    let mut order: Vec<usize> = (0..n_subjects).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    order.shuffle(&mut rng);
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

/// Splits off validation subjects and trains with [`train_with`].
pub fn train(store: &EpochStore, config: &ModelConfig, cfg: &TrainConfig) -> Result<(ModelParams, RunSummary)> {
    let (train_ids, val_ids) = split_subjects(store.subjects().len(), cfg.val_fraction, cfg.seed)?;
    let train_store = store.select(&train_ids);
    let val_store = store.select(&val_ids);
    let mut validator = StoreValidator { store: &val_store, loss: cfg.loss.clone() };
    train_with(&train_store, config, cfg, &mut validator)
}

/// One optimisation step on `batch`; returns the loss terms.
pub fn train_step(
    store: &EpochStore,
    config: &ModelConfig,
    params: &mut ModelParams,
    adam: &mut AdamState,
    batch: &PairBatch,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let x = batch.x(store)?;
    let xp = batch.xp(store)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let (xv, xpv) = (g.constant(&x), g.constant(&xp));
    let (fwd, rev) = sst_forward_pair(&mut g, &bound, config, xv, xpv)?;
    let terms = total_loss(&mut g, &fwd, &rev, &batch.labels, &cfg.loss)?;
    let values = terms.values(&g);
    if !values.is_finite() {
        return Err(Error::Numerical(format!(
            "step {}: non-finite loss (ls {}, cos {}, kl {}, total {})",
            adam.step + 1,
            values.ls,
            values.cos,
            values.kl,
            values.total
        )));
    }
    g.backward(terms.total)?;
    params.zero_grad();
    params.accumulate_grads(&g, &bound);
    let mut slots = params.all_mut();
    clip_global_norm(&mut slots, cfg.clip_norm);
    adam_step(&mut slots, adam, &cfg.adam());
    Ok(values)
}

/// Trains on `store`, validating every `validate_every` steps, and returns
/// the weights with the best validation score.
pub fn train_with(
    store: &EpochStore,
    config: &ModelConfig,
    cfg: &TrainConfig,
    validator: &mut impl Validator,
) -> Result<(ModelParams, RunSummary)> {
    config.validate()?;
    cfg.validate()?;
    if store.fs != config.fs || store.samples_per_epoch != config.samples_per_epoch || store.channels != config.channels {
        return Err(Error::Config(format!(
            "store epochs ({} Hz, {}x{}) do not match the model ({} Hz, {}x{})",
            store.fs, store.channels, store.samples_per_epoch, config.fs, config.channels, config.samples_per_epoch
        )));
    }
    let index = WindowIndex::build(store, config.seq_len)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sample_rng.set_stream(1);
    let mut params = ModelParams::init(config, &mut init_rng);
    let mut adam = AdamState::new();
    let mut memory = SamplingMemory::new(cfg.p0, cfg.sampling)?;

    let mut best: Option<(f64, usize, ModelParams, MetricsReport)> = None;
    let mut history = Vec::new();
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut step = 0;
    let mut last_batch = None;
    while step < cfg.max_steps {
        let batch = draw_pair_batch(store, &index, &memory, cfg.batch_size, &mut sample_rng)?;
        train_step(store, config, &mut params, &mut adam, &batch, cfg)?;
        step += 1;
        last_batch = Some(batch);
        if step % cfg.validate_every == 0 {
            let batch = last_batch.as_ref().expect("a batch was drawn");
            if validation_round(validator, config, &params, step, cfg, &mut best, &mut history, &mut since_best, batch, &mut memory)? {
                stopped_early = since_best >= cfg.patience;
                break;
            }
        }
    }
    if history.is_empty() {
        let batch = last_batch.as_ref().expect("max_steps is positive");
        validation_round(validator, config, &params, step, cfg, &mut best, &mut history, &mut since_best, batch, &mut memory)?;
    }
    let (best_val_metric, best_step, best_params, final_report) = best.expect("at least one validation");
    Ok((best_params, RunSummary { best_val_metric, best_step, steps_trained: step, stopped_early, history, final_report }))
}

/// Returns `true` when patience is exhausted.
#[allow(clippy::too_many_arguments)]
fn validation_round(
    validator: &mut impl Validator,
    config: &ModelConfig,
    params: &ModelParams,
    step: usize,
    cfg: &TrainConfig,
    best: &mut Option<(f64, usize, ModelParams, MetricsReport)>,
    history: &mut Vec<ValidationRecord>,
    since_best: &mut usize,
    batch: &PairBatch,
    memory: &mut SamplingMemory,
) -> Result<bool> {
    let (val_loss, report) = validator.validate(config, params, step)?;
    if !val_loss.is_finite() {
        return Err(Error::Numerical(format!("step {step}: validation loss is {val_loss}")));
    }
    update_memory(memory, batch, val_loss)?;
    let score = cfg.select.of(&report);
    let improved = best.as_ref().is_none_or(|(b, ..)| score > *b);
    if improved {
        *best = Some((score, step, params.clone(), report.clone()));
        *since_best = 0;
    } else {
        *since_best += 1;
    }
    history.push(ValidationRecord {
        step,
        val_loss,
        macro_f1: report.macro_f1,
        accuracy: report.accuracy,
        kappa: report.kappa,
        score,
        improved,
    });
    Ok(*since_best >= cfg.patience)
}
