//! Mini-batch training with Adam, periodic validation and early stopping.
//!
//! Per-sample gradients are computed independently (in parallel when
//! enabled) and summed in sample order, so a run is bit-for-bit repeatable
//! whatever the thread count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use volrep_core::Execution;

use crate::decoder::{Decoder, Memory};
use crate::encoder::{Encoder, EncoderSample};
use crate::graph::{Graph, Var};
use crate::optim::{Adam, AdamConfig};
use crate::params::{Grads, ParamStore};
use crate::{Error, Result};
use volrep_core::report::TokenId;

/// Anything trainable by [`train`].
pub trait Model: Sync {
    type Sample: Sync;

    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Scalar loss node for one sample.
    fn sample_loss(&self, g: &mut Graph, sample: &Self::Sample) -> Result<Var>;
}

impl Model for Encoder {
    type Sample = EncoderSample;

    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn sample_loss(&self, g: &mut Graph, s: &EncoderSample) -> Result<Var> {
        self.loss(g, &s.input, &s.labels)
    }
}

/// A reference report (SOS … EOS) with the encoded image it describes.
#[derive(Clone, Debug)]
pub struct DecoderSample {
    pub memory: Memory,
    pub reference: Vec<TokenId>,
}

impl Model for Decoder {
    type Sample = DecoderSample;

    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn sample_loss(&self, g: &mut Graph, s: &DecoderSample) -> Result<Var> {
        self.loss(g, &s.reference, &s.memory)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Early stopping is not considered before this many updates.
    pub min_steps: usize,
    pub max_steps: usize,
    /// Micro-batches summed into each update.
    pub grad_accumulation: usize,
    pub eval_every: usize,
    /// Evaluations without improvement of the smoothed validation loss
    /// before stopping.
    pub patience: usize,
    /// Width of the moving average over validation losses.
    pub smoothing: usize,
    pub seed: u64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            min_steps: 1500,
            max_steps: 6000,
            grad_accumulation: 1,
            eval_every: 50,
            patience: 3,
            smoothing: 2,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

pub const LR_RANGE: (f64, f64) = (1e-5, 1e-2);
pub const BATCH_RANGE: (usize, usize) = (6, 50);

impl TrainConfig {
    pub fn encoder() -> Self {
        TrainConfig::default()
    }

    pub fn decoder() -> Self {
        TrainConfig { min_steps: 4000, max_steps: 12000, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(LR_RANGE.0..=LR_RANGE.1).contains(&self.learning_rate) {
            return Err(Error::config(format!(
                "learning rate {} outside [{}, {}]",
                self.learning_rate, LR_RANGE.0, LR_RANGE.1
            )));
        }
        if !(BATCH_RANGE.0..=BATCH_RANGE.1).contains(&self.batch_size) {
            return Err(Error::config(format!(
                "batch size {} outside [{}, {}]",
                self.batch_size, BATCH_RANGE.0, BATCH_RANGE.1
            )));
        }
        if self.grad_accumulation == 0 || self.eval_every == 0 || self.smoothing == 0 {
            return Err(Error::config("grad_accumulation, eval_every and smoothing must be at least 1"));
        }
        if self.max_steps < self.min_steps || self.max_steps == 0 {
            return Err(Error::config("max_steps must be positive and at least min_steps"));
        }
        Ok(())
    }
}

/// One row of a metrics history: `(step, split, metric, value)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl MetricsRecord {
    pub fn new(step: usize, split: &str, metric: &str, value: f64) -> Self {
        MetricsRecord { step, split: split.into(), metric: metric.into(), value }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<MetricsRecord>,
    pub steps: usize,
    /// Step whose parameters were restored at the end.
    pub best_step: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn values(&self, split: &str, metric: &str) -> Vec<(usize, f64)> {
        self.history
            .iter()
            .filter(|r| r.split == split && r.metric == metric)
            .map(|r| (r.step, r.value))
            .collect()
    }
}

/// Mean loss and summed-then-averaged gradients over `samples`.
pub fn batch_gradients<M: Model>(model: &M, samples: &[&M::Sample], exec: Execution) -> Result<(f64, Grads)> {
    let per_sample = exec.map(samples, |s| -> Result<(f64, Grads)> {
        let mut g = Graph::new(model.params());
        let loss = model.sample_loss(&mut g, s)?;
        let value = g.value(loss).item();
        Ok((value, g.backward(loss).params))
    });
    let mut total = Grads::new(model.params().len());
    let mut loss = 0.0;
    for r in per_sample {
        let (l, g) = r?;
        loss += l;
        total.add(&g);
    }
    let n = samples.len().max(1) as f64;
    total.scale(1.0 / n);
    Ok((loss / n, total))
}

/// Mean per-sample loss without gradients.
pub fn mean_loss<M: Model>(model: &M, samples: &[M::Sample], exec: Execution) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty set"));
    }
    let losses = exec.map(samples, |s| -> Result<f64> {
        let mut g = Graph::new(model.params());
        let loss = model.sample_loss(&mut g, s)?;
        Ok(g.value(loss).item())
    });
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / samples.len() as f64)
}

/// Endless epoch-shuffled index stream.
struct Batches {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Batches {
    fn new(n: usize, seed: u64) -> Self {
        let mut b = Batches { rng: ChaCha8Rng::seed_from_u64(seed), order: (0..n).collect(), pos: n };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next(&mut self, k: usize) -> Vec<usize> {
        (0..k)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.reshuffle();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Extra validation metrics computed at each evaluation.
pub type EvalHook<'a, M> = dyn FnMut(&M) -> Result<Vec<(String, f64)>> + 'a;

/// Trains `model` in place and leaves it at the best-validation parameters.
pub fn train<M: Model>(
    model: &mut M,
    train_set: &[M::Sample],
    val_set: &[M::Sample],
    cfg: &TrainConfig,
    mut hook: Option<&mut EvalHook<'_, M>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    let exec = cfg.execution;
    let mut adam = Adam::new(AdamConfig::new(cfg.learning_rate), model.params());
    let mut batches = Batches::new(train_set.len(), cfg.seed);
    let mut history = Vec::new();
    let mut val_losses: Vec<f64> = Vec::new();

    let mut evaluate = |model: &M, step: usize, history: &mut Vec<MetricsRecord>| -> Result<f64> {
        let v = mean_loss(model, val_set, exec)?;
        history.push(MetricsRecord::new(step, "val", "loss", v));
        if let Some(h) = hook.as_mut() {
            for (name, value) in h(model)? {
                history.push(MetricsRecord::new(step, "val", &name, value));
            }
        }
        Ok(v)
    };

    let v0 = evaluate(model, 0, &mut history)?;
    val_losses.push(v0);
    let mut best = (v0, 0usize, model.params().clone());
    let mut best_smoothed = v0;
    let mut stale = 0;
    let mut step = 0;
    let mut stopped_early = false;

    while step < cfg.max_steps {
        step += 1;
        let mut grads = Grads::new(model.params().len());
        let mut loss = 0.0;
        for _ in 0..cfg.grad_accumulation {
            let idx = batches.next(cfg.batch_size);
            let batch: Vec<&M::Sample> = idx.iter().map(|&i| &train_set[i]).collect();
            let (l, g) = batch_gradients(&*model, &batch, exec)?;
            loss += l;
            grads.add(&g);
        }
        let scale = 1.0 / cfg.grad_accumulation as f64;
        loss *= scale;
        grads.scale(scale);
        if !loss.is_finite() || !grads.norm().is_finite() {
            let tail: Vec<_> = history.iter().rev().take(10).rev().collect();
            return Err(Error::Training {
                step,
                reason: format!("non-finite loss {loss}"),
                snapshot: serde_json::to_string(&tail).unwrap_or_default(),
            });
        }
        adam.step(model.params_mut(), &grads);
        history.push(MetricsRecord::new(step, "train", "loss", loss));

        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let v = evaluate(model, step, &mut history)?;
            val_losses.push(v);
            if v < best.0 {
                best = (v, step, model.params().clone());
            }
            let k = cfg.smoothing.min(val_losses.len());
            let smoothed = val_losses[val_losses.len() - k..].iter().sum::<f64>() / k as f64;
            if smoothed < best_smoothed {
                best_smoothed = smoothed;
                stale = 0;
            } else {
                stale += 1;
            }
            if step >= cfg.min_steps && stale >= cfg.patience {
                stopped_early = step < cfg.max_steps;
                break;
            }
        }
    }

    let (best_val_loss, best_step, params) = best;
    *model.params_mut() = params;
    Ok(TrainOutcome { history, steps: step, best_step, best_val_loss, stopped_early })
}
