//! Small adaptive hyperparameter search: start in the middle of the grid,
//! react to the observed training dynamics, stop at the first success or
//! after a fixed budget of combinations.

use serde::{Deserialize, Serialize};

use crate::train::{TrainConfig, TrainOutcome, BATCH_RANGE, LR_RANGE};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchGrid {
    pub lr_min: f64,
    pub lr_max: f64,
    pub batch_min: usize,
    pub batch_max: usize,
}

impl Default for SearchGrid {
    fn default() -> Self {
        SearchGrid { lr_min: LR_RANGE.0, lr_max: LR_RANGE.1, batch_min: BATCH_RANGE.0, batch_max: BATCH_RANGE.1 }
    }
}

impl SearchGrid {
    /// Geometric midpoint in learning rate, arithmetic in batch size.
    pub fn midpoint(&self) -> (f64, usize) {
        ((self.lr_min * self.lr_max).sqrt(), (self.batch_min + self.batch_max) / 2)
    }

    fn validate(&self) -> Result<()> {
        let ok = LR_RANGE.0 <= self.lr_min
            && self.lr_min <= self.lr_max
            && self.lr_max <= LR_RANGE.1
            && BATCH_RANGE.0 <= self.batch_min
            && self.batch_min <= self.batch_max
            && self.batch_max <= BATCH_RANGE.1;
        if ok {
            Ok(())
        } else {
            Err(Error::config("search grid outside the admissible learning-rate and batch ranges"))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dynamics {
    Diverged,
    Noisy,
    Stable,
}

/// Coefficient of variation of the last quarter of training losses above
/// which a run counts as noisy.
pub const NOISE_CV: f64 = 0.25;

impl Dynamics {
    /// Diverged when validation ends above where it started; noisy when the
    /// late training loss fluctuates strongly around its mean.
    pub fn classify(outcome: &TrainOutcome) -> Dynamics {
        let val = outcome.values("val", "loss");
        if let (Some(first), Some(last)) = (val.first(), val.last()) {
            if !(last.1 <= first.1) {
                return Dynamics::Diverged;
            }
        }
        let train: Vec<f64> = outcome.values("train", "loss").into_iter().map(|(_, v)| v).collect();
        let tail = &train[train.len() - train.len() / 4..];
        if tail.len() >= 4 {
            let mean = tail.iter().sum::<f64>() / tail.len() as f64;
            let var = tail.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / tail.len() as f64;
            if mean > 0.0 && var.sqrt() / mean > NOISE_CV {
                return Dynamics::Noisy;
            }
        }
        Dynamics::Stable
    }
}

/// What one training run reports back to the search.
#[derive(Clone, Debug)]
pub struct Trial<T> {
    /// Validation criterion, higher is better.
    pub metric: f64,
    pub dynamics: Dynamics,
    pub artifact: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchLogEntry {
    pub combination: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Absent when the run aborted.
    pub metric: Option<f64>,
    pub dynamics: Dynamics,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct SearchResult<T> {
    pub best: Option<(TrainConfig, Trial<T>)>,
    pub log: Vec<SearchLogEntry>,
    pub successful: bool,
}

pub const DEFAULT_TARGET: f64 = 0.95;
pub const DEFAULT_BUDGET: usize = 4;

/// Next combination after a failed one: halve the rate on divergence,
/// double the batch on noise (halving the rate instead once the batch is
/// at its ceiling), otherwise double the rate.
pub fn next_combination(grid: &SearchGrid, lr: f64, batch: usize, dynamics: Dynamics) -> (f64, usize) {
    match dynamics {
        Dynamics::Diverged => ((lr / 2.0).max(grid.lr_min), batch),
        Dynamics::Noisy if batch < grid.batch_max => (lr, (batch * 2).min(grid.batch_max)),
        Dynamics::Noisy => ((lr / 2.0).max(grid.lr_min), batch),
        Dynamics::Stable => ((lr * 2.0).min(grid.lr_max), batch),
    }
}

/// Runs up to `budget` combinations through `run`; training failures count
/// as diverged runs.
pub fn hyperparameter_search<T, F>(
    base: &TrainConfig,
    grid: &SearchGrid,
    target: f64,
    budget: usize,
    mut run: F,
) -> Result<SearchResult<T>>
where
    F: FnMut(&TrainConfig) -> Result<Trial<T>>,
{
    grid.validate()?;
    let (mut lr, mut batch) = grid.midpoint();
    let mut log = Vec::new();
    let mut best: Option<(TrainConfig, Trial<T>)> = None;
    for combination in 1..=budget {
        let cfg = TrainConfig { learning_rate: lr, batch_size: batch, ..base.clone() };
        let (dynamics, entry_metric, error) = match run(&cfg) {
            Ok(trial) => {
                let d = trial.dynamics;
                let m = trial.metric;
                if best.as_ref().is_none_or(|(_, b)| m > b.metric) {
                    best = Some((cfg.clone(), trial));
                }
                (d, Some(m), None)
            }
            Err(e @ Error::Training { .. }) => (Dynamics::Diverged, None, Some(e.to_string())),
            Err(e) => return Err(e),
        };
        log.push(SearchLogEntry {
            combination,
            learning_rate: lr,
            batch_size: batch,
            metric: entry_metric,
            dynamics,
            error,
        });
        if entry_metric.is_some_and(|m| m >= target) {
            return Ok(SearchResult { best, log, successful: true });
        }
        (lr, batch) = next_combination(grid, lr, batch, dynamics);
    }
    Ok(SearchResult { best, log, successful: false })
}
