//! Minibatch training loop with early stopping and a JSON log.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::numerics::{Adam, Grads, ParamStore, Tensor};
use crate::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: Adam,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Hard cap on optimizer steps.
    pub max_steps: Option<u64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Adam::adamw(1e-4),
            batch_size: 8,
            max_epochs: 100,
            patience: 5,
            max_steps: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be positive"));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(config_err!("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Per-item loss and gradients of a training problem.
pub trait Objective: Sync {
    fn train_len(&self) -> usize;
    fn val_len(&self) -> usize;
    fn train_step(&self, ps: &ParamStore<f32>, item: usize) -> Result<(f64, Grads<f32>)>;
    fn val_loss(&self, ps: &ParamStore<f32>, item: usize) -> Result<f64>;
    /// Loss of a training item without gradients.
    fn train_loss(&self, ps: &ParamStore<f32>, item: usize) -> Result<f64> {
        Ok(self.train_step(ps, item)?.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken by the end of this epoch.
    pub steps: u64,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Epoch 0 is the evaluation of the initial parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainLog {
    pub stage: String,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn mean_loss(n: usize, f: impl Fn(usize) -> Result<f64> + Sync + Send) -> Result<f64> {
    let losses: Vec<f64> = (0..n).into_par_iter().map(f).collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / n as f64)
}

/// Trains `ps` in place and leaves it at the best validation epoch.
pub fn fit(
    obj: &dyn Objective,
    ps: &mut ParamStore<f32>,
    cfg: &TrainConfig,
    stage: &str,
) -> Result<TrainLog> {
    cfg.validate()?;
    if obj.train_len() == 0 || obj.val_len() == 0 {
        return Err(config_err!("{stage}: empty training or validation split"));
    }
    let eval = |ps: &ParamStore<f32>| -> Result<(f64, f64)> {
        Ok((
            mean_loss(obj.train_len(), |i| obj.train_loss(ps, i))?,
            mean_loss(obj.val_len(), |i| obj.val_loss(ps, i))?,
        ))
    };
    let (train0, val0) = eval(ps)?;
    let mut epochs = vec![EpochRecord {
        epoch: 0,
        steps: 0,
        train_loss: train0,
        val_loss: val0,
    }];
    let mut best = (0usize, val0);
    let mut best_params: BTreeMap<String, Tensor<f32>> = ps.values().clone();
    let mut order: Vec<usize> = (0..obj.train_len()).collect();
    let mut rng = rng_for(cfg.seed, 0x7EA1);
    let mut steps = 0u64;

    'epochs: for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let results: Vec<(f64, Grads<f32>)> = batch
                .par_iter()
                .map(|&i| obj.train_step(ps, i))
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f32;
            for (loss, grads) in &results {
                loss_sum += loss;
                ps.accumulate(grads, scale)?;
            }
            seen += batch.len();
            cfg.optimizer.step(ps)?;
            steps += 1;
        }
        if seen == 0 {
            break;
        }
        let val = mean_loss(obj.val_len(), |i| obj.val_loss(ps, i))?;
        if !val.is_finite() {
            return Err(Error::NonFinite(format!("{stage}: validation loss")));
        }
        epochs.push(EpochRecord {
            epoch,
            steps,
            train_loss: loss_sum / seen as f64,
            val_loss: val,
        });
        if val < best.1 {
            best = (epoch, val);
            best_params = ps.values().clone();
        } else if epoch - best.0 >= cfg.patience {
            break 'epochs;
        }
    }
    for (name, value) in best_params {
        ps.set(&name, value)?;
    }
    Ok(TrainLog {
        stage: stage.to_string(),
        lr: cfg.optimizer.lr,
        note: None,
        epochs,
        best_epoch: best.0,
    })
}
