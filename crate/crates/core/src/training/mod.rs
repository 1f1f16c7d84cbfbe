//! Training for every learned object in the pipeline: the SFT reference
//! model, the DPO-tuned model, the Bradley-Terry sequence reward model and the
//! FUDGE prefix scorer.
//!
//! All parameters are tables, so every loss has an exact analytic gradient.
//! The optimizer is plain mini-batch gradient descent with an optional cosine
//! decay of the learning rate.

mod data;
mod dpo;
mod fudge;
mod reward;
mod sft;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{TabularLm, TokenId};
use crate::rng;

pub use data::{
    read_preferences, read_records, read_scored, write_preferences, write_scored, DatasetRecord, PreferenceExample,
    ScoredResponse,
};
pub use dpo::{dpo_loss, implicit_reward_accuracy, train_dpo};
pub use fudge::{fudge_loss, train_fudge, train_fudge_on_targets, FudgeExample};
pub use reward::{bt_loss, train_reward_model, SeqRewardModel};
pub use sft::{sft_loss, train_sft};

/// Sparse gradient over the logit rows of a [`TabularLm`].
pub type LogitGrad = HashMap<Vec<TokenId>, Vec<f64>>;

/// Sparse gradient over scalar table entries (reward weights, prefix values).
pub type TableGrad = HashMap<Vec<TokenId>, f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Scaled down to the dataset size when larger.
    pub batch_size: usize,
    /// β of the DPO objective.
    #[serde(default = "default_dpo_beta")]
    pub dpo_beta: f64,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub seed: u64,
}

fn default_dpo_beta() -> f64 {
    0.1
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1.0,
            epochs: 1,
            batch_size: 64,
            dpo_beta: 0.1,
            schedule: Schedule::Constant,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.dpo_beta.is_finite() && self.dpo_beta > 0.0) {
            return Err(Error::Config(format!("dpo_beta must be positive, got {}", self.dpo_beta)));
        }
        Ok(())
    }

    /// Learning rate at optimizer step `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                let frac = step as f64 / total.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Shuffled mini-batches of `0..n` for every epoch, reproducible from the seed.
pub(crate) fn epoch_batches(n: usize, cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let batch = cfg.batch_size.min(n).max(1);
    if batch < n {
        idx.shuffle(&mut rng::stream(cfg.seed, &[0x7EA1, epoch as u64]));
    }
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

pub(crate) fn total_steps(n: usize, cfg: &TrainConfig) -> usize {
    let batch = cfg.batch_size.min(n).max(1);
    cfg.epochs * n.div_ceil(batch)
}

pub(crate) fn apply_logit_grad(model: &mut TabularLm, grad: &LogitGrad, lr: f64) {
    for (key, g) in grad {
        let row = model.row_mut(key);
        row.iter_mut().zip(g).for_each(|(w, d)| *w -= lr * d);
    }
}

/// Accumulates `scale · (onehot(y_t) − softmax(row))` for every response
/// position into `grad`, i.e. `scale · ∇ log π(y | x)` at temperature 1.
pub(crate) fn accumulate_logprob_grad(
    model: &TabularLm,
    prompt: &[TokenId],
    response: &[TokenId],
    scale: f64,
    grad: &mut LogitGrad,
) {
    for t in 0..response.len() {
        let key = model.key_after(prompt, &response[..t]);
        let probs = crate::lm::softmax(model.logits_for_key(&key), 1.0);
        let g = grad.entry(key).or_insert_with(|| vec![0.0; probs.len()]);
        for (gi, p) in g.iter_mut().zip(&probs) {
            *gi -= scale * p;
        }
        g[response[t] as usize] += scale;
    }
}

/// Numerically stable `log(1 + e^x)`.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Neumaier-compensated mean; the mean of `n` equal values is that value.
pub(crate) fn compensated_mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp, mut n) = (0.0f64, 0.0f64, 0usize);
    for x in xs {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (sum + comp) / n as f64
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_decays_from_base_rate() {
        let cfg = TrainConfig { learning_rate: 2.0, schedule: Schedule::Cosine, ..Default::default() };
        assert_eq!(cfg.lr_at(0, 10), 2.0);
        assert!((cfg.lr_at(5, 10) - 1.0).abs() < 1e-12);
        assert!(cfg.lr_at(9, 10) < 0.1);
        let flat = TrainConfig { learning_rate: 2.0, ..Default::default() };
        assert_eq!(flat.lr_at(9, 10), 2.0);
    }

    #[test]
    fn batches_cover_every_index_once() {
        let cfg = TrainConfig { batch_size: 4, seed: 3, ..Default::default() };
        let mut all: Vec<usize> = epoch_batches(10, &cfg, 2).concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(epoch_batches(10, &cfg, 2), epoch_batches(10, &cfg, 2));
        assert_eq!(total_steps(10, &TrainConfig { epochs: 3, batch_size: 4, ..Default::default() }), 9);
    }

    #[test]
    fn stable_logistic_helpers() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { dpo_beta: -0.1, ..Default::default() }.validate().is_err());
    }
}
