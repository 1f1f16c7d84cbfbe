use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::lm::TokenId;
use crate::values::ExplicitValueFn;

use super::{epoch_batches, total_steps, ScoredResponse, SeqRewardModel, TableGrad, TrainConfig};

/// A response with its terminal reward `r(x, y)`.
pub type FudgeExample = ScoredResponse;

/// Halved squared error of every prefix `y≤t`, `t = 1..|y|`, against the
/// terminal reward, with its gradient `Σ (V − r)` per touched key.
pub fn fudge_loss(evf: &ExplicitValueFn, example: &FudgeExample) -> (f64, TableGrad) {
    let mut grad = TableGrad::new();
    let loss = accumulate(evf, example, 1.0, &mut grad, None);
    (loss, grad)
}

fn accumulate(
    evf: &ExplicitValueFn,
    ex: &FudgeExample,
    scale: f64,
    grad: &mut TableGrad,
    mut visits: Option<&mut HashMap<Vec<TokenId>, f64>>,
) -> f64 {
    let mut loss = 0.0;
    for t in 1..=ex.response.len() {
        let key = evf.key_after(&ex.prompt, &ex.response[..t]);
        let err = evf.value_for_key(&key) - ex.reward;
        loss += 0.5 * err * err;
        if let Some(v) = visits.as_deref_mut() {
            *v.entry(key.clone()).or_insert(0.0) += scale;
        }
        *grad.entry(key).or_insert(0.0) += scale * err;
    }
    loss
}

/// Regresses every prefix of every example onto its terminal reward,
/// starting from `init`.
///
/// The objective is a separable quadratic with one curvature term per key
/// (its visit count in the batch), so each key's gradient step is divided by
/// that curvature. At `learning_rate = 1` with a full batch this lands on the
/// per-key mean target in one step.
pub fn train_fudge_on_targets(
    init: &ExplicitValueFn,
    data: &[FudgeExample],
    cfg: &TrainConfig,
) -> Result<ExplicitValueFn> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("fudge"));
    }
    if let Some(ex) = data.iter().find(|ex| !ex.reward.is_finite()) {
        return Err(Error::Input(format!("non-finite terminal reward {}", ex.reward)));
    }
    let mut evf = init.clone();
    let total = total_steps(data.len(), cfg);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(data.len(), cfg, epoch) {
            let inv = 1.0 / batch.len() as f64;
            let mut grad = TableGrad::new();
            let mut curvature = HashMap::new();
            for &i in &batch {
                accumulate(&evf, &data[i], inv, &mut grad, Some(&mut curvature));
            }
            let lr = cfg.lr_at(step, total);
            for (key, g) in grad {
                *evf.value_mut(&key) -= lr * g / curvature[&key];
            }
            step += 1;
        }
    }
    Ok(evf)
}

/// FUDGE with targets from a sequence reward model.
pub fn train_fudge(
    init: &ExplicitValueFn,
    data: &[(Vec<TokenId>, Vec<TokenId>)],
    reward: &SeqRewardModel,
    cfg: &TrainConfig,
) -> Result<ExplicitValueFn> {
    let targets: Vec<FudgeExample> = data
        .iter()
        .map(|(p, r)| FudgeExample { prompt: p.clone(), response: r.clone(), reward: reward.score(p, r) })
        .collect();
    train_fudge_on_targets(init, &targets, cfg)
}
