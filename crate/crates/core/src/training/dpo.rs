use crate::error::{Error, Result};
use crate::lm::{sequence_logprob, TabularLm, TokenSequence};

use super::{
    accumulate_logprob_grad, apply_logit_grad, compensated_mean, epoch_batches, sigmoid, softplus, total_steps,
    LogitGrad, PreferenceExample, TrainConfig,
};

fn logprob(model: &TabularLm, prompt: &[u32], response: &[u32]) -> f64 {
    sequence_logprob(model, &TokenSequence::new(prompt.to_vec(), response.to_vec()), 1.0)
}

fn batch_loss(
    policy: &TabularLm,
    data: &[PreferenceExample],
    ref_logprobs: &[(f64, f64)],
    idx: &[usize],
    beta: f64,
) -> (f64, LogitGrad) {
    let mut grad = LogitGrad::new();
    if idx.is_empty() {
        return (0.0, grad);
    }
    let inv = 1.0 / idx.len() as f64;
    let mut losses = Vec::with_capacity(idx.len());
    for &i in idx {
        let ex = &data[i];
        let (ref_w, ref_l) = ref_logprobs[i];
        let margin = beta
            * ((logprob(policy, &ex.prompt, &ex.chosen) - ref_w) - (logprob(policy, &ex.prompt, &ex.rejected) - ref_l));
        losses.push(softplus(-margin));
        // d/dmargin of -log σ(margin) is -σ(-margin)
        let coeff = -sigmoid(-margin) * beta * inv;
        accumulate_logprob_grad(policy, &ex.prompt, &ex.chosen, coeff, &mut grad);
        accumulate_logprob_grad(policy, &ex.prompt, &ex.rejected, -coeff, &mut grad);
    }
    (compensated_mean(losses), grad)
}

fn reference_logprobs(reference: &TabularLm, data: &[PreferenceExample]) -> Vec<(f64, f64)> {
    data.iter()
        .map(|ex| (logprob(reference, &ex.prompt, &ex.chosen), logprob(reference, &ex.prompt, &ex.rejected)))
        .collect()
}

/// Mean DPO loss over `batch` and its gradient with respect to the policy's
/// logits. Log-probabilities are taken at temperature 1.
pub fn dpo_loss(
    policy: &TabularLm,
    reference: &TabularLm,
    batch: &[PreferenceExample],
    dpo_beta: f64,
) -> (f64, LogitGrad) {
    let refs = reference_logprobs(reference, batch);
    let idx: Vec<usize> = (0..batch.len()).collect();
    batch_loss(policy, batch, &refs, &idx, dpo_beta)
}

/// Tunes a copy of `sft_model` against the frozen `sft_model` as reference.
pub fn train_dpo(sft_model: &TabularLm, data: &[PreferenceExample], cfg: &TrainConfig) -> Result<TabularLm> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("dpo"));
    }
    let refs = reference_logprobs(sft_model, data);
    let mut policy = sft_model.clone();
    let total = total_steps(data.len(), cfg);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(data.len(), cfg, epoch) {
            let (_, grad) = batch_loss(&policy, data, &refs, &batch, cfg.dpo_beta);
            apply_logit_grad(&mut policy, &grad, cfg.lr_at(step, total));
            step += 1;
        }
    }
    Ok(policy)
}

/// Fraction of pairs whose implicit reward `log π/π_ref` ranks chosen above rejected.
pub fn implicit_reward_accuracy(
    policy: &TabularLm,
    reference: &TabularLm,
    data: &[PreferenceExample],
    temperature: f64,
) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let r = |resp: &[u32], prompt: &[u32]| {
        let seq = TokenSequence::new(prompt.to_vec(), resp.to_vec());
        sequence_logprob(policy, &seq, temperature) - sequence_logprob(reference, &seq, temperature)
    };
    let hits = data.iter().filter(|ex| r(&ex.chosen, &ex.prompt) > r(&ex.rejected, &ex.prompt)).count();
    hits as f64 / data.len() as f64
}
