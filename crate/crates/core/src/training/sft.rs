use crate::error::{Error, Result};
use crate::lm::{log_softmax, TabularLm, TokenId};

use super::{accumulate_logprob_grad, apply_logit_grad, epoch_batches, total_steps, LogitGrad, TrainConfig};

fn batch_loss(
    model: &TabularLm,
    data: &[(Vec<TokenId>, Vec<TokenId>)],
    batch: impl Iterator<Item = usize>,
) -> (f64, LogitGrad) {
    let idx: Vec<usize> = batch.collect();
    let n_tokens: usize = idx.iter().map(|&i| data[i].1.len()).sum();
    let mut grad = LogitGrad::new();
    if n_tokens == 0 {
        return (0.0, grad);
    }
    let scale = 1.0 / n_tokens as f64;
    let mut loss = 0.0;
    for &i in &idx {
        let (prompt, response) = &data[i];
        for t in 0..response.len() {
            loss -= log_softmax(model.logits_after(prompt, &response[..t]), 1.0)[response[t] as usize];
        }
        // descent direction of cross-entropy is +∇ log π, so the loss gradient carries -scale
        accumulate_logprob_grad(model, prompt, response, -scale, &mut grad);
    }
    (loss * scale, grad)
}

/// Mean next-token cross-entropy over every response token, and its gradient
/// with respect to the model's logits.
pub fn sft_loss(model: &TabularLm, data: &[(Vec<TokenId>, Vec<TokenId>)]) -> (f64, LogitGrad) {
    batch_loss(model, data, 0..data.len())
}

/// Supervised fine-tuning on `(prompt, response)` pairs, starting from `init`.
pub fn train_sft(init: &TabularLm, data: &[(Vec<TokenId>, Vec<TokenId>)], cfg: &TrainConfig) -> Result<TabularLm> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("sft"));
    }
    let mut model = init.clone();
    let total = total_steps(data.len(), cfg);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(data.len(), cfg, epoch) {
            let (_, grad) = batch_loss(&model, data, batch.into_iter());
            apply_logit_grad(&mut model, &grad, cfg.lr_at(step, total));
            step += 1;
        }
    }
    Ok(model)
}
