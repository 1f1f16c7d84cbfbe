use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::TokenId;

use super::{epoch_batches, sigmoid, softplus, total_steps, PreferenceExample, TableGrad, TrainConfig};

/// Sequence reward `r(x, y)` as a linear function of the response's n-gram
/// bag: every n-gram of length `1..=ngram_order` inside the response (a
/// trailing `eos` excluded) contributes `weight / |y|` per occurrence.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqRewardModel {
    ngram_order: usize,
    eos: TokenId,
    weights: HashMap<Vec<TokenId>, f64>,
}

/// Sparse feature vector, sorted by key.
pub(crate) type Features = Vec<(Vec<TokenId>, f64)>;

impl SeqRewardModel {
    pub fn new(ngram_order: usize, eos: TokenId) -> Result<Self> {
        if ngram_order == 0 {
            return Err(Error::Config("reward n-gram order must be at least 1".into()));
        }
        Ok(SeqRewardModel { ngram_order, eos, weights: HashMap::new() })
    }

    pub fn ngram_order(&self) -> usize {
        self.ngram_order
    }

    pub fn weight(&self, ngram: &[TokenId]) -> f64 {
        self.weights.get(ngram).copied().unwrap_or(0.0)
    }

    pub fn set_weight(&mut self, ngram: Vec<TokenId>, w: f64) -> Result<()> {
        if ngram.is_empty() || ngram.len() > self.ngram_order {
            return Err(Error::Input(format!("n-gram of length {} outside 1..={}", ngram.len(), self.ngram_order)));
        }
        if !w.is_finite() {
            return Err(Error::Input("reward weights must be finite".into()));
        }
        self.weights.insert(ngram, w);
        Ok(())
    }

    pub fn num_entries(&self) -> usize {
        self.weights.len()
    }

    pub fn features(&self, _prompt: &[TokenId], response: &[TokenId]) -> Features {
        let content = match response.last() {
            Some(&t) if t == self.eos => &response[..response.len() - 1],
            _ => response,
        };
        let inv = 1.0 / content.len().max(1) as f64;
        let mut bag: HashMap<&[TokenId], f64> = HashMap::new();
        for n in 1..=self.ngram_order {
            for w in content.windows(n) {
                *bag.entry(w).or_insert(0.0) += inv;
            }
        }
        let mut out: Features = bag.into_iter().map(|(k, v)| (k.to_vec(), v)).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    fn dot(&self, f: &Features) -> f64 {
        f.iter().map(|(k, v)| self.weight(k) * v).sum()
    }

    pub fn score(&self, prompt: &[TokenId], response: &[TokenId]) -> f64 {
        self.dot(&self.features(prompt, response))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut entries: Vec<RewardEntry> =
            self.weights.iter().map(|(k, w)| RewardEntry { ngram: k.clone(), weight: *w }).collect();
        entries.sort_by(|a, b| a.ngram.cmp(&b.ngram));
        let file = RewardFile {
            version: crate::lm::FORMAT_VERSION,
            representation: REPRESENTATION.into(),
            ngram_order: self.ngram_order,
            eos: self.eos,
            entries,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: RewardFile = serde_json::from_str(text)?;
        if file.representation != REPRESENTATION {
            return Err(Error::Input(format!("unknown reward representation {:?}", file.representation)));
        }
        let mut m = SeqRewardModel::new(file.ngram_order, file.eos)?;
        for e in file.entries {
            m.set_weight(e.ngram, e.weight)?;
        }
        Ok(m)
    }
}

const REPRESENTATION: &str = "length-normalized n-gram bag";

#[derive(Serialize, Deserialize)]
struct RewardFile {
    version: u32,
    representation: String,
    ngram_order: usize,
    eos: TokenId,
    entries: Vec<RewardEntry>,
}

#[derive(Serialize, Deserialize)]
struct RewardEntry {
    ngram: Vec<TokenId>,
    weight: f64,
}

fn batch_loss(model: &SeqRewardModel, feats: &[(Features, Features)], idx: &[usize]) -> (f64, TableGrad) {
    let mut grad = TableGrad::new();
    if idx.is_empty() {
        return (0.0, grad);
    }
    let inv = 1.0 / idx.len() as f64;
    let mut loss = 0.0;
    for &i in idx {
        let (fw, fl) = &feats[i];
        let margin = model.dot(fw) - model.dot(fl);
        loss += softplus(-margin);
        let coeff = -sigmoid(-margin) * inv;
        for (k, v) in fw {
            *grad.entry(k.clone()).or_insert(0.0) += coeff * v;
        }
        for (k, v) in fl {
            *grad.entry(k.clone()).or_insert(0.0) -= coeff * v;
        }
    }
    (loss * inv, grad)
}

fn pair_features(model: &SeqRewardModel, data: &[PreferenceExample]) -> Vec<(Features, Features)> {
    data.iter().map(|ex| (model.features(&ex.prompt, &ex.chosen), model.features(&ex.prompt, &ex.rejected))).collect()
}

/// Mean Bradley-Terry loss `−log σ(r(x, y_w) − r(x, y_l))` and its gradient
/// with respect to the reward weights.
pub fn bt_loss(model: &SeqRewardModel, batch: &[PreferenceExample]) -> (f64, TableGrad) {
    let feats = pair_features(model, batch);
    let idx: Vec<usize> = (0..batch.len()).collect();
    batch_loss(model, &feats, &idx)
}

/// Fits a [`SeqRewardModel`] to preference pairs from zero weights.
pub fn train_reward_model(
    data: &[PreferenceExample],
    cfg: &TrainConfig,
    ngram_order: usize,
    eos: TokenId,
) -> Result<SeqRewardModel> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("reward model"));
    }
    let mut model = SeqRewardModel::new(ngram_order, eos)?;
    let feats = pair_features(&model, data);
    let total = total_steps(data.len(), cfg);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(data.len(), cfg, epoch) {
            let (_, grad) = batch_loss(&model, &feats, &batch);
            let lr = cfg.lr_at(step, total);
            for (k, g) in grad {
                *model.weights.entry(k).or_insert(0.0) -= lr * g;
            }
            step += 1;
        }
    }
    Ok(model)
}
