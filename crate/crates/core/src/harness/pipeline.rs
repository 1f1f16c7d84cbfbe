use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::lm::{TabularLm, TokenId, Vocabulary};
use crate::synth::{SynthTask, SynthTaskSpec};
use crate::training::{
    train_dpo, train_fudge, train_reward_model, train_sft, PreferenceExample, Schedule, SeqRewardModel, TrainConfig,
};
use crate::values::ExplicitValueFn;

use super::{ModelSet, BETA_GRID};

/// Everything needed to go from a task spec to decoded, scored responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub task: SynthTaskSpec,
    /// Context order of the SFT and DPO tables.
    pub lm_order: usize,
    /// Context order of the FUDGE table.
    pub value_order: usize,
    pub sft: TrainConfig,
    pub dpo: TrainConfig,
    pub reward: TrainConfig,
    pub reward_ngram_order: usize,
    pub fudge: TrainConfig,
    pub decode: GuidanceConfig,
    pub betas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl PipelineConfig {
    pub fn for_task(task: SynthTaskSpec) -> Self {
        PipelineConfig {
            task,
            lm_order: 0,
            value_order: 2,
            sft: TrainConfig { learning_rate: 2.0, epochs: 30, batch_size: 64, ..Default::default() },
            dpo: TrainConfig {
                learning_rate: 50.0,
                epochs: 20,
                batch_size: 256,
                dpo_beta: 0.1,
                schedule: Schedule::Cosine,
                seed: 0,
            },
            reward: TrainConfig { learning_rate: 2.0, epochs: 100, batch_size: 256, ..Default::default() },
            reward_ngram_order: 2,
            fudge: TrainConfig { learning_rate: 1.0, epochs: 1, batch_size: usize::MAX, ..Default::default() },
            decode: GuidanceConfig::default(),
            betas: BETA_GRID.to_vec(),
            seeds: vec![0, 1, 2],
        }
    }

    pub fn default_sentiment() -> Self {
        Self::for_task(SynthTaskSpec::default_sentiment())
    }

    pub fn default_context() -> Self {
        Self::for_task(SynthTaskSpec::default_context())
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        for c in [&self.sft, &self.dpo, &self.reward, &self.fudge] {
            c.validate()?;
        }
        self.decode.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.reward_ngram_order == 0 {
            return Err(Error::Config("reward_ngram_order must be at least 1".into()));
        }
        Ok(())
    }
}

/// Every trained artifact of a pipeline run.
#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub sft: TabularLm,
    pub dpo: TabularLm,
    pub reward: SeqRewardModel,
    pub fudge: ExplicitValueFn,
}

impl TrainedModels {
    pub fn model_set(&self, base: &TabularLm) -> ModelSet {
        ModelSet {
            base: base.clone(),
            tuned: Some(self.dpo.clone()),
            reference: Some(self.sft.clone()),
            explicit: Some(self.fudge.clone()),
        }
    }
}

/// Both responses of every pair, the corpus for SFT and FUDGE.
pub fn pair_responses(pairs: &[PreferenceExample]) -> Vec<(Vec<TokenId>, Vec<TokenId>)> {
    pairs
        .iter()
        .flat_map(|ex| [(ex.prompt.clone(), ex.chosen.clone()), (ex.prompt.clone(), ex.rejected.clone())])
        .collect()
}

/// SFT of a uniform order-`lm_order` table on both responses of every pair.
pub fn fit_sft(vocab: &Vocabulary, pairs: &[PreferenceExample], cfg: &PipelineConfig) -> Result<TabularLm> {
    let init = TabularLm::new(vocab.clone(), cfg.lm_order, 0.0)?;
    train_sft(&init, &pair_responses(pairs), &cfg.sft)
}

pub fn fit_dpo(sft: &TabularLm, pairs: &[PreferenceExample], cfg: &PipelineConfig) -> Result<TabularLm> {
    train_dpo(sft, pairs, &cfg.dpo)
}

pub fn fit_reward(vocab: &Vocabulary, pairs: &[PreferenceExample], cfg: &PipelineConfig) -> Result<SeqRewardModel> {
    train_reward_model(pairs, &cfg.reward, cfg.reward_ngram_order, vocab.eos())
}

/// FUDGE regression of every prefix of both pair responses onto the reward
/// model's score. Unseen prefixes score as the average response.
pub fn fit_fudge(
    vocab: &Vocabulary,
    pairs: &[PreferenceExample],
    reward: &SeqRewardModel,
    cfg: &PipelineConfig,
) -> Result<ExplicitValueFn> {
    let responses = pair_responses(pairs);
    if responses.is_empty() {
        return Err(Error::EmptyDataset("fudge"));
    }
    let mean = responses.iter().map(|(p, r)| reward.score(p, r)).sum::<f64>() / responses.len() as f64;
    let init = ExplicitValueFn::new(cfg.value_order, vocab.bos(), mean)?;
    train_fudge(&init, &responses, reward, &cfg.fudge)
}

/// SFT → DPO, and reward model → FUDGE, on the task's preference pairs.
pub fn train_models(task: &SynthTask, cfg: &PipelineConfig) -> Result<TrainedModels> {
    let vocab = task.base_lm.vocab();
    let sft = fit_sft(vocab, &task.train_pairs, cfg)?;
    let dpo = fit_dpo(&sft, &task.train_pairs, cfg)?;
    let reward = fit_reward(vocab, &task.train_pairs, cfg)?;
    let fudge = fit_fudge(vocab, &task.train_pairs, &reward, cfg)?;
    Ok(TrainedModels { sft, dpo, reward, fudge })
}
