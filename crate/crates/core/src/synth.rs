//! Synthetic alignment tasks: a gold reward, a base model with headroom
//! against it, and Bradley-Terry labelled preference pairs sampled from the
//! base model.
//!
//! Two gold rewards are provided. The sentiment reward counts positive minus
//! negative tokens and ignores order; the context reward counts occurrences of
//! target n-grams and so depends on which tokens precede which.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{sample_token, shape_distribution, TabularLm, TokenId, TokenSequence, Vocabulary};
use crate::rng::{self, StreamRng};
use crate::training::PreferenceExample;

/// Order of the generated base model.
pub const BASE_ORDER: usize = 2;
/// Half-width of the uniform noise on base-model logits.
pub const BASE_LOGIT_SPREAD: f64 = 1.5;
/// Logit shift applied against the gold reward's preferred tokens.
pub const BASE_BIAS: f64 = 0.25;
/// Base-model logit of `eos`.
pub const BASE_EOS_LOGIT: f64 = -0.5;
/// Identical pairs are redrawn this many times before one is perturbed.
pub const MAX_PAIR_RETRIES: usize = 16;

const BASE_BOS_LOGIT: f64 = -30.0;
const CONTEXT_WEIGHT: f64 = 4.0;

/// A target n-gram with its bonus (negative for a penalty).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pattern {
    pub ngram: Vec<TokenId>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum GoldRewardModel {
    Sentiment { pos_tokens: Vec<TokenId>, neg_tokens: Vec<TokenId> },
    Context { patterns: Vec<Pattern> },
}

impl GoldRewardModel {
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        let check = |t: &TokenId| {
            if !vocab.contains(*t) || *t == vocab.bos() || *t == vocab.eos() {
                return Err(Error::Config(format!("gold reward token {t} is not a content token")));
            }
            Ok(())
        };
        match self {
            GoldRewardModel::Sentiment { pos_tokens, neg_tokens } => {
                pos_tokens.iter().chain(neg_tokens).try_for_each(check)?;
                let pos: HashSet<_> = pos_tokens.iter().collect();
                if neg_tokens.iter().any(|t| pos.contains(t)) {
                    return Err(Error::Config("positive and negative token sets overlap".into()));
                }
            }
            GoldRewardModel::Context { patterns } => {
                for p in patterns {
                    if p.ngram.is_empty() {
                        return Err(Error::Config("empty target n-gram".into()));
                    }
                    if !p.weight.is_finite() {
                        return Err(Error::Config("pattern weights must be finite".into()));
                    }
                    p.ngram.iter().try_for_each(check)?;
                }
            }
        }
        Ok(())
    }

    pub fn reward(&self, response: &[TokenId], eos: TokenId) -> f64 {
        let content = match response.last() {
            Some(&t) if t == eos => &response[..response.len() - 1],
            _ => response,
        };
        let len = content.len().max(1) as f64;
        match self {
            GoldRewardModel::Sentiment { pos_tokens, neg_tokens } => {
                let pos = content.iter().filter(|t| pos_tokens.contains(t)).count() as f64;
                let neg = content.iter().filter(|t| neg_tokens.contains(t)).count() as f64;
                (pos - neg) / len
            }
            GoldRewardModel::Context { patterns } => {
                let hits: f64 = patterns
                    .iter()
                    .map(|p| {
                        p.weight * content.windows(p.ngram.len()).filter(|w| *w == p.ngram.as_slice()).count() as f64
                    })
                    .sum();
                hits / len
            }
        }
    }
}

/// Gold reward of the response in `seq`; a trailing `eos` is not counted.
pub fn gold_reward(gold: &GoldRewardModel, seq: &TokenSequence, eos: TokenId) -> f64 {
    gold.reward(&seq.response, eos)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthTaskSpec {
    /// Including `bos` (id 0) and `eos` (id 1).
    pub vocab_size: usize,
    /// Content tokens after the leading `bos`.
    pub prompt_length: usize,
    /// Dataset responses are cut to this many tokens, `eos` included.
    pub response_max_len: usize,
    pub gold: GoldRewardModel,
    pub n_train_pairs: usize,
    pub n_eval_prompts: usize,
    pub seed: u64,
}

impl SynthTaskSpec {
    /// 16 tokens: five positive, five negative, four neutral.
    pub fn default_sentiment() -> Self {
        SynthTaskSpec {
            vocab_size: 16,
            prompt_length: 4,
            response_max_len: 24,
            gold: GoldRewardModel::Sentiment { pos_tokens: (2..7).collect(), neg_tokens: (7..12).collect() },
            n_train_pairs: 2000,
            n_eval_prompts: 500,
            seed: 0,
        }
    }

    /// Same sizes as the sentiment task. Every ascending successor bigram
    /// `(a, a+1)` of content tokens earns a bonus and every descending one
    /// `(a+1, a)` a penalty, so the reward depends on token order only.
    pub fn default_context() -> Self {
        let spec = Self::default_sentiment();
        let first = 2;
        let last = spec.vocab_size as TokenId - 1;
        let patterns = (first..last)
            .flat_map(|a| {
                [
                    Pattern { ngram: vec![a, a + 1], weight: CONTEXT_WEIGHT },
                    Pattern { ngram: vec![a + 1, a], weight: -CONTEXT_WEIGHT },
                ]
            })
            .collect();
        SynthTaskSpec { gold: GoldRewardModel::Context { patterns }, ..spec }
    }

    pub fn validate(&self) -> Result<Vocabulary> {
        if self.vocab_size < 3 {
            return Err(Error::Config(format!("vocab_size must be at least 3, got {}", self.vocab_size)));
        }
        for (name, v) in [
            ("prompt_length", self.prompt_length),
            ("response_max_len", self.response_max_len),
            ("n_train_pairs", self.n_train_pairs),
            ("n_eval_prompts", self.n_eval_prompts),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        let vocab = Vocabulary::with_size(self.vocab_size)?;
        self.gold.validate(&vocab)?;
        Ok(vocab)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTask {
    pub spec: SynthTaskSpec,
    pub base_lm: TabularLm,
    pub train_pairs: Vec<PreferenceExample>,
    pub eval_prompts: Vec<Vec<TokenId>>,
}

impl SynthTask {
    pub fn gold(&self) -> &GoldRewardModel {
        &self.spec.gold
    }

    pub fn eos(&self) -> TokenId {
        self.base_lm.vocab().eos()
    }
}

/// Draws two responses with `sampler` and labels them by a Bradley-Terry
/// coin flip on the gold reward gap.
///
/// Identical draws are redrawn up to [`MAX_PAIR_RETRIES`] times; after that
/// the first content token of the second response is replaced by the next
/// content token (or, for a bare `eos`, one content token is put in front).
pub fn sample_preference_pair<F>(
    gold: &GoldRewardModel,
    vocab: &Vocabulary,
    mut sampler: F,
    prompt: &[TokenId],
    rng: &mut StreamRng,
) -> Result<PreferenceExample>
where
    F: FnMut(&[TokenId], &mut StreamRng) -> Result<Vec<TokenId>>,
{
    let y1 = sampler(prompt, rng)?;
    let mut y2 = sampler(prompt, rng)?;
    let mut tries = 0;
    while y2 == y1 && tries < MAX_PAIR_RETRIES {
        y2 = sampler(prompt, rng)?;
        tries += 1;
    }
    if y2 == y1 {
        perturb(&mut y2, vocab);
    }
    if y1 == y2 {
        return Err(Error::Sampler("could not draw two distinct responses".into()));
    }
    let eos = vocab.eos();
    let gap = gold.reward(&y1, eos) - gold.reward(&y2, eos);
    let (chosen, rejected) = if rng.gen::<f64>() < crate::training::sigmoid(gap) { (y1, y2) } else { (y2, y1) };
    Ok(PreferenceExample { prompt: prompt.to_vec(), chosen, rejected })
}

fn perturb(y: &mut Vec<TokenId>, vocab: &Vocabulary) {
    let content: Vec<TokenId> = vocab.content_tokens().collect();
    match y.iter().position(|t| content.contains(t)) {
        Some(i) => {
            let at = content.iter().position(|&c| c == y[i]).expect("content token");
            y[i] = content[(at + 1) % content.len()];
        }
        None => y.insert(0, content[0]),
    }
}

fn base_model(spec: &SynthTaskSpec, vocab: &Vocabulary) -> Result<TabularLm> {
    let mut rng = rng::stream(spec.seed, &[0xBA5E]);
    let mut lm = TabularLm::new(vocab.clone(), BASE_ORDER, 0.0)?;
    let alphabet: Vec<TokenId> = std::iter::once(vocab.bos()).chain(vocab.content_tokens()).collect();
    let mut keys: Vec<Vec<TokenId>> = vec![Vec::new()];
    for _ in 0..BASE_ORDER {
        keys = keys.iter().flat_map(|k| alphabet.iter().map(move |&t| [k.as_slice(), &[t]].concat())).collect();
    }
    for key in keys {
        let mut row: Vec<f64> =
            (0..vocab.len()).map(|_| rng.gen_range(-BASE_LOGIT_SPREAD..=BASE_LOGIT_SPREAD)).collect();
        row[vocab.bos() as usize] = BASE_BOS_LOGIT;
        row[vocab.eos() as usize] = BASE_EOS_LOGIT;
        match &spec.gold {
            GoldRewardModel::Sentiment { pos_tokens, neg_tokens } => {
                pos_tokens.iter().for_each(|&t| row[t as usize] -= BASE_BIAS);
                neg_tokens.iter().for_each(|&t| row[t as usize] += BASE_BIAS);
            }
            GoldRewardModel::Context { patterns } => {
                // make rewarded patterns rare to complete and penalised ones common
                for p in patterns {
                    let (head, last) = p.ngram.split_at(p.ngram.len() - 1);
                    let tail = &head[head.len().saturating_sub(BASE_ORDER)..];
                    if key.ends_with(tail) {
                        row[last[0] as usize] -= BASE_BIAS * p.weight.signum() * 2.0;
                    }
                }
            }
        }
        lm.set_logits(key, row)?;
    }
    Ok(lm)
}

fn sample_prompt(vocab: &Vocabulary, len: usize, rng: &mut StreamRng) -> Vec<TokenId> {
    let content: Vec<TokenId> = vocab.content_tokens().collect();
    std::iter::once(vocab.bos()).chain((0..len).map(|_| content[rng.gen_range(0..content.len())])).collect()
}

/// One response from `lm` at temperature 1, cut to `max_len` tokens with
/// `eos` appended when it did not finish by itself.
pub fn sample_response(
    lm: &TabularLm,
    prompt: &[TokenId],
    max_len: usize,
    rng: &mut StreamRng,
) -> Result<Vec<TokenId>> {
    let eos = lm.vocab().eos();
    let mut y = Vec::with_capacity(max_len);
    while y.len() + 1 < max_len {
        let dist = shape_distribution(lm.logits_after(prompt, &y), 1.0, None, None)?;
        let t = sample_token(&dist, rng);
        y.push(t);
        if t == eos {
            return Ok(y);
        }
    }
    y.push(eos);
    Ok(y)
}

/// Builds the base model, held-out evaluation prompts and the training
/// preference pairs. Training prompts never coincide with evaluation prompts.
pub fn build_task(spec: &SynthTaskSpec) -> Result<SynthTask> {
    let vocab = spec.validate()?;
    let base_lm = base_model(spec, &vocab)?;
    let space = (vocab.len() as f64 - 2.0).powi(spec.prompt_length as i32);
    if (spec.n_eval_prompts as f64) * 2.0 > space {
        return Err(Error::Config(format!(
            "{} evaluation prompts leave too few of the {space} possible prompts for training",
            spec.n_eval_prompts
        )));
    }

    let mut rng = rng::stream(spec.seed, &[0xE7A1]);
    let mut seen = HashSet::new();
    let mut eval_prompts = Vec::with_capacity(spec.n_eval_prompts);
    while eval_prompts.len() < spec.n_eval_prompts {
        let p = sample_prompt(&vocab, spec.prompt_length, &mut rng);
        if seen.insert(p.clone()) {
            eval_prompts.push(p);
        }
    }

    let train_pairs = (0..spec.n_train_pairs)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(spec.seed, &[0x7A12, i as u64]);
            let prompt = loop {
                let p = sample_prompt(&vocab, spec.prompt_length, &mut rng);
                if !seen.contains(&p) {
                    break p;
                }
            };
            let sampler = |x: &[TokenId], r: &mut StreamRng| sample_response(&base_lm, x, spec.response_max_len, r);
            sample_preference_pair(&spec.gold, &vocab, sampler, &prompt, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SynthTask { spec: spec.clone(), base_lm, train_pairs, eval_prompts })
}
