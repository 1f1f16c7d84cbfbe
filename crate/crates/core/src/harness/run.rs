use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{
    best_of_n, chunk_beam_search, tokenwise_generate, Candidate, ExplicitRanker, ForwardPassCounter, GenerationResult,
    GuidanceConfig, GuidedPolicy, ImplicitRanker, Ranker, TokenGuidance,
};
use crate::lm::{TabularLm, TokenId};
use crate::rng::derive_seed;
use crate::synth::{GoldRewardModel, SynthTask};
use crate::values::{ExplicitValueFn, ImplicitValueFn};

use super::complexity::verify_complexity;
use super::{MethodId, ValueKind};

/// The guidance stack: the model being decoded plus whichever value functions
/// are available.
#[derive(Debug, Clone)]
pub struct ModelSet {
    pub base: TabularLm,
    pub tuned: Option<TabularLm>,
    pub reference: Option<TabularLm>,
    pub explicit: Option<ExplicitValueFn>,
}

impl ModelSet {
    pub fn implicit(&self, temperature: f64) -> Result<ImplicitValueFn<'_>> {
        let tuned = self.tuned.as_ref().ok_or_else(|| Error::MissingArtifact("tuned model (DPO output)".into()))?;
        let reference =
            self.reference.as_ref().ok_or_else(|| Error::MissingArtifact("reference model (SFT output)".into()))?;
        if tuned.vocab() != self.base.vocab() {
            return Err(Error::Input("tuned model and base model use different vocabularies".into()));
        }
        ImplicitValueFn::new(tuned, reference, temperature)
    }

    pub fn explicit(&self) -> Result<&ExplicitValueFn> {
        self.explicit.as_ref().ok_or_else(|| Error::MissingArtifact("explicit value function (FUDGE output)".into()))
    }

    fn token_guidance(&self, kind: ValueKind, cfg: &GuidanceConfig) -> Result<TokenGuidance<'_>> {
        Ok(match kind {
            ValueKind::None => TokenGuidance::None,
            ValueKind::Implicit => TokenGuidance::Implicit(self.implicit(cfg.temperature)?),
            ValueKind::Explicit => TokenGuidance::Explicit(self.explicit()?),
        })
    }

    fn ranker(&self, kind: ValueKind, cfg: &GuidanceConfig) -> Result<SeqRanker<'_>> {
        Ok(match kind {
            ValueKind::Implicit => SeqRanker::Implicit(ImplicitRanker(self.implicit(cfg.temperature)?)),
            ValueKind::Explicit => SeqRanker::Explicit(ExplicitRanker(self.explicit()?)),
            ValueKind::None => return Err(Error::Config("no ranker for value function none".into())),
        })
    }
}

enum SeqRanker<'a> {
    Implicit(ImplicitRanker<'a>),
    Explicit(ExplicitRanker<'a>),
}

impl Ranker for SeqRanker<'_> {
    fn score(&self, cand: &mut Candidate, counts: &mut ForwardPassCounter) -> f64 {
        match self {
            SeqRanker::Implicit(r) => r.score(cand, counts),
            SeqRanker::Explicit(r) => r.score(cand, counts),
        }
    }
}

/// Decodes one response with `method`.
pub fn generate(
    method: MethodId,
    models: &ModelSet,
    prompt: &[TokenId],
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<GenerationResult> {
    match method {
        MethodId::BestOfN(kind) => {
            let sampler = GuidedPolicy::unguided(&models.base, cfg);
            best_of_n(&sampler, &models.ranker(kind, cfg)?, prompt, cfg, seed)
        }
        MethodId::Combo { token, chunk: ValueKind::None } => {
            tokenwise_generate(&models.base, models.token_guidance(token, cfg)?, prompt, cfg, seed)
        }
        MethodId::Combo { token, chunk } => {
            let sampler = GuidedPolicy::new(&models.base, models.token_guidance(token, cfg)?, cfg);
            chunk_beam_search(&sampler, &models.ranker(chunk, cfg)?, prompt, cfg, seed)
        }
    }
}

/// Held-out prompts and the reward that scores their responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub gold: GoldRewardModel,
    pub prompts: Vec<Vec<TokenId>>,
}

impl From<&SynthTask> for EvalSet {
    fn from(task: &SynthTask) -> Self {
        EvalSet { gold: task.spec.gold.clone(), prompts: task.eval_prompts.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub method: MethodId,
    pub token_vf: ValueKind,
    pub chunk_vf: ValueKind,
    pub beta: f64,
    pub config: GuidanceConfig,
    pub seeds: Vec<u64>,
    /// Mean gold reward over the prompts, one entry per seed.
    pub per_seed: Vec<f64>,
    pub mean_gold: f64,
    /// Standard error of `mean_gold` across seeds.
    pub std_err: f64,
    pub fwd_totals: ForwardPassCounter,
    pub tokens_generated: u64,
    pub wall_time_s: f64,
}

fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// One response per prompt per seed, scored by the gold reward.
///
/// Prompt `i` under seed `s` decodes with seed `derive_seed(s, [i])`, so the
/// outcome does not depend on how prompts are spread over threads. Every
/// response's counters are checked against the closed-form accounting.
pub fn run_method(
    method: MethodId,
    eval: &EvalSet,
    models: &ModelSet,
    cfg: &GuidanceConfig,
    seeds: &[u64],
) -> Result<ExperimentReport> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    if eval.prompts.is_empty() {
        return Err(Error::EmptyDataset("evaluation prompts"));
    }
    // surface a missing artifact before any work
    models.token_guidance(method.token_vf(), cfg)?;
    if method.chunk_vf() != ValueKind::None {
        models.ranker(method.chunk_vf(), cfg)?;
    }
    let start = Instant::now();
    let eos = models.base.vocab().eos();
    let v = models.base.vocab_size();
    let mut per_seed = Vec::with_capacity(seeds.len());
    let mut fwd_totals = ForwardPassCounter::default();
    let mut tokens_generated = 0;
    for &s in seeds {
        let results: Vec<(f64, ForwardPassCounter, u64)> = eval
            .prompts
            .par_iter()
            .enumerate()
            .map(|(i, prompt)| {
                let r = generate(method, models, prompt, cfg, derive_seed(s, &[i as u64]))?;
                verify_complexity(method, v, &r).into_result()?;
                Ok((eval.gold.reward(&r.seq.response, eos), r.fwd_counts, r.seq.response.len() as u64))
            })
            .collect::<Result<_>>()?;
        per_seed.push(results.iter().map(|r| r.0).sum::<f64>() / results.len() as f64);
        fwd_totals += results.iter().map(|r| r.1).sum();
        tokens_generated += results.iter().map(|r| r.2).sum::<u64>();
    }
    let (mean_gold, std_err) = mean_and_stderr(&per_seed);
    Ok(ExperimentReport {
        method,
        token_vf: method.token_vf(),
        chunk_vf: method.chunk_vf(),
        beta: cfg.beta,
        config: cfg.clone(),
        seeds: seeds.to_vec(),
        per_seed,
        mean_gold,
        std_err,
        fwd_totals,
        tokens_generated,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// The guidance strengths swept for token-guided methods.
pub const BETA_GRID: [f64; 4] = [0.25, 0.5, 1.0, 2.0];

/// [`run_method`] at every β in `betas`, keeping the best mean gold reward
/// (the earliest β on ties). Methods without token guidance run once at
/// `cfg.beta`.
pub fn run_best_beta(
    method: MethodId,
    eval: &EvalSet,
    models: &ModelSet,
    cfg: &GuidanceConfig,
    seeds: &[u64],
    betas: &[f64],
) -> Result<ExperimentReport> {
    if !method.uses_beta() || betas.is_empty() {
        return run_method(method, eval, models, cfg, seeds);
    }
    let mut best: Option<ExperimentReport> = None;
    for &beta in betas {
        let r = run_method(method, eval, models, &GuidanceConfig { beta, ..cfg.clone() }, seeds)?;
        if best.as_ref().is_none_or(|b| r.mean_gold > b.mean_gold) {
            best = Some(r);
        }
    }
    Ok(best.expect("non-empty beta grid"))
}

/// The 3×3 grid of token-level × chunk-level value functions; `cells[t][c]`
/// indexes [`ValueKind::ALL`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub cells: Vec<Vec<ExperimentReport>>,
}

impl Grid {
    pub fn cell(&self, token: ValueKind, chunk: ValueKind) -> &ExperimentReport {
        let at = |k| ValueKind::ALL.iter().position(|&x| x == k).expect("kind");
        &self.cells[at(token)][at(chunk)]
    }

    /// Mean-reward gain of a cell over the unguided cell.
    pub fn gain(&self, token: ValueKind, chunk: ValueKind) -> f64 {
        self.cell(token, chunk).mean_gold - self.cell(ValueKind::None, ValueKind::None).mean_gold
    }

    pub fn reports(&self) -> impl Iterator<Item = &ExperimentReport> {
        self.cells.iter().flatten()
    }

    pub fn total_counts(&self) -> ForwardPassCounter {
        self.reports().map(|r| r.fwd_totals).sum()
    }
}

pub fn run_grid(eval: &EvalSet, models: &ModelSet, cfg: &GuidanceConfig, seeds: &[u64], betas: &[f64]) -> Result<Grid> {
    let cells = ValueKind::ALL
        .iter()
        .map(|&t| {
            ValueKind::ALL
                .iter()
                .map(|&c| run_best_beta(MethodId::combo(t, c), eval, models, cfg, seeds, betas))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Grid { cells })
}

/// Every named method once under one seed, for a per-method cost profile.
pub fn speed_profile(
    eval: &EvalSet,
    models: &ModelSet,
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<Vec<ExperimentReport>> {
    MethodId::named().iter().map(|&m| run_method(m, eval, models, cfg, &[seed])).collect()
}
