use crate::error::Result;
use crate::lm::{log_softmax, sample_token, shape_distribution, TabularLm, TokenDistribution, TokenId, TokenSequence};
use crate::rng::StreamRng;
use crate::values::{ExplicitValueFn, ImplicitValueFn};

use super::{guided_next_distribution, ForwardPassCounter, StepRecord};

/// A partial response under construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub seq: TokenSequence,
    pub per_step: Vec<StepRecord>,
    /// Last ranking score; `None` until ranked.
    pub score: Option<f64>,
    /// Evaluations spent on this candidate's lineage.
    pub lineage_counts: ForwardPassCounter,
    // realized log π*/π_ref per response position, filled by whoever evaluated it first
    implicit_cache: Vec<f64>,
}

impl Candidate {
    pub fn root(prompt: Vec<TokenId>) -> Self {
        Candidate {
            seq: TokenSequence::from_prompt(prompt),
            per_step: Vec::new(),
            score: None,
            lineage_counts: ForwardPassCounter::default(),
            implicit_cache: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.seq.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.response.is_empty()
    }

    pub fn is_finished(&self, eos: TokenId) -> bool {
        self.seq.is_finished(eos)
    }

    /// Appends `token` with its diagnostics.
    pub fn push(&mut self, record: StepRecord) {
        self.seq.response.push(record.token);
        self.per_step.push(record);
    }
}

/// A procedure that grows a candidate by up to `budget` tokens.
///
/// `slot` is the candidate's index within its extension round; samplers that
/// draw from `rng` can ignore it.
pub trait ChunkSampler: Sync {
    fn eos(&self) -> TokenId;

    fn extend(
        &self,
        cand: &mut Candidate,
        budget: usize,
        slot: usize,
        rng: &mut StreamRng,
        counts: &mut ForwardPassCounter,
    ) -> Result<()>;
}

/// Scores a (partial) sequence for ranking.
pub trait Ranker: Sync {
    fn score(&self, cand: &mut Candidate, counts: &mut ForwardPassCounter) -> f64;
}

/// Which value function, if any, reweights next-token distributions.
#[derive(Debug, Clone, Copy)]
pub enum TokenGuidance<'a> {
    None,
    Implicit(ImplicitValueFn<'a>),
    Explicit(&'a ExplicitValueFn),
}

/// Ancestral sampling from the shaped base model, optionally value-guided.
#[derive(Debug, Clone, Copy)]
pub struct GuidedPolicy<'a> {
    pub base: &'a TabularLm,
    pub guidance: TokenGuidance<'a>,
    pub beta: f64,
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub top_p: Option<f64>,
}

impl<'a> GuidedPolicy<'a> {
    pub fn new(base: &'a TabularLm, guidance: TokenGuidance<'a>, cfg: &super::GuidanceConfig) -> Self {
        GuidedPolicy {
            base,
            guidance,
            beta: cfg.beta,
            temperature: cfg.temperature,
            top_k: cfg.top_k,
            top_p: cfg.top_p,
        }
    }

    pub fn unguided(base: &'a TabularLm, cfg: &super::GuidanceConfig) -> Self {
        Self::new(base, TokenGuidance::None, cfg)
    }

    /// The shaped base distribution after `prompt ∥ prefix`, the value deltas
    /// for every candidate token (when guided) and the resulting sampling
    /// distribution.
    pub fn next_distribution(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Result<GuidedStep> {
        let base =
            shape_distribution(self.base.logits_after(prompt, prefix), self.temperature, self.top_k, self.top_p)?;
        let deltas = match self.guidance {
            TokenGuidance::None => None,
            TokenGuidance::Implicit(ivf) => Some(ivf.token_scores_after(prompt, prefix)),
            TokenGuidance::Explicit(vf) => {
                Some((0..self.base.vocab_size() as TokenId).map(|t| vf.score_extended(prompt, prefix, t)).collect())
            }
        };
        let guided = match &deltas {
            None => base.clone(),
            Some(d) => guided_next_distribution(&base, d, self.beta)?,
        };
        Ok(GuidedStep { base, deltas, guided })
    }

    /// Evaluations charged by one call to [`GuidedPolicy::next_distribution`].
    pub fn step_cost(&self) -> ForwardPassCounter {
        match self.guidance {
            TokenGuidance::None => ForwardPassCounter::new(1, 0, 0, 0),
            TokenGuidance::Implicit(_) => ForwardPassCounter::new(1, 1, 1, 0),
            TokenGuidance::Explicit(_) => ForwardPassCounter::new(1, 0, 0, self.base.vocab_size() as u64),
        }
    }

    /// Samples and appends one token.
    pub fn step(&self, cand: &mut Candidate, rng: &mut StreamRng, counts: &mut ForwardPassCounter) -> Result<TokenId> {
        let step = self.next_distribution(&cand.seq.prompt, &cand.seq.response)?;
        let token = sample_token(&step.guided, rng);
        let guidance_score = step.deltas.as_ref().map_or(0.0, |d| d[token as usize]);
        if let TokenGuidance::Implicit(_) = self.guidance {
            if cand.implicit_cache.len() == cand.seq.response.len() {
                cand.implicit_cache.push(guidance_score);
            }
        }
        cand.push(StepRecord { token, base_prob: step.base.prob(token), guidance_score });
        let spent = self.step_cost();
        cand.lineage_counts += spent;
        *counts += spent;
        Ok(token)
    }
}

/// One step of [`GuidedPolicy`].
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedStep {
    pub base: TokenDistribution,
    pub deltas: Option<Vec<f64>>,
    pub guided: TokenDistribution,
}

impl ChunkSampler for GuidedPolicy<'_> {
    fn eos(&self) -> TokenId {
        self.base.vocab().eos()
    }

    fn extend(
        &self,
        cand: &mut Candidate,
        budget: usize,
        _slot: usize,
        rng: &mut StreamRng,
        counts: &mut ForwardPassCounter,
    ) -> Result<()> {
        let eos = self.eos();
        for _ in 0..budget {
            if cand.is_finished(eos) {
                break;
            }
            self.step(cand, rng, counts)?;
        }
        Ok(())
    }
}

/// Ranks by `log π*(y≤t|x) − log π_ref(y≤t|x)`.
///
/// Realized log-ratios already evaluated by an implicit-guided policy are
/// reused; only the remaining positions cost a tuned and a reference pass.
#[derive(Debug, Clone, Copy)]
pub struct ImplicitRanker<'a>(pub ImplicitValueFn<'a>);

impl Ranker for ImplicitRanker<'_> {
    fn score(&self, cand: &mut Candidate, counts: &mut ForwardPassCounter) -> f64 {
        let mut spent = ForwardPassCounter::default();
        for t in cand.implicit_cache.len()..cand.seq.response.len() {
            let tok = cand.seq.response[t] as usize;
            let ivf = self.0;
            let tuned =
                log_softmax(ivf.tuned().logits_after(&cand.seq.prompt, &cand.seq.response[..t]), ivf.temperature());
            let reference =
                log_softmax(ivf.reference().logits_after(&cand.seq.prompt, &cand.seq.response[..t]), ivf.temperature());
            cand.implicit_cache.push(tuned[tok] - reference[tok]);
            spent.tuned += 1;
            spent.reference += 1;
        }
        cand.lineage_counts += spent;
        *counts += spent;
        cand.implicit_cache.iter().sum()
    }
}

/// Ranks by the prefix scorer `V(x, y≤t)`; one scorer call per ranking.
#[derive(Debug, Clone, Copy)]
pub struct ExplicitRanker<'a>(pub &'a ExplicitValueFn);

impl Ranker for ExplicitRanker<'_> {
    fn score(&self, cand: &mut Candidate, counts: &mut ForwardPassCounter) -> f64 {
        counts.scorer += 1;
        cand.lineage_counts.scorer += 1;
        self.0.explicit_prefix_score(&cand.seq)
    }
}

/// Any sequence-score function as a ranker (charged as one scorer call).
pub struct FnRanker<F>(pub F);

impl<F> Ranker for FnRanker<F>
where
    F: Fn(&TokenSequence) -> f64 + Sync,
{
    fn score(&self, cand: &mut Candidate, counts: &mut ForwardPassCounter) -> f64 {
        counts.scorer += 1;
        cand.lineage_counts.scorer += 1;
        (self.0)(&cand.seq)
    }
}
