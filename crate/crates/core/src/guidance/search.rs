use crate::error::Result;
use crate::lm::{TabularLm, TokenId};
use crate::rng::candidate_stream;
use crate::values::{ExplicitValueFn, ImplicitValueFn};

use super::policy::{Candidate, ChunkSampler, ExplicitRanker, GuidedPolicy, Ranker, TokenGuidance};
use super::{ForwardPassCounter, GenerationResult, GuidanceConfig};

fn finish(cand: Candidate, counts: ForwardPassCounter, extension_lengths: Vec<Vec<usize>>) -> GenerationResult {
    GenerationResult {
        seq: cand.seq,
        per_step: cand.per_step,
        fwd_counts: counts,
        score: cand.score,
        extension_lengths,
    }
}

/// Samples one response of at most `max_len` tokens, token by token.
///
/// Draws from candidate stream (round 0, slot 0) of `seed`.
pub fn tokenwise_generate(
    base: &TabularLm,
    guidance: TokenGuidance<'_>,
    prompt: &[TokenId],
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<GenerationResult> {
    cfg.validate()?;
    let policy = GuidedPolicy::new(base, guidance, cfg);
    let mut counts = ForwardPassCounter::default();
    let mut cand = Candidate::root(prompt.to_vec());
    policy.extend(&mut cand, cfg.max_len, 0, &mut candidate_stream(seed, 0, 0), &mut counts)?;
    let len = cand.len();
    Ok(finish(cand, counts, vec![vec![len]]))
}

/// Draws `N` complete responses and returns the best by `ranker`.
///
/// Sample `i` uses candidate stream (round 0, slot `i`); ties keep the lower
/// index.
pub fn best_of_n<S: ChunkSampler, R: Ranker>(
    sampler: &S,
    ranker: &R,
    prompt: &[TokenId],
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<GenerationResult> {
    cfg.validate()?;
    let mut counts = ForwardPassCounter::default();
    let mut best: Option<Candidate> = None;
    let mut lengths = Vec::with_capacity(cfg.num_samples);
    for i in 0..cfg.num_samples {
        let mut cand = Candidate::root(prompt.to_vec());
        sampler.extend(&mut cand, cfg.max_len, i, &mut candidate_stream(seed, 0, i), &mut counts)?;
        lengths.push(cand.len());
        let s = ranker.score(&mut cand, &mut counts);
        cand.score = Some(s);
        if best.as_ref().is_none_or(|b| s > b.score.expect("ranked")) {
            best = Some(cand);
        }
    }
    Ok(finish(best.expect("N >= 1"), counts, vec![lengths]))
}

/// Chunk-level beam search.
///
/// Round 0 grows the prompt into `W·K` candidates; every later round grows
/// each unfinished beam state into `K`. Candidates are laid out beam by beam
/// (a finished or full-length state passes through in place of its `K`
/// successors, keeping its score), ranked with `ranker` at the chunk boundary
/// and the best `W` kept, ties going to the lower position. Candidate `j` of
/// beam `w` in round `r` samples from stream (r, w·K + j). The search stops
/// once every state has emitted `eos` or reached `max_len`.
pub fn chunk_beam_search<S: ChunkSampler, R: Ranker>(
    sampler: &S,
    ranker: &R,
    prompt: &[TokenId],
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<GenerationResult> {
    cfg.validate()?;
    let eos = sampler.eos();
    let done = |c: &Candidate| c.is_finished(eos) || c.len() >= cfg.max_len;
    let (w, k) = (cfg.beam_width, cfg.successors);

    let mut counts = ForwardPassCounter::default();
    let mut beams = vec![Candidate::root(prompt.to_vec())];
    let mut extension_lengths = Vec::new();
    let mut round = 0;

    while beams.iter().any(|b| !done(b)) {
        let fanout = if round == 0 { w * k } else { k };
        let mut pool: Vec<Candidate> = Vec::with_capacity(w * k);
        let mut lengths = Vec::new();
        for (bi, beam) in beams.iter().enumerate() {
            if done(beam) {
                pool.push(beam.clone());
                continue;
            }
            let budget = cfg.chunk_len.min(cfg.max_len - beam.len());
            for j in 0..fanout {
                let slot = bi * k + j;
                let mut cand = beam.clone();
                let before = cand.len();
                sampler.extend(&mut cand, budget, slot, &mut candidate_stream(seed, round, slot), &mut counts)?;
                lengths.push(cand.len() - before);
                cand.score = Some(ranker.score(&mut cand, &mut counts));
                pool.push(cand);
            }
        }
        extension_lengths.push(lengths);
        beams = select_top(pool, w, cfg.distinct_beams);
        round += 1;
    }
    let best = beams.into_iter().next().expect("beam is never empty");
    Ok(finish(best, counts, extension_lengths))
}

/// The `width` best candidates, stable with respect to pool position.
fn select_top(pool: Vec<Candidate>, width: usize, distinct: bool) -> Vec<Candidate> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let score = |i: usize| pool[i].score.unwrap_or(f64::NEG_INFINITY);
    order.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
    let picked: Vec<usize> = if distinct {
        let mut seen = std::collections::HashSet::new();
        let (first, rest): (Vec<usize>, Vec<usize>) = order.iter().partition(|&&i| seen.insert(&pool[i].seq.response));
        first.into_iter().chain(rest).take(width).collect()
    } else {
        order.into_iter().take(width).collect()
    };
    let mut slots: Vec<Option<Candidate>> = pool.into_iter().map(Some).collect();
    picked.into_iter().map(|i| slots[i].take().expect("each index picked once")).collect()
}

/// Integrated value guidance: implicit-guided token sampling inside a chunk
/// beam search ranked by the explicit prefix scorer.
pub fn ivg_generate(
    base: &TabularLm,
    ivf: ImplicitValueFn<'_>,
    evf: &ExplicitValueFn,
    prompt: &[TokenId],
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<GenerationResult> {
    let policy = GuidedPolicy::new(base, TokenGuidance::Implicit(ivf), cfg);
    chunk_beam_search(&policy, &ExplicitRanker(evf), prompt, cfg, seed)
}
