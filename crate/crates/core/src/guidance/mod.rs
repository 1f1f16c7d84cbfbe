//! Value-guided decoding.
//!
//! Two granularities of guidance are provided and can be combined:
//!
//! * token-wise sampling reweights the base model's next-token distribution by
//!   `exp(β · Δvalue)` for every candidate token ([`guided_next_distribution`]);
//! * chunk-level beam search keeps `W` states, grows each into `K` sampled
//!   continuations of `L` tokens and keeps the `W` best by a sequence score
//!   ([`chunk_beam_search`]).
//!
//! Integrated value guidance ([`ivg_generate`]) samples chunks with the
//! implicit value function at the token level and ranks them with the explicit
//! value function at chunk boundaries.

mod policy;
mod search;

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{TokenDistribution, TokenId, TokenSequence};

pub use policy::{
    Candidate, ChunkSampler, ExplicitRanker, FnRanker, GuidedPolicy, GuidedStep, ImplicitRanker, Ranker, TokenGuidance,
};
pub use search::{best_of_n, chunk_beam_search, ivg_generate, tokenwise_generate};

/// Decoding hyper-parameters shared by every strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Guidance strength for token-wise reweighting.
    pub beta: f64,
    pub temperature: f64,
    #[serde(default)]
    pub top_k: Option<usize>,
    #[serde(default)]
    pub top_p: Option<f64>,
    #[serde(rename = "W")]
    pub beam_width: usize,
    #[serde(rename = "K")]
    pub successors: usize,
    #[serde(rename = "L")]
    pub chunk_len: usize,
    #[serde(rename = "N")]
    pub num_samples: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Prefer distinct sequences when filling the beam (duplicates only fill
    /// slots left over). Off by default.
    #[serde(default)]
    pub distinct_beams: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            beta: 1.0,
            temperature: 0.7,
            top_k: None,
            top_p: Some(1.0),
            beam_width: 4,
            successors: 4,
            chunk_len: 5,
            num_samples: 16,
            max_len: 24,
            seed: 0,
            distinct_beams: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return fail(format!("beta must be finite and non-negative, got {}", self.beta));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return fail(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.top_k == Some(0) {
            return fail("top_k must be at least 1".into());
        }
        if let Some(p) = self.top_p {
            if !(p > 0.0 && p <= 1.0) {
                return fail(format!("top_p must lie in (0, 1], got {p}"));
            }
        }
        for (name, v) in [
            ("W", self.beam_width),
            ("K", self.successors),
            ("L", self.chunk_len),
            ("N", self.num_samples),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        Ok(())
    }
}

/// Model evaluations performed while decoding.
///
/// `base`, `tuned` and `reference` count next-token distribution evaluations
/// of the respective language models; `scorer` counts prefix-scorer calls.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ForwardPassCounter {
    pub base: u64,
    pub tuned: u64,
    pub reference: u64,
    pub scorer: u64,
}

impl ForwardPassCounter {
    pub fn new(base: u64, tuned: u64, reference: u64, scorer: u64) -> Self {
        ForwardPassCounter { base, tuned, reference, scorer }
    }

    pub fn total(&self) -> u64 {
        self.base + self.tuned + self.reference + self.scorer
    }
}

impl Add for ForwardPassCounter {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        ForwardPassCounter {
            base: self.base + o.base,
            tuned: self.tuned + o.tuned,
            reference: self.reference + o.reference,
            scorer: self.scorer + o.scorer,
        }
    }
}

impl AddAssign for ForwardPassCounter {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ForwardPassCounter {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Diagnostics for one generated token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub token: TokenId,
    /// Probability of `token` under the shaped base distribution.
    pub base_prob: f64,
    /// Value delta applied to `token` (0 when unguided).
    pub guidance_score: f64,
}

/// Output of every decoding strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub seq: TokenSequence,
    pub per_step: Vec<StepRecord>,
    /// Total evaluations over the whole run, including discarded candidates.
    pub fwd_counts: ForwardPassCounter,
    /// Ranking score of the returned sequence, when it was ranked.
    pub score: Option<f64>,
    /// Tokens generated by each candidate, per extension round.
    pub extension_lengths: Vec<Vec<usize>>,
}

/// `p_i ∝ base_i · exp(β · Δ_i)`.
///
/// `β = 0` or a constant delta returns the base distribution unchanged;
/// zero-probability tokens stay at zero.
pub fn guided_next_distribution(
    base: &TokenDistribution,
    value_deltas: &[f64],
    beta: f64,
) -> Result<TokenDistribution> {
    if value_deltas.len() != base.len() {
        return Err(Error::Input(format!(
            "{} value deltas for a distribution over {} tokens",
            value_deltas.len(),
            base.len()
        )));
    }
    if value_deltas.iter().any(|d| !d.is_finite()) {
        return Err(Error::Input("value deltas must be finite".into()));
    }
    if !beta.is_finite() {
        return Err(Error::Config(format!("beta must be finite, got {beta}")));
    }
    if beta == 0.0 || value_deltas.iter().all(|&d| d == value_deltas[0]) {
        return Ok(base.clone());
    }
    let log_w: Vec<f64> = base
        .probs()
        .iter()
        .zip(value_deltas)
        .map(|(&p, &d)| if p > 0.0 { p.ln() + beta * d } else { f64::NEG_INFINITY })
        .collect();
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> =
        log_w.iter().map(|&w| if w == f64::NEG_INFINITY { 0.0 } else { (w - max).exp() }).collect();
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);
    Ok(TokenDistribution::from_normalized(probs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_beta_is_identity() {
        let base = TokenDistribution::new(vec![0.5, 0.3, 0.2]).unwrap();
        let g = guided_next_distribution(&base, &[4.0, -1.0, 9.0], 0.0).unwrap();
        assert_eq!(g, base);
    }

    #[test]
    fn constant_delta_cancels() {
        let base = TokenDistribution::new(vec![0.5, 0.3, 0.2]).unwrap();
        let g = guided_next_distribution(&base, &[2.5; 3], 1.7).unwrap();
        assert_eq!(g, base);
    }

    #[test]
    fn hand_renormalized_example() {
        let base = TokenDistribution::new(vec![0.5, 0.3, 0.2]).unwrap();
        let g = guided_next_distribution(&base, &[1.0, 0.0, -1.0], 1.0).unwrap();
        let e = 1f64.exp();
        let raw = [0.5 * e, 0.3, 0.2 / e];
        let z: f64 = raw.iter().sum();
        for (a, r) in g.probs().iter().zip(raw) {
            assert!((a - r / z).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_mass_tokens_stay_zero() {
        let base = TokenDistribution::new(vec![0.0, 0.6, 0.4]).unwrap();
        let g = guided_next_distribution(&base, &[50.0, 0.0, 0.0], 2.0).unwrap();
        assert_eq!(g.prob(0), 0.0);
    }

    #[test]
    fn rejects_non_finite_deltas() {
        let base = TokenDistribution::new(vec![0.5, 0.5]).unwrap();
        assert!(guided_next_distribution(&base, &[f64::NAN, 0.0], 1.0).is_err());
        assert!(guided_next_distribution(&base, &[0.0], 1.0).is_err());
    }

    #[test]
    fn guidance_is_monotone_in_beta() {
        let base = TokenDistribution::new(vec![0.3, 0.7]).unwrap();
        let mut last = 0.0;
        for i in 0..50 {
            let beta = i as f64 * 0.1;
            let p = guided_next_distribution(&base, &[0.8, 0.0], beta).unwrap().prob(0);
            assert!(p > last, "beta {beta}: {p} <= {last}");
            last = p;
        }
    }

    #[test]
    fn config_validation() {
        assert!(GuidanceConfig::default().validate().is_ok());
        for bad in [
            GuidanceConfig { beam_width: 0, ..Default::default() },
            GuidanceConfig { chunk_len: 0, ..Default::default() },
            GuidanceConfig { beta: f64::NAN, ..Default::default() },
            GuidanceConfig { beta: -1.0, ..Default::default() },
            GuidanceConfig { temperature: 0.0, ..Default::default() },
            GuidanceConfig { top_p: Some(0.0), ..Default::default() },
            GuidanceConfig { top_k: Some(0), ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn config_uses_letter_names_on_disk() {
        let json = serde_json::to_value(GuidanceConfig::default()).unwrap();
        for key in ["W", "K", "L", "N", "beta", "max_len"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }
}
