//! Closed-form model-evaluation counts per method.
//!
//! Every generated token costs one base evaluation, plus a tuned and a
//! reference evaluation under implicit token guidance or `V` scorer calls under
//! explicit token guidance. Every ranked candidate costs one scorer call under
//! an explicit ranker; an implicit ranker costs a tuned and a reference
//! evaluation per token it has not already seen through implicit token
//! guidance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{ForwardPassCounter, GenerationResult, GuidanceConfig};

use super::{MethodId, ValueKind};

/// Expected counts given the tokens each candidate generated in each
/// extension round (`GenerationResult::extension_lengths`).
pub fn expected_counts(method: MethodId, vocab_size: usize, extension_lengths: &[Vec<usize>]) -> ForwardPassCounter {
    let tokens: u64 = extension_lengths.iter().flatten().map(|&n| n as u64).sum();
    let ranked: u64 = extension_lengths.iter().map(|r| r.len() as u64).sum();
    let mut c = ForwardPassCounter { base: tokens, ..Default::default() };
    match method.token_vf() {
        ValueKind::None => {}
        ValueKind::Implicit => {
            c.tuned += tokens;
            c.reference += tokens;
        }
        ValueKind::Explicit => c.scorer += tokens * vocab_size as u64,
    }
    match method.chunk_vf() {
        ValueKind::None => {}
        ValueKind::Implicit if method.token_vf() != ValueKind::Implicit => {
            c.tuned += tokens;
            c.reference += tokens;
        }
        ValueKind::Implicit => {}
        ValueKind::Explicit => c.scorer += ranked,
    }
    c
}

/// Expected counts for a response of length `t` when no candidate finishes
/// early.
pub fn closed_form_counts(method: MethodId, cfg: &GuidanceConfig, vocab_size: usize, t: usize) -> ForwardPassCounter {
    let t = t as u64;
    let (width, rounds) = match method {
        MethodId::BestOfN(_) => (cfg.num_samples as u64, 1),
        MethodId::Combo { chunk: ValueKind::None, .. } => (1, 0),
        MethodId::Combo { .. } => ((cfg.beam_width * cfg.successors) as u64, t.div_ceil(cfg.chunk_len as u64)),
    };
    let tokens = width * t;
    let mut c = ForwardPassCounter { base: tokens, ..Default::default() };
    let implicit = method.token_vf() == ValueKind::Implicit || method.chunk_vf() == ValueKind::Implicit;
    if implicit {
        c.tuned = tokens;
        c.reference = tokens;
    }
    if method.token_vf() == ValueKind::Explicit {
        c.scorer += tokens * vocab_size as u64;
    }
    if method.chunk_vf() == ValueKind::Explicit {
        c.scorer += width * rounds;
    }
    c
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityCheck {
    pub expected: ForwardPassCounter,
    pub actual: ForwardPassCounter,
    pub matches: bool,
}

impl ComplexityCheck {
    /// Per-field `actual − expected`.
    pub fn deltas(&self) -> [(&'static str, i128); 4] {
        let d = |a: u64, e: u64| a as i128 - e as i128;
        [
            ("base", d(self.actual.base, self.expected.base)),
            ("tuned", d(self.actual.tuned, self.expected.tuned)),
            ("reference", d(self.actual.reference, self.expected.reference)),
            ("scorer", d(self.actual.scorer, self.expected.scorer)),
        ]
    }

    pub fn into_result(self) -> Result<Self> {
        if self.matches {
            return Ok(self);
        }
        let detail: Vec<String> =
            self.deltas().iter().filter(|(_, d)| *d != 0).map(|(n, d)| format!("{n} {d:+}")).collect();
        Err(Error::Invariant(format!("forward-pass counts off by {}", detail.join(", "))))
    }
}

/// Compares a run's counters with [`expected_counts`].
pub fn verify_complexity(method: MethodId, vocab_size: usize, result: &GenerationResult) -> ComplexityCheck {
    let expected = expected_counts(method, vocab_size, &result.extension_lengths);
    ComplexityCheck { expected, actual: result.fwd_counts, matches: expected == result.fwd_counts }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        let cfg = GuidanceConfig { beam_width: 2, successors: 2, chunk_len: 30, num_samples: 16, ..Default::default() };
        assert_eq!(closed_form_counts(MethodId::BASE, &cfg, 16, 7), ForwardPassCounter::new(7, 0, 0, 0));
        assert_eq!(closed_form_counts(MethodId::IVG, &cfg, 16, 60), ForwardPassCounter::new(240, 240, 240, 8));
        let eft_e = MethodId::combo(ValueKind::Explicit, ValueKind::None);
        assert_eq!(closed_form_counts(eft_e, &cfg, 16, 10).scorer, 160);
        let bon_e = MethodId::BestOfN(ValueKind::Explicit);
        assert_eq!(closed_form_counts(bon_e, &cfg, 16, 10), ForwardPassCounter::new(160, 0, 0, 16));
    }

    #[test]
    fn structural_form_agrees_without_early_finish() {
        let cfg = GuidanceConfig { beam_width: 3, successors: 2, chunk_len: 4, ..Default::default() };
        // 10 tokens: round 0 grows 6 candidates by 4, then 3 beams x 2 by 4, then by 2
        let lengths = vec![vec![4; 6], vec![4; 6], vec![2; 6]];
        for m in [MethodId::IVG, MethodId::combo(ValueKind::None, ValueKind::Implicit)] {
            assert_eq!(expected_counts(m, 16, &lengths), closed_form_counts(m, &cfg, 16, 10));
        }
    }

    #[test]
    fn mismatch_names_the_fields() {
        let check = ComplexityCheck {
            expected: ForwardPassCounter::new(4, 0, 0, 0),
            actual: ForwardPassCounter::new(5, 0, 0, 1),
            matches: false,
        };
        let msg = check.into_result().unwrap_err().to_string();
        assert!(msg.contains("base +1") && msg.contains("scorer +1"), "{msg}");
    }
}
