//! Vocabulary, tabular order-m language models and next-token distribution
//! shaping.
//!
//! A [`TabularLm`] conditions on the last `order` tokens of the concatenated
//! prompt and response, left-padded with `bos` when fewer are available. Every
//! role in the pipeline (the steered base model, the reference model, the
//! preference-tuned model) is one of these.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Longest context a model may condition on.
pub const MAX_ORDER: usize = 8;

/// Ordered token alphabet with distinguished begin/end markers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    bos: TokenId,
    eos: TokenId,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, bos: TokenId, eos: TokenId) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::Input(format!("vocabulary needs at least 2 tokens, got {}", tokens.len())));
        }
        let v = tokens.len() as TokenId;
        if bos >= v || eos >= v {
            return Err(Error::Input(format!("bos {bos} / eos {eos} out of range for {v} tokens")));
        }
        if bos == eos {
            return Err(Error::Input("bos and eos must differ".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &tokens {
            if !seen.insert(t.as_str()) {
                return Err(Error::Input(format!("duplicate token string {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, bos, eos })
    }

    /// `<bos>`, `<eos>` followed by `t0..t{n-3}`.
    pub fn with_size(n: usize) -> Result<Self> {
        let mut tokens = vec!["<bos>".to_string(), "<eos>".to_string()];
        tokens.extend((0..n.saturating_sub(2)).map(|i| format!("t{i}")));
        Vocabulary::new(tokens, 0, 1)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos(&self) -> TokenId {
        self.bos
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.tokens.iter().position(|t| t == token).map(|i| i as TokenId)
    }

    /// Every token except `bos` and `eos`.
    pub fn content_tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.len() as TokenId).filter(move |&t| t != self.bos && t != self.eos)
    }

    pub fn contains(&self, id: TokenId) -> bool {
        (id as usize) < self.tokens.len()
    }
}

/// A prompt `x` and a (possibly partial) response `y`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
}

impl TokenSequence {
    pub fn new(prompt: Vec<TokenId>, response: Vec<TokenId>) -> Self {
        TokenSequence { prompt, response }
    }

    pub fn from_prompt(prompt: Vec<TokenId>) -> Self {
        TokenSequence { prompt, response: Vec::new() }
    }

    pub fn is_finished(&self, eos: TokenId) -> bool {
        self.response.last() == Some(&eos)
    }

    /// Checks token ranges, non-empty prompt, and that `eos` only ends the response.
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(Error::Input("prompt must be non-empty".into()));
        }
        if let Some(&t) = self.prompt.iter().chain(&self.response).find(|&&t| !vocab.contains(t)) {
            return Err(Error::Input(format!("token {t} outside vocabulary of size {}", vocab.len())));
        }
        let eos = vocab.eos();
        if let Some(pos) = self.response.iter().position(|&t| t == eos) {
            if pos + 1 != self.response.len() {
                return Err(Error::Input("eos may only appear as the final response token".into()));
            }
        }
        Ok(())
    }
}

/// Writes the order-`order` context key of `prompt ∥ prefix` into `buf` and
/// returns the used slice. Missing positions are filled with `bos`.
pub fn context_key_into<'b>(
    prompt: &[TokenId],
    prefix: &[TokenId],
    order: usize,
    bos: TokenId,
    buf: &'b mut [TokenId; MAX_ORDER],
) -> &'b [TokenId] {
    let total = prompt.len() + prefix.len();
    for (i, slot) in buf[..order].iter_mut().enumerate() {
        // position in the concatenation that lands in key slot i
        let back = order - i;
        *slot = if back > total {
            bos
        } else {
            let pos = total - back;
            if pos < prompt.len() {
                prompt[pos]
            } else {
                prefix[pos - prompt.len()]
            }
        };
    }
    &buf[..order]
}

/// Owned variant of [`context_key_into`].
pub fn context_key(prompt: &[TokenId], prefix: &[TokenId], order: usize, bos: TokenId) -> Vec<TokenId> {
    let mut buf = [0; MAX_ORDER];
    context_key_into(prompt, prefix, order, bos, &mut buf).to_vec()
}

/// Conditional next-token model stored as a table of logit rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularLm {
    vocab: Vocabulary,
    order: usize,
    default_logit: f64,
    default_row: Vec<f64>,
    table: HashMap<Vec<TokenId>, Vec<f64>>,
}

impl TabularLm {
    pub fn new(vocab: Vocabulary, order: usize, default_logit: f64) -> Result<Self> {
        if order > MAX_ORDER {
            return Err(Error::Config(format!("order {order} exceeds maximum {MAX_ORDER}")));
        }
        if !default_logit.is_finite() {
            return Err(Error::Input("default logit must be finite".into()));
        }
        let default_row = vec![default_logit; vocab.len()];
        Ok(TabularLm { vocab, order, default_logit, default_row, table: HashMap::new() })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn default_logit(&self) -> f64 {
        self.default_logit
    }

    /// Number of stored (non-default) contexts.
    pub fn num_entries(&self) -> usize {
        self.table.len()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&[TokenId], &[f64])> {
        self.table.iter().map(|(k, v)| (k.as_slice(), v.as_slice()))
    }

    pub fn set_logits(&mut self, key: Vec<TokenId>, logits: Vec<f64>) -> Result<()> {
        if key.len() != self.order {
            return Err(Error::Input(format!("context key length {} != order {}", key.len(), self.order)));
        }
        if let Some(&t) = key.iter().find(|&&t| !self.vocab.contains(t)) {
            return Err(Error::Input(format!("context token {t} outside vocabulary")));
        }
        if logits.len() != self.vocab.len() {
            return Err(Error::Input(format!("logit row has length {}, expected {}", logits.len(), self.vocab.len())));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::Input("logits must be finite".into()));
        }
        self.table.insert(key, logits);
        Ok(())
    }

    /// Mutable row for `key`, materialising the default row on first touch.
    pub(crate) fn row_mut(&mut self, key: &[TokenId]) -> &mut Vec<f64> {
        if !self.table.contains_key(key) {
            self.table.insert(key.to_vec(), self.default_row.clone());
        }
        self.table.get_mut(key).expect("row just inserted")
    }

    /// Logits stored under an exact context key (default row when unseen).
    pub fn logits_for_key(&self, key: &[TokenId]) -> &[f64] {
        self.table.get(key).map(Vec::as_slice).unwrap_or(&self.default_row)
    }

    /// Logits for the next token after `prompt ∥ prefix`.
    pub fn logits_after(&self, prompt: &[TokenId], prefix: &[TokenId]) -> &[f64] {
        let mut buf = [0; MAX_ORDER];
        let key = context_key_into(prompt, prefix, self.order, self.vocab.bos(), &mut buf);
        self.logits_for_key(key)
    }

    /// Logits for the token following the whole of `context`.
    pub fn next_token_logits(&self, context: &TokenSequence) -> &[f64] {
        self.logits_after(&context.prompt, &context.response)
    }

    pub fn key_after(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Vec<TokenId> {
        context_key(prompt, prefix, self.order, self.vocab.bos())
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
        let mut entries: Vec<LmEntry> =
            self.table.iter().map(|(k, v)| LmEntry { context: k.clone(), logits: v.clone() }).collect();
        entries.sort_by(|a, b| a.context.cmp(&b.context));
        let file = LmFile {
            version: FORMAT_VERSION,
            order: self.order,
            vocab: self.vocab.tokens.clone(),
            bos: self.vocab.bos,
            eos: self.vocab.eos,
            default_logit: self.default_logit,
            entries,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: LmFile = serde_json::from_str(text)?;
        if file.version != FORMAT_VERSION {
            return Err(Error::Input(format!("unsupported model format version {}", file.version)));
        }
        let vocab = Vocabulary::new(file.vocab, file.bos, file.eos)?;
        let mut lm = TabularLm::new(vocab, file.order, file.default_logit)?;
        for e in file.entries {
            lm.set_logits(e.context, e.logits)?;
        }
        Ok(lm)
    }
}

pub(crate) const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct LmFile {
    version: u32,
    order: usize,
    vocab: Vec<String>,
    bos: TokenId,
    eos: TokenId,
    default_logit: f64,
    entries: Vec<LmEntry>,
}

#[derive(Serialize, Deserialize)]
struct LmEntry {
    context: Vec<TokenId>,
    logits: Vec<f64>,
}

/// A probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    probs: Vec<f64>,
}

impl TokenDistribution {
    /// Validates non-negativity and unit mass (within 1e-9).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Input("distribution must be non-empty".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Input("probabilities must be finite and non-negative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Input(format!("probabilities sum to {total}, not 1")));
        }
        Ok(TokenDistribution { probs })
    }

    pub(crate) fn from_normalized(probs: Vec<f64>) -> Self {
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        TokenDistribution { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs[token as usize]
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }
}

/// `log softmax(logits / temperature)`; no truncation, so every entry is finite.
pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max) / temperature;
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature - max).collect();
    let log_z = scaled.iter().map(|s| s.exp()).sum::<f64>().ln();
    scaled.into_iter().map(|s| s - log_z).collect()
}

/// `softmax(logits / temperature)` without truncation.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max) / temperature;
    let mut out: Vec<f64> = logits.iter().map(|l| (l / temperature - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    out
}

/// Indices ordered by descending probability, ties by ascending index.
fn ranked(probs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx
}

fn renormalize(probs: &mut [f64]) {
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);
}

/// Temperature softmax followed by top-k then nucleus truncation.
///
/// Each truncation renormalizes; dropped tokens get probability exactly 0.
/// Ties at a truncation boundary keep the lower token index.
pub fn shape_distribution(
    logits: &[f64],
    temperature: f64,
    top_k: Option<usize>,
    top_p: Option<f64>,
) -> Result<TokenDistribution> {
    if logits.is_empty() {
        return Err(Error::Input("empty logit vector".into()));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::Input("logits must be finite".into()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let mut probs = softmax(logits, temperature);
    if let Some(k) = top_k {
        if k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if k < probs.len() {
            for &i in &ranked(&probs)[k..] {
                probs[i] = 0.0;
            }
            renormalize(&mut probs);
        }
    }
    if let Some(p) = top_p {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Config(format!("top_p must lie in (0, 1], got {p}")));
        }
        if p < 1.0 {
            let order = ranked(&probs);
            let mut cum = 0.0;
            let mut keep = order.len();
            for (n, &i) in order.iter().enumerate() {
                cum += probs[i];
                if cum >= p {
                    keep = n + 1;
                    break;
                }
            }
            for &i in &order[keep..] {
                probs[i] = 0.0;
            }
            renormalize(&mut probs);
        }
    }
    Ok(TokenDistribution { probs })
}

/// Inverse-CDF draw. Never returns a zero-probability token.
pub fn sample_token<R: Rng + ?Sized>(dist: &TokenDistribution, rng: &mut R) -> TokenId {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut last_live = 0;
    for (i, &p) in dist.probs.iter().enumerate() {
        if p > 0.0 {
            cum += p;
            last_live = i;
            if u < cum {
                return i as TokenId;
            }
        }
    }
    // u landed in the rounding slack above the accumulated mass
    last_live as TokenId
}

/// `log π(y | x)` under the temperature-shaped, untruncated model.
pub fn sequence_logprob(lm: &TabularLm, seq: &TokenSequence, temperature: f64) -> f64 {
    (0..seq.response.len())
        .map(|t| {
            let logits = lm.logits_after(&seq.prompt, &seq.response[..t]);
            log_softmax(logits, temperature)[seq.response[t] as usize]
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab(n: usize) -> Vocabulary {
        Vocabulary::with_size(n).unwrap()
    }

    #[test]
    fn vocabulary_rejects_bad_layouts() {
        assert!(Vocabulary::new(vec!["a".into()], 0, 0).is_err());
        assert!(Vocabulary::new(vec!["a".into(), "b".into()], 0, 0).is_err());
        assert!(Vocabulary::new(vec!["a".into(), "a".into()], 0, 1).is_err());
        assert!(Vocabulary::new(vec!["a".into(), "b".into()], 0, 2).is_err());
        let v = vocab(5);
        assert_eq!(v.content_tokens().collect::<Vec<_>>(), vec![2, 3, 4]);
        assert_eq!(v.id("t1"), Some(3));
    }

    #[test]
    fn sequence_validation() {
        let v = vocab(4);
        assert!(TokenSequence::new(vec![0, 2], vec![3, 1]).validate(&v).is_ok());
        assert!(TokenSequence::new(vec![], vec![3]).validate(&v).is_err());
        assert!(TokenSequence::new(vec![0], vec![1, 3]).validate(&v).is_err());
        assert!(TokenSequence::new(vec![0], vec![9]).validate(&v).is_err());
    }

    #[test]
    fn unseen_context_gives_default_row() {
        let lm = TabularLm::new(vocab(3), 2, 0.0).unwrap();
        assert_eq!(lm.next_token_logits(&TokenSequence::new(vec![0, 2], vec![])), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn stored_context_is_returned_verbatim() {
        let mut lm = TabularLm::new(vocab(3), 1, 0.0).unwrap();
        lm.set_logits(vec![2], vec![1.0, -1.0, 0.0]).unwrap();
        assert_eq!(lm.next_token_logits(&TokenSequence::new(vec![0, 2], vec![])), &[1.0, -1.0, 0.0]);
    }

    #[test]
    fn long_context_is_truncated_to_order() {
        let mut lm = TabularLm::new(vocab(5), 2, 0.0).unwrap();
        lm.set_logits(vec![3, 4], vec![0.5, 0.1, 0.2, 0.3, 0.4]).unwrap();
        let long = TokenSequence::new(vec![0, 2, 2, 4], vec![2, 3, 4]);
        // by hand: the last two tokens of the concatenation
        let short = TokenSequence::new(vec![3], vec![4]);
        assert_eq!(lm.next_token_logits(&long), lm.next_token_logits(&short));
        assert_eq!(lm.next_token_logits(&long), &[0.5, 0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn short_contexts_are_left_padded_with_bos() {
        assert_eq!(context_key(&[5], &[], 3, 0), vec![0, 0, 5]);
        assert_eq!(context_key(&[0, 5], &[6, 7], 3, 0), vec![5, 6, 7]);
        assert_eq!(context_key(&[0, 5], &[6, 7], 0, 0), Vec::<TokenId>::new());
    }

    #[test]
    fn set_logits_validates() {
        let mut lm = TabularLm::new(vocab(3), 1, 0.0).unwrap();
        assert!(lm.set_logits(vec![0, 1], vec![0.0; 3]).is_err());
        assert!(lm.set_logits(vec![0], vec![0.0; 2]).is_err());
        assert!(lm.set_logits(vec![0], vec![f64::NAN, 0.0, 0.0]).is_err());
        assert!(lm.set_logits(vec![7], vec![0.0; 3]).is_err());
    }

    #[test]
    fn shaping_examples() {
        let d = shape_distribution(&[0.0, 0.0], 1.0, None, None).unwrap();
        assert_eq!(d.probs(), &[0.5, 0.5]);
        let d = shape_distribution(&[2f64.ln(), 0.0, 0.0], 1.0, Some(1), None).unwrap();
        assert_eq!(d.probs(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn shaping_rejects_bad_input() {
        assert!(shape_distribution(&[f64::INFINITY, 0.0], 1.0, None, None).is_err());
        assert!(shape_distribution(&[0.0, 0.0], 0.0, None, None).is_err());
        assert!(shape_distribution(&[0.0, 0.0], -1.0, None, None).is_err());
        assert!(shape_distribution(&[0.0, 0.0], 1.0, Some(0), None).is_err());
        assert!(shape_distribution(&[0.0, 0.0], 1.0, None, Some(0.0)).is_err());
        assert!(shape_distribution(&[0.0, 0.0], 1.0, None, Some(1.5)).is_err());
    }

    #[test]
    fn degenerate_distribution_always_samples_its_atom() {
        let d = TokenDistribution::new(vec![1.0, 0.0, 0.0]).unwrap();
        for seed in 0..200 {
            assert_eq!(sample_token(&d, &mut ChaCha8Rng::seed_from_u64(seed)), 0);
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let d = TokenDistribution::new(vec![0.5, 0.5]).unwrap();
        let a = sample_token(&d, &mut ChaCha8Rng::seed_from_u64(42));
        for _ in 0..10 {
            assert_eq!(sample_token(&d, &mut ChaCha8Rng::seed_from_u64(42)), a);
        }
    }

    #[test]
    fn sampling_frequency_matches_probability() {
        let d = TokenDistribution::new(vec![0.25, 0.75]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let ones = (0..n).filter(|_| sample_token(&d, &mut rng) == 1).count();
        let freq = ones as f64 / n as f64;
        assert!((0.74..=0.76).contains(&freq), "{freq}");
    }

    #[test]
    fn logprob_examples() {
        let lm = TabularLm::new(vocab(4), 2, 0.0).unwrap();
        assert_eq!(sequence_logprob(&lm, &TokenSequence::new(vec![0], vec![]), 1.0), 0.0);
        let lp = sequence_logprob(&lm, &TokenSequence::new(vec![0], vec![2]), 1.0);
        assert!((lp - 0.25f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let mut lm = TabularLm::new(vocab(4), 2, -0.125).unwrap();
        lm.set_logits(vec![0, 2], vec![0.1, 1.0 / 3.0, -2.0f64.sqrt(), 1e-300]).unwrap();
        lm.set_logits(vec![3, 3], vec![std::f64::consts::PI, 0.0, -7.5e12, 5e-324]).unwrap();
        let back = TabularLm::from_json(&lm.to_json().unwrap()).unwrap();
        assert_eq!(back, lm);
        for (k, row) in lm.entries() {
            let other = back.logits_for_key(k);
            assert!(row.iter().zip(other).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
