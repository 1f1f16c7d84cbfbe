//! Value functions over response prefixes.
//!
//! The implicit form reads a value off the log-probability ratio between a
//! preference-tuned model and its reference; it is only defined up to a
//! per-prompt constant, which every consumer (renormalized sampling, ranking
//! candidates that share a prompt) is invariant to, so that constant is never
//! materialised. The explicit form is a directly trained prefix scorer.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{context_key_into, log_softmax, sequence_logprob, TabularLm, TokenId, TokenSequence, MAX_ORDER};

/// `log π*(·) − log π_ref(·)` as a value function.
#[derive(Debug, Clone, Copy)]
pub struct ImplicitValueFn<'a> {
    tuned: &'a TabularLm,
    reference: &'a TabularLm,
    temperature: f64,
}

impl<'a> ImplicitValueFn<'a> {
    pub fn new(tuned: &'a TabularLm, reference: &'a TabularLm, temperature: f64) -> Result<Self> {
        if tuned.vocab() != reference.vocab() {
            return Err(Error::Input("tuned and reference models use different vocabularies".into()));
        }
        if tuned.order() != reference.order() {
            return Err(Error::Input(format!(
                "tuned order {} differs from reference order {}",
                tuned.order(),
                reference.order()
            )));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        Ok(ImplicitValueFn { tuned, reference, temperature })
    }

    pub fn tuned(&self) -> &'a TabularLm {
        self.tuned
    }

    pub fn reference(&self) -> &'a TabularLm {
        self.reference
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Per-token log-ratio for the next position after `prompt ∥ prefix`.
    pub fn token_scores_after(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Vec<f64> {
        let tuned = log_softmax(self.tuned.logits_after(prompt, prefix), self.temperature);
        let reference = log_softmax(self.reference.logits_after(prompt, prefix), self.temperature);
        tuned.iter().zip(&reference).map(|(a, b)| a - b).collect()
    }

    pub fn implicit_token_scores(&self, context: &TokenSequence) -> Vec<f64> {
        self.token_scores_after(&context.prompt, &context.response)
    }

    /// `log π*(y | x) − log π_ref(y | x)` over the whole response.
    pub fn implicit_sequence_score(&self, seq: &TokenSequence) -> f64 {
        sequence_logprob(self.tuned, seq, self.temperature) - sequence_logprob(self.reference, seq, self.temperature)
    }
}

/// Tabular prefix scorer `V(x, y≤t)` keyed like a [`TabularLm`] context.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitValueFn {
    order: usize,
    bos: TokenId,
    default_value: f64,
    table: HashMap<Vec<TokenId>, f64>,
}

impl ExplicitValueFn {
    pub fn new(order: usize, bos: TokenId, default_value: f64) -> Result<Self> {
        if order > MAX_ORDER {
            return Err(Error::Config(format!("order {order} exceeds maximum {MAX_ORDER}")));
        }
        if !default_value.is_finite() {
            return Err(Error::Input("default value must be finite".into()));
        }
        Ok(ExplicitValueFn { order, bos, default_value, table: HashMap::new() })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn bos(&self) -> TokenId {
        self.bos
    }

    pub fn default_value(&self) -> f64 {
        self.default_value
    }

    pub fn num_entries(&self) -> usize {
        self.table.len()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&[TokenId], f64)> {
        self.table.iter().map(|(k, v)| (k.as_slice(), *v))
    }

    pub fn set_value(&mut self, key: Vec<TokenId>, value: f64) -> Result<()> {
        if key.len() != self.order {
            return Err(Error::Input(format!("key length {} != order {}", key.len(), self.order)));
        }
        if !value.is_finite() {
            return Err(Error::Input("values must be finite".into()));
        }
        self.table.insert(key, value);
        Ok(())
    }

    pub(crate) fn value_mut(&mut self, key: &[TokenId]) -> &mut f64 {
        if !self.table.contains_key(key) {
            self.table.insert(key.to_vec(), self.default_value);
        }
        self.table.get_mut(key).expect("entry just inserted")
    }

    pub fn key_after(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Vec<TokenId> {
        let mut buf = [0; MAX_ORDER];
        context_key_into(prompt, prefix, self.order, self.bos, &mut buf).to_vec()
    }

    pub fn value_for_key(&self, key: &[TokenId]) -> f64 {
        self.table.get(key).copied().unwrap_or(self.default_value)
    }

    /// `V(x, y≤t)` for `prompt` and the prefix `prefix`.
    pub fn score_after(&self, prompt: &[TokenId], prefix: &[TokenId]) -> f64 {
        let mut buf = [0; MAX_ORDER];
        self.value_for_key(context_key_into(prompt, prefix, self.order, self.bos, &mut buf))
    }

    /// Value of `prompt ∥ prefix ∥ token` without allocating the extension.
    pub fn score_extended(&self, prompt: &[TokenId], prefix: &[TokenId], token: TokenId) -> f64 {
        if self.order == 0 {
            return self.value_for_key(&[]);
        }
        let mut buf = [0; MAX_ORDER];
        let m = self.order;
        context_key_into(prompt, prefix, m - 1, self.bos, &mut buf);
        buf[m - 1] = token;
        self.value_for_key(&buf[..m])
    }

    pub fn explicit_prefix_score(&self, seq: &TokenSequence) -> f64 {
        self.score_after(&seq.prompt, &seq.response)
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
        let mut entries: Vec<ValueEntry> =
            self.table.iter().map(|(k, v)| ValueEntry { context: k.clone(), value: *v }).collect();
        entries.sort_by(|a, b| a.context.cmp(&b.context));
        let file = ValueFile {
            version: crate::lm::FORMAT_VERSION,
            order: self.order,
            bos: self.bos,
            default_value: self.default_value,
            entries,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ValueFile = serde_json::from_str(text)?;
        if file.version != crate::lm::FORMAT_VERSION {
            return Err(Error::Input(format!("unsupported value format version {}", file.version)));
        }
        let mut v = ExplicitValueFn::new(file.order, file.bos, file.default_value)?;
        for e in file.entries {
            v.set_value(e.context, e.value)?;
        }
        Ok(v)
    }
}

#[derive(Serialize, Deserialize)]
struct ValueFile {
    version: u32,
    order: usize,
    #[serde(default)]
    bos: TokenId,
    default_value: f64,
    entries: Vec<ValueEntry>,
}

#[derive(Serialize, Deserialize)]
struct ValueEntry {
    context: Vec<TokenId>,
    value: f64,
}
