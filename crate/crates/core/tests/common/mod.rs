#![allow(dead_code)]

use ivg::lm::{TabularLm, TokenId, Vocabulary};
use rand::Rng;

pub fn uniform_lm(v: usize, order: usize) -> TabularLm {
    TabularLm::new(Vocabulary::with_size(v).unwrap(), order, 0.0).unwrap()
}

/// Every context key of length `order` over the full vocabulary.
pub fn all_keys(v: usize, order: usize) -> Vec<Vec<TokenId>> {
    let mut keys = vec![vec![]];
    for _ in 0..order {
        keys = keys.into_iter().flat_map(|k| (0..v as TokenId).map(move |t| [k.clone(), vec![t]].concat())).collect();
    }
    keys
}

/// A model with every context row drawn uniformly from `[-spread, spread]`.
pub fn random_lm<R: Rng>(v: usize, order: usize, spread: f64, rng: &mut R) -> TabularLm {
    let mut lm = uniform_lm(v, order);
    for key in all_keys(v, order) {
        let row = (0..v).map(|_| rng.gen_range(-spread..=spread)).collect();
        lm.set_logits(key, row).unwrap();
    }
    lm
}

/// Same as [`random_lm`] but `eos` is effectively impossible.
pub fn endless_lm<R: Rng>(v: usize, order: usize, rng: &mut R) -> TabularLm {
    let eos = Vocabulary::with_size(v).unwrap().eos() as usize;
    let mut lm = uniform_lm(v, order);
    for key in all_keys(v, order) {
        let mut row: Vec<f64> = (0..v).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        row[eos] = -1e4;
        lm.set_logits(key, row).unwrap();
    }
    lm
}

pub fn random_tokens<R: Rng>(v: usize, len: usize, rng: &mut R) -> Vec<TokenId> {
    (0..len).map(|_| rng.gen_range(0..v as TokenId)).collect()
}

/// Content tokens only (no bos, no eos).
pub fn random_content<R: Rng>(v: usize, len: usize, rng: &mut R) -> Vec<TokenId> {
    (0..len).map(|_| rng.gen_range(2..v as TokenId)).collect()
}

pub mod oracle {
    //! Direct, unoptimized reimplementations used as references.

    use ivg::lm::{TabularLm, TokenId};

    pub fn softmax(logits: &[f64], t: f64) -> Vec<f64> {
        let e: Vec<f64> = logits.iter().map(|l| (l / t).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|x| x / z).collect()
    }

    /// Temperature, then top-k, then top-p, by sorting a copy.
    pub fn shape(logits: &[f64], t: f64, top_k: Option<usize>, top_p: Option<f64>) -> Vec<f64> {
        let mut p = softmax(logits, t);
        let sorted = |p: &[f64]| {
            let mut idx: Vec<usize> = (0..p.len()).collect();
            idx.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
            idx
        };
        if let Some(k) = top_k {
            let keep: Vec<usize> = sorted(&p).into_iter().take(k).collect();
            let z: f64 = keep.iter().map(|&i| p[i]).sum();
            p = (0..p.len()).map(|i| if keep.contains(&i) { p[i] / z } else { 0.0 }).collect();
        }
        if let Some(top) = top_p {
            let mut keep = Vec::new();
            let mut mass = 0.0;
            for i in sorted(&p) {
                keep.push(i);
                mass += p[i];
                if mass >= top {
                    break;
                }
            }
            let z: f64 = keep.iter().map(|&i| p[i]).sum();
            p = (0..p.len()).map(|i| if keep.contains(&i) { p[i] / z } else { 0.0 }).collect();
        }
        p
    }

    pub fn reweight(base: &[f64], deltas: &[f64], beta: f64) -> Vec<f64> {
        let w: Vec<f64> = base.iter().zip(deltas).map(|(p, d)| p * (beta * d).exp()).collect();
        let z: f64 = w.iter().sum();
        w.iter().map(|x| x / z).collect()
    }

    /// Context of `lm.order()` tokens before position `t` of `prompt ∥ response`,
    /// left-padded with bos.
    pub fn context(lm_order: usize, bos: TokenId, prompt: &[TokenId], response: &[TokenId], t: usize) -> Vec<TokenId> {
        let full: Vec<TokenId> = prompt.iter().chain(&response[..t]).copied().collect();
        let mut key = vec![bos; lm_order.saturating_sub(full.len())];
        key.extend_from_slice(&full[full.len().saturating_sub(lm_order)..]);
        key
    }

    pub fn logprob(lm: &TabularLm, prompt: &[TokenId], response: &[TokenId], t: f64) -> f64 {
        let bos = lm.vocab().bos();
        (0..response.len())
            .map(|i| {
                let key = context(lm.order(), bos, prompt, response, i);
                softmax(lm.logits_for_key(&key), t)[response[i] as usize].ln()
            })
            .sum()
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `|a − n| / max(|a|, |n|, 1e-6)`; the floor keeps rounding noise on
/// vanishing gradients from reading as a large relative error.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}
