//! Smoothed n-gram overlap between a candidate and a reference text.

use std::collections::HashMap;

use super::LmError;

const MAX_N: usize = 4;

fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| c.is_whitespace() || matches!(c, ',' | '.' | ';' | ':' | '!' | '?' | '"'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn ngrams(toks: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// BLEU-style score in [0, 1]: geometric mean of clipped 1..4-gram
/// precisions times a brevity penalty. Orders above one use add-one
/// smoothing, so only a zero unigram overlap yields 0.
pub fn linguistic_score(candidate: &str, reference: &str) -> Result<f64, LmError> {
    let cand = tokens(candidate);
    let refr = tokens(reference);
    if cand.is_empty() || refr.is_empty() {
        return Err(LmError::EmptyText);
    }
    let mut log_sum = 0.0;
    for n in 1..=MAX_N {
        let c = ngrams(&cand, n);
        let r = ngrams(&refr, n);
        let total: usize = c.values().sum();
        let matched: usize = c.iter().map(|(g, k)| (*k).min(r.get(g).copied().unwrap_or(0))).sum();
        let p = if n == 1 {
            if matched == 0 {
                return Ok(0.0);
            }
            matched as f64 / total as f64
        } else {
            (matched + 1) as f64 / (total + 1) as f64
        };
        log_sum += p.ln();
    }
    let (c, r) = (cand.len() as f64, refr.len() as f64);
    let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    Ok((bp * (log_sum / MAX_N as f64).exp()).clamp(0.0, 1.0))
}
