//! Corpus-level BLEU on whitespace tokens.
//!
//! Modified n-gram precisions up to 4-grams, geometric mean, multiplicative
//! brevity penalty; scores are reported on the 0–100 scale.

use std::collections::HashMap;

use crate::error::{Error, Result};

fn ngram_counts(tokens: &[&str], n: usize) -> HashMap<Vec<String>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts
                .entry(w.iter().map(|s| s.to_string()).collect::<Vec<_>>())
                .or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU of hypothesis/reference sentence pairs.
pub fn corpus_bleu(hypotheses: &[String], references: &[String]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::InvalidArgument("empty BLEU corpus".into()));
    }
    const MAX_N: usize = 4;
    let mut matched = [0usize; MAX_N];
    let mut total = [0usize; MAX_N];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (h, r) in hypotheses.iter().zip(references) {
        let ht: Vec<&str> = h.split_whitespace().collect();
        let rt: Vec<&str> = r.split_whitespace().collect();
        hyp_len += ht.len();
        ref_len += rt.len();
        for n in 1..=MAX_N {
            let hc = ngram_counts(&ht, n);
            let rc = ngram_counts(&rt, n);
            for (gram, &c) in &hc {
                total[n - 1] += c;
                matched[n - 1] += c.min(rc.get(gram).copied().unwrap_or(0));
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    // geometric mean of the clipped precisions; any empty order zeroes it
    let mut log_sum = 0.0;
    for n in 0..MAX_N {
        if matched[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln() / MAX_N as f64;
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_sum.exp())
}
