//! Routing-behavior and corpus-conciseness analytics.
//!
//! Selection ratios count each top-k selection event once (top-2 routing
//! produces two events per routing site); a gate-weight-mass variant is
//! tallied alongside since either reading of "selected ratio" is defensible.
//! JS divergence uses the natural log, so its upper bound is ln 2.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::router::{GateDecision, Stream};
use crate::training::ParallelCorpus;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Tally {
    pub count: u64,
    pub weight_mass: f64,
}

/// Per-expert selection counts and gate-weight mass, broken down by stream
/// and head, with the raw per-token decisions optionally retained for
/// independent recounts.
#[derive(Clone, Debug, Default)]
pub struct RoutingStats {
    tallies: BTreeMap<(Stream, usize, usize), Tally>,
    total_events: u64,
    n_experts: usize,
    pub keep_decisions: bool,
    pub decisions: Vec<(Stream, usize, GateDecision)>,
}

impl RoutingStats {
    pub fn new(n_experts: usize) -> Self {
        RoutingStats {
            n_experts,
            ..Default::default()
        }
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn total_events(&self) -> u64 {
        self.total_events
    }

    pub fn is_empty(&self) -> bool {
        self.total_events == 0
    }

    pub fn record(&mut self, stream: Stream, head: usize, decision: &GateDecision) {
        for (&delta, &w) in decision.indices.iter().zip(&decision.weights) {
            let t = self.tallies.entry((stream, head, delta)).or_default();
            t.count += 1;
            t.weight_mass += w;
            self.total_events += 1;
        }
        if self.keep_decisions {
            self.decisions.push((stream, head, decision.clone()));
        }
    }

    /// Order-independent merge of two tallies.
    pub fn merge(&mut self, other: &RoutingStats) {
        assert_eq!(self.n_experts, other.n_experts);
        for (k, t) in &other.tallies {
            let e = self.tallies.entry(*k).or_default();
            e.count += t.count;
            e.weight_mass += t.weight_mass;
        }
        self.total_events += other.total_events;
        if self.keep_decisions {
            self.decisions.extend(other.decisions.iter().cloned());
        }
    }

    fn sum_where(&self, f: impl Fn(&(Stream, usize, usize)) -> bool) -> (Vec<Tally>, u64, f64) {
        let mut per_delta = vec![Tally::default(); self.n_experts];
        let mut count = 0u64;
        let mut mass = 0.0;
        for (k, t) in &self.tallies {
            if f(k) {
                per_delta[k.2].count += t.count;
                per_delta[k.2].weight_mass += t.weight_mass;
                count += t.count;
                mass += t.weight_mass;
            }
        }
        (per_delta, count, mass)
    }

    /// Aggregate selection ratios per expert (over all streams and heads).
    pub fn selection_ratios(&self) -> Vec<f64> {
        let (per_delta, count, _) = self.sum_where(|_| true);
        per_delta
            .iter()
            .map(|t| t.count as f64 / count.max(1) as f64)
            .collect()
    }

    /// Gate-weight-mass ratios per expert.
    pub fn weight_mass_ratios(&self) -> Vec<f64> {
        let (per_delta, _, mass) = self.sum_where(|_| true);
        per_delta
            .iter()
            .map(|t| t.weight_mass / mass.max(f64::MIN_POSITIVE))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scope,stream,head,delta,count,ratio,weight_mass\n");
        let emit = |scope: &str,
                        stream: &str,
                        head: &str,
                        per_delta: &[Tally],
                        total: u64,
                        out: &mut String| {
            for (delta, t) in per_delta.iter().enumerate() {
                let ratio = t.count as f64 / total.max(1) as f64;
                let _ = writeln!(
                    out,
                    "{scope},{stream},{head},{delta},{},{:.6},{:.6}",
                    t.count, ratio, t.weight_mass
                );
            }
        };
        let (agg, total, _) = self.sum_where(|_| true);
        emit("all", "*", "*", &agg, total, &mut out);
        for s in Stream::ALL {
            let (per, total, _) = self.sum_where(|k| k.0 == s);
            if total > 0 {
                emit("stream", s.label(), "*", &per, total, &mut out);
            }
        }
        let heads: Vec<usize> = {
            let mut hs: Vec<usize> = self.tallies.keys().map(|k| k.1).collect();
            hs.sort();
            hs.dedup();
            hs
        };
        for s in Stream::ALL {
            for &h in &heads {
                let (per, total, _) = self.sum_where(|k| k.0 == s && k.1 == h);
                if total > 0 {
                    emit("stream_head", s.label(), &h.to_string(), &per, total, &mut out);
                }
            }
        }
        out
    }
}

/// Selection-ratio-weighted average contextualization radius Σ_δ ratio(δ)·δ.
pub fn avg_delta(stats: &RoutingStats) -> Result<f64> {
    if stats.is_empty() {
        return Err(Error::InvalidArgument("empty routing statistics".into()));
    }
    Ok(stats
        .selection_ratios()
        .iter()
        .enumerate()
        .map(|(d, r)| d as f64 * r)
        .sum())
}

/// Gate-weight-mass variant of [`avg_delta`].
pub fn avg_delta_weighted(stats: &RoutingStats) -> Result<f64> {
    if stats.is_empty() {
        return Err(Error::InvalidArgument("empty routing statistics".into()));
    }
    Ok(stats
        .weight_mass_ratios()
        .iter()
        .enumerate()
        .map(|(d, r)| d as f64 * r)
        .sum())
}

/// Jensen-Shannon divergence with natural log; bounded by ln 2. Zero
/// entries are allowed (0·log 0 = 0).
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch(format!(
            "distributions of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    for dist in [p, q] {
        if dist.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("negative probability entry".into()));
        }
        let s: f64 = dist.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "distribution sums to {s}, not 1"
            )));
        }
    }
    let kl_to_mid = |a: &[f64]| -> f64 {
        a.iter()
            .zip(p.iter().zip(q))
            .map(|(&ai, (&pi, &qi))| {
                if ai == 0.0 {
                    0.0
                } else {
                    ai * (ai / ((pi + qi) / 2.0)).ln()
                }
            })
            .sum()
    };
    Ok(0.5 * kl_to_mid(p) + 0.5 * kl_to_mid(q))
}

/// Sentence-aligned corpus over several languages, used for conciseness
/// measurement. Loaded from TSV: a header line of language codes, then one
/// aligned sentence per column.
#[derive(Clone, Debug)]
pub struct MultiParallelCorpus {
    pub languages: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl MultiParallelCorpus {
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidArgument("empty conciseness corpus".into()))?;
        let languages: Vec<String> = header.split('\t').map(|s| s.trim().to_string()).collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<String> = line.split('\t').map(|s| s.to_string()).collect();
            if cols.len() != languages.len() {
                return Err(Error::InvalidArgument(format!(
                    "line {}: {} columns for {} languages",
                    i + 2,
                    cols.len(),
                    languages.len()
                )));
            }
            rows.push(cols);
        }
        Ok(MultiParallelCorpus { languages, rows })
    }
}

#[derive(Clone, Debug)]
pub struct ConcisenessReport {
    pub pivot: String,
    /// (language, mean UTF-8 byte length, ratio vs pivot)
    pub entries: Vec<(String, f64, f64)>,
}

impl ConcisenessReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lang,avg_bytes,ratio_vs_pivot\n");
        for (lang, avg, ratio) in &self.entries {
            let _ = writeln!(out, "{lang},{avg:.4},{ratio:.4}");
        }
        out
    }
}

/// Mean UTF-8 byte length per language over an aligned corpus, and the
/// length ratio of each language against the pivot.
pub fn conciseness_report(corpus: &MultiParallelCorpus, pivot: &str) -> Result<ConcisenessReport> {
    let pivot_idx = corpus
        .languages
        .iter()
        .position(|l| l == pivot)
        .ok_or_else(|| Error::UnknownLanguage(pivot.to_string()))?;
    if corpus.rows.is_empty() {
        return Err(Error::InvalidArgument("empty conciseness corpus".into()));
    }
    let n = corpus.rows.len() as f64;
    let means: Vec<f64> = (0..corpus.languages.len())
        .map(|i| corpus.rows.iter().map(|r| r[i].len() as f64).sum::<f64>() / n)
        .collect();
    let pivot_mean = means[pivot_idx];
    if pivot_mean <= 0.0 {
        return Err(Error::InvalidArgument("pivot has zero average length".into()));
    }
    Ok(ConcisenessReport {
        pivot: pivot.to_string(),
        entries: corpus
            .languages
            .iter()
            .zip(&means)
            .map(|(l, &m)| (l.clone(), m, m / pivot_mean))
            .collect(),
    })
}

/// Tallies every top-k selection across all tokens, heads, and streams of
/// the encoder passes over the matching corpus records. PAD positions are
/// excluded inside the model forward.
pub fn record_expert_ratios(
    model: &Model,
    corpus: &ParallelCorpus,
    direction: Option<(&str, &str)>,
    lid_override: Option<&str>,
) -> Result<RoutingStats> {
    if model.config.delta_max == 0 {
        return Err(Error::InvalidArgument(
            "model has no adaptive layer (Δ=0); nothing to record".into(),
        ));
    }
    let lid = model.lid_mode(lid_override)?;
    let mut stats = RoutingStats::new(model.config.delta_max + 1);
    stats.keep_decisions = true;
    let mut seen = 0usize;
    for rec in &corpus.records {
        if let Some((src, tgt)) = direction {
            if rec.src_lang != src || rec.tgt_lang != tgt {
                continue;
            }
        }
        let seq = crate::tokenizer::encode(&rec.src_text, &rec.src_lang, &model.vocab)?;
        model.encode_source(&seq.ids, lid, Some(&mut stats))?;
        seen += 1;
    }
    if seen == 0 {
        return Err(Error::InvalidArgument(
            "no corpus records matched the requested direction".into(),
        ));
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decision(indices: Vec<usize>, weights: Vec<f64>) -> GateDecision {
        GateDecision {
            indices,
            weights,
            margin: f64::INFINITY,
        }
    }

    #[test]
    fn avg_delta_all_zero_selections() {
        let mut s = RoutingStats::new(6);
        for _ in 0..4 {
            s.record(Stream::Q, 0, &decision(vec![0], vec![1.0]));
        }
        assert_eq!(avg_delta(&s).unwrap(), 0.0);
    }

    #[test]
    fn avg_delta_uniform_over_six_experts() {
        let mut s = RoutingStats::new(6);
        for d in 0..6 {
            s.record(Stream::K, 1, &decision(vec![d], vec![1.0]));
        }
        assert!((avg_delta(&s).unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn avg_delta_matches_direct_summation_oracle() {
        let mut s = RoutingStats::new(4);
        let events = [(0, 3u64), (1, 5), (2, 2), (3, 7)];
        for &(d, n) in &events {
            for _ in 0..n {
                s.record(Stream::V, 0, &decision(vec![d], vec![1.0]));
            }
        }
        let total: u64 = events.iter().map(|e| e.1).sum();
        let expect: f64 = events
            .iter()
            .map(|&(d, n)| d as f64 * n as f64 / total as f64)
            .sum();
        assert!((avg_delta(&s).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn avg_delta_empty_stats_errors() {
        let s = RoutingStats::new(4);
        assert!(avg_delta(&s).is_err());
    }

    #[test]
    fn js_self_divergence_is_zero() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn js_disjoint_supports_reach_ln_two() {
        let p = [1.0, 0.0];
        let q = [0.0, 1.0];
        assert!((js_divergence(&p, &q).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn js_matches_hand_computed_kl_expansion() {
        let p = [0.5, 0.5];
        let q = [0.9, 0.1];
        let m = [0.7, 0.3];
        let kl = |a: &[f64; 2]| -> f64 {
            a.iter()
                .zip(&m)
                .map(|(&ai, &mi)| if ai == 0.0 { 0.0 } else { ai * (ai / mi).ln() })
                .sum()
        };
        let expect = 0.5 * kl(&p) + 0.5 * kl(&q);
        assert!((js_divergence(&p, &q).unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn js_is_symmetric_and_bounded() {
        let p = [0.1, 0.2, 0.3, 0.4];
        let q = [0.4, 0.3, 0.2, 0.1];
        let a = js_divergence(&p, &q).unwrap();
        let b = js_divergence(&q, &p).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(a <= 2f64.ln() + 1e-12);
    }

    #[test]
    fn js_rejects_bad_distributions() {
        assert!(js_divergence(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(js_divergence(&[-0.1, 1.1], &[0.5, 0.5]).is_err());
        assert!(js_divergence(&[0.5, 0.5], &[1.0]).is_err());
    }

    #[test]
    fn ratios_normalize_per_breakdown() {
        let mut s = RoutingStats::new(3);
        s.record(Stream::Q, 0, &decision(vec![0, 1], vec![0.6, 0.4]));
        s.record(Stream::K, 1, &decision(vec![2, 1], vec![0.7, 0.3]));
        let total: f64 = s.selection_ratios().iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        let mass: f64 = s.weight_mass_ratios().iter().sum();
        assert!((mass - 1.0).abs() < 1e-9);
    }

    #[test]
    fn merge_is_order_independent() {
        let mk = |events: &[(Stream, usize, usize)]| {
            let mut s = RoutingStats::new(3);
            for &(st, h, d) in events {
                s.record(st, h, &decision(vec![d], vec![1.0]));
            }
            s
        };
        let a = mk(&[(Stream::Q, 0, 1), (Stream::K, 1, 2)]);
        let b = mk(&[(Stream::V, 0, 0), (Stream::Q, 0, 2)]);
        let mut ab = mk(&[]);
        ab.merge(&a);
        ab.merge(&b);
        let mut ba = mk(&[]);
        ba.merge(&b);
        ba.merge(&a);
        assert_eq!(ab.selection_ratios(), ba.selection_ratios());
        assert_eq!(ab.total_events(), ba.total_events());
    }

    #[test]
    fn conciseness_identical_texts_gives_unit_ratios() {
        let corpus = MultiParallelCorpus::from_tsv("en\tfr\nhello\thello\nbye\tbye\n").unwrap();
        let rep = conciseness_report(&corpus, "en").unwrap();
        for (_, _, ratio) in &rep.entries {
            assert!((ratio - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conciseness_is_order_invariant() {
        let a = MultiParallelCorpus::from_tsv("en\tzz\nab\tabcdef\nxyz\tx\n").unwrap();
        let b = MultiParallelCorpus::from_tsv("en\tzz\nxyz\tx\nab\tabcdef\n").unwrap();
        let ra = conciseness_report(&a, "en").unwrap();
        let rb = conciseness_report(&b, "en").unwrap();
        for (x, y) in ra.entries.iter().zip(&rb.entries) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn conciseness_unknown_pivot_errors() {
        let corpus = MultiParallelCorpus::from_tsv("en\tfr\na\tb\n").unwrap();
        assert!(conciseness_report(&corpus, "de").is_err());
    }

    #[test]
    fn csv_has_expected_columns() {
        let mut s = RoutingStats::new(2);
        s.record(Stream::Q, 0, &decision(vec![0, 1], vec![0.5, 0.5]));
        let csv = s.to_csv();
        assert!(csv.starts_with("scope,stream,head,delta,count,ratio,weight_mass\n"));
        assert!(csv.contains("all,*,*,0,1,"));
        assert!(csv.contains("stream,Q,*,1,1,"));
    }
}
