//! Corpus-level text generation metrics: BLEU-1..4, ROUGE-L, CIDEr and EM@1.
//!
//! Variants:
//! - BLEU pools clipped n-gram counts over the corpus, uses the closest
//!   reference length (shorter on ties) for the brevity penalty, and replaces
//!   a zero precision `p_k` by `1 / (2 · hypothesis n-gram count of order k)`.
//! - ROUGE-L is the LCS F-measure with `β² = 1.2`, best reference per pair,
//!   averaged over pairs.
//! - CIDEr (no length penalty, no clipping) uses raw n-gram counts weighted by
//!   `ln(N / max(1, df))` where `df` counts pairs whose pooled references
//!   contain the n-gram; the hypothesis is compared with the mean reference
//!   vector by cosine, averaged over n = 1..4, times 10.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::text::tokenize;

pub const ROUGE_BETA_SQ: f64 = 1.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub id: String,
    pub hypothesis: String,
    pub references: Vec<String>,
}

impl EvalPair {
    pub fn new(id: impl Into<String>, hypothesis: impl Into<String>, references: Vec<String>) -> Self {
        Self {
            id: id.into(),
            hypothesis: hypothesis.into(),
            references,
        }
    }
}

struct Tokenized {
    hyp: Vec<String>,
    refs: Vec<Vec<String>>,
}

fn tokenized(pairs: &[EvalPair]) -> Vec<Tokenized> {
    pairs
        .iter()
        .map(|p| Tokenized {
            hyp: tokenize(&p.hypothesis),
            refs: p.references.iter().map(|r| tokenize(r)).collect(),
        })
        .collect()
}

pub fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BleuScore {
    /// Percentage in [0, 100].
    pub score: f64,
    /// The hypothesis corpus had no tokens; the score is defined as 0.
    pub empty_corpus: bool,
}

/// Corpus BLEU-n as a percentage.
pub fn bleu(pairs: &[EvalPair], n: usize) -> BleuScore {
    assert!((1..=4).contains(&n), "BLEU order must be 1..=4");
    let data = tokenized(pairs);
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for d in &data {
        hyp_len += d.hyp.len();
        let c = d.hyp.len() as i64;
        ref_len += d
            .refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| ((l as i64 - c).abs(), l))
            .unwrap_or(0);
        for k in 1..=n {
            let h = ngram_counts(&d.hyp, k);
            let ref_counts: Vec<_> = d.refs.iter().map(|r| ngram_counts(r, k)).collect();
            for (g, cnt) in &h {
                let max_ref = ref_counts.iter().map(|rc| rc.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
                matched[k - 1] += (*cnt).min(max_ref);
                total[k - 1] += cnt;
            }
        }
    }
    if hyp_len == 0 {
        return BleuScore {
            score: 0.0,
            empty_corpus: true,
        };
    }
    let log_p: f64 = (0..n)
        .map(|k| {
            let p = if matched[k] == 0 {
                1.0 / (2.0 * total[k].max(1) as f64)
            } else {
                matched[k] as f64 / total[k] as f64
            };
            p.ln()
        })
        .sum::<f64>()
        / n as f64;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    BleuScore {
        score: 100.0 * bp * log_p.exp(),
        empty_corpus: false,
    }
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_pair(hyp: &[String], refs: &[Vec<String>]) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    refs.iter()
        .map(|r| {
            let l = lcs_len(hyp, r);
            if l == 0 {
                return 0.0;
            }
            let p = l as f64 / hyp.len() as f64;
            let rc = l as f64 / r.len() as f64;
            (1.0 + ROUGE_BETA_SQ) * p * rc / (rc + ROUGE_BETA_SQ * p)
        })
        .fold(0.0, f64::max)
}

/// Per-pair ROUGE-L F-measures in [0, 1].
pub fn rouge_l_per_pair(pairs: &[EvalPair]) -> Vec<f64> {
    tokenized(pairs).iter().map(|d| rouge_pair(&d.hyp, &d.refs)).collect()
}

/// Mean ROUGE-L as a percentage.
pub fn rouge_l(pairs: &[EvalPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    100.0 * rouge_l_per_pair(pairs).iter().sum::<f64>() / pairs.len() as f64
}

type Vector = HashMap<Vec<String>, f64>;

fn cosine(a: &Vector, b: &Vector) -> f64 {
    let na: f64 = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().map(|(k, v)| v * b.get(k).copied().unwrap_or(0.0)).sum();
    dot / (na * nb)
}

/// Per-pair CIDEr on the ×10 scale (so in [0, 10]).
pub fn cider_per_pair(pairs: &[EvalPair]) -> Vec<f64> {
    let data = tokenized(pairs);
    let n_docs = data.len() as f64;
    let mut scores = vec![0.0; data.len()];
    for n in 1..=4 {
        let mut df: HashMap<&[String], usize> = HashMap::new();
        for d in &data {
            let mut seen: Vec<&[String]> = d.refs.iter().flat_map(|r| ngram_counts(r, n).into_keys()).collect();
            seen.sort();
            seen.dedup();
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let idf = |g: &[String]| (n_docs / df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
        for (i, d) in data.iter().enumerate() {
            let hyp: Vector = ngram_counts(&d.hyp, n)
                .into_iter()
                .map(|(g, c)| (g.to_vec(), c as f64 * idf(g)))
                .collect();
            let mut mean_ref: Vector = HashMap::new();
            for r in &d.refs {
                for (g, c) in ngram_counts(r, n) {
                    *mean_ref.entry(g.to_vec()).or_insert(0.0) += c as f64 * idf(g) / d.refs.len() as f64;
                }
            }
            scores[i] += cosine(&hyp, &mean_ref) / 4.0;
        }
    }
    scores.iter().map(|s| s * 10.0).collect()
}

/// Corpus CIDEr: mean of per-pair scores on the ×10 scale.
pub fn cider(pairs: &[EvalPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    cider_per_pair(pairs).iter().sum::<f64>() / pairs.len() as f64
}

/// Lowercase, collapse whitespace and strip trailing punctuation.
pub fn normalize_answer(s: &str) -> String {
    let collapsed = s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string()
}

pub fn exact_match(hyp: &str, references: &[String]) -> bool {
    let h = normalize_answer(hyp);
    references.iter().any(|r| normalize_answer(r) == h)
}

/// EM@1 as a percentage.
pub fn em_at_1(pairs: &[EvalPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let hits = pairs.iter().filter(|p| exact_match(&p.hypothesis, &p.references)).count();
    100.0 * hits as f64 / pairs.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub rouge_l: f64,
    pub cider: f64,
    pub exact_match: bool,
}

/// Corpus scores as percentages; CIDEr is the ×10 score times 100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pairs: usize,
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub cider: f64,
    pub em_at_1: f64,
    pub empty_corpus: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub samples: Vec<SampleScore>,
}

impl MetricReport {
    pub fn compute(pairs: &[EvalPair]) -> Self {
        let rouge = rouge_l_per_pair(pairs);
        let cid = cider_per_pair(pairs);
        let samples = pairs
            .iter()
            .zip(rouge.iter().zip(&cid))
            .map(|(p, (r, c))| SampleScore {
                id: p.id.clone(),
                rouge_l: 100.0 * r,
                cider: 100.0 * c,
                exact_match: exact_match(&p.hypothesis, &p.references),
            })
            .collect();
        let b1 = bleu(pairs, 1);
        Self {
            pairs: pairs.len(),
            bleu: [b1.score, bleu(pairs, 2).score, bleu(pairs, 3).score, bleu(pairs, 4).score],
            rouge_l: rouge_l(pairs),
            cider: 100.0 * cider(pairs),
            em_at_1: em_at_1(pairs),
            empty_corpus: b1.empty_corpus,
            samples,
        }
    }

    pub fn header() -> String {
        format!(
            "{:<16} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
            "split", "BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "METEOR", "ROUGE-L", "CIDEr", "EM@1"
        )
    }

    /// One table row; METEOR is not computed and printed as `n/a`.
    pub fn row(&self, label: &str) -> String {
        format!(
            "{:<16} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7} {:>7.2} {:>7.2} {:>7.2}",
            label, self.bleu[0], self.bleu[1], self.bleu[2], self.bleu[3], "n/a", self.rouge_l, self.cider, self.em_at_1
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(h: &str, refs: &[&str]) -> EvalPair {
        EvalPair::new("x", h, refs.iter().map(|s| s.to_string()).collect())
    }

    #[test]
    fn bleu_hand_example() {
        let s = bleu(&[pair("the cat", &["the cat on the mat"])], 1).score;
        assert!((s - 100.0 * (-1.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let same = [pair("a red chair by the lamp", &["a red chair by the lamp"])];
        for n in 1..=4 {
            assert!((bleu(&same, n).score - 100.0).abs() < 1e-9);
        }
        // no overlap: only the smoothing floor 1/(2·4) remains
        let disjoint = [pair("x y z w", &["a b c d"])];
        assert!((bleu(&disjoint, 1).score - 12.5).abs() < 1e-12);
        assert!(bleu(&[pair("", &["a"])], 1).empty_corpus);
    }

    #[test]
    fn rouge_hand_example() {
        let r = rouge_l(&[pair("a b c", &["a c"])]);
        assert!((r - 100.0 * 2.2 * (2.0 / 3.0) / (1.0 + 1.2 * 2.0 / 3.0)).abs() < 1e-12);
        assert!((r - 81.48).abs() < 0.01);
        assert_eq!(rouge_l(&[pair("", &["a"])]), 0.0);
    }

    #[test]
    fn cider_single_pair_is_zero() {
        assert_eq!(cider(&[pair("a b c d", &["a b c d"])]), 0.0);
    }

    #[test]
    fn cider_identical_disjoint_pair_scores_ten() {
        let s = cider_per_pair(&[pair("a b c d e", &["a b c d e"]), pair("v w x y z", &["p q r s t"])]);
        assert!((s[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn em_normalization() {
        assert!(exact_match("The Chair.", &["the chair".into()]));
        assert!(exact_match("two", &["three".into(), "Two".into()]));
        assert!(!exact_match("a chair", &["the chair".into()]));
    }

    #[test]
    fn report_row_marks_meteor_unavailable() {
        let r = MetricReport::compute(&[pair("yes", &["yes"])]);
        assert!(r.row("test").contains("n/a"));
        assert_eq!(r.em_at_1, 100.0);
        assert_eq!(r.bleu[0], 100.0);
    }
}
