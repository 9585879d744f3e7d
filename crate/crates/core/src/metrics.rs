//! Reference text-generation metrics over token sequences.
//!
//! METEOR here is the simplified harmonic-mean core only (exact unigram
//! matches, no stemming or synonymy) and is not comparable to official tooling.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(hits: usize, hyp_total: usize, ref_total: usize) -> Prf {
        if hits == 0 || hyp_total == 0 || ref_total == 0 {
            return Prf::default();
        }
        let precision = hits as f64 / hyp_total as f64;
        let recall = hits as f64 / ref_total as f64;
        Prf {
            precision,
            recall,
            f1: 2.0 * precision * recall / (precision + recall),
        }
    }
}

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Overlap of `hyp`'s n-gram counts clipped by `reference`'s.
fn clipped_overlap<T: Hash + Eq>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let hits = h.iter().map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0))).sum();
    (hits, hyp.len().saturating_sub(n - 1))
}

pub fn rouge_n<T: Hash + Eq>(hyp: &[T], reference: &[T], n: usize) -> Prf {
    assert!(n >= 1, "n-gram order must be positive");
    let (hits, hyp_total) = clipped_overlap(hyp, reference, n);
    Prf::from_counts(hits, hyp_total, reference.len().saturating_sub(n - 1))
}

/// Longest common subsequence length.
pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: Eq>(hyp: &[T], reference: &[T]) -> Prf {
    Prf::from_counts(lcs_len(hyp, reference), hyp.len(), reference.len())
}

/// Clipped modified precisions for orders `1..=n`, unsmoothed.
pub fn modified_precisions<T: Hash + Eq>(hyp: &[T], reference: &[T], n: usize) -> Vec<f64> {
    (1..=n)
        .map(|k| {
            let (hits, total) = clipped_overlap(hyp, reference, k);
            if total == 0 {
                0.0
            } else {
                hits as f64 / total as f64
            }
        })
        .collect()
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

/// Sentence BLEU; zero precisions are floored at `1 / (2·|hyp|)`.
pub fn bleu_n<T: Hash + Eq>(hyp: &[T], reference: &[T], n: usize) -> f64 {
    assert!(n >= 1, "n-gram order must be positive");
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let floor = 1.0 / (2.0 * hyp.len() as f64);
    let log_mean = modified_precisions(hyp, reference, n)
        .into_iter()
        .map(|p| if p > 0.0 { p } else { floor }.ln())
        .sum::<f64>()
        / n as f64;
    brevity_penalty(hyp.len(), reference.len()) * log_mean.exp()
}

/// Corpus BLEU: clipped counts and lengths are summed over all pairs before
/// the geometric mean. Unsmoothed.
pub fn corpus_bleu<T: Hash + Eq>(pairs: &[(&[T], &[T])], n: usize) -> f64 {
    assert!(n >= 1, "n-gram order must be positive");
    let mut hits = vec![0usize; n];
    let mut totals = vec![0usize; n];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (hyp, reference) in pairs {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for k in 1..=n {
            let (h, t) = clipped_overlap(hyp, reference, k);
            hits[k - 1] += h;
            totals[k - 1] += t;
        }
    }
    if hyp_len == 0 || hits.iter().zip(&totals).any(|(&h, &t)| h == 0 || t == 0) {
        return 0.0;
    }
    let log_mean = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| (h as f64 / t as f64).ln())
        .sum::<f64>()
        / n as f64;
    brevity_penalty(hyp_len, ref_len) * log_mean.exp()
}

const METEOR_ALPHA: f64 = 0.1;

/// Simplified METEOR: greedy leftmost exact alignment, recall-weighted
/// harmonic mean, and a fragmentation penalty `0.5·(chunks/matches)³`.
pub fn meteor_simplified<T: Eq>(hyp: &[T], reference: &[T]) -> f64 {
    let mut used = vec![false; reference.len()];
    // aligned reference position for each matched hypothesis token, in order
    let mut alignment = Vec::new();
    for h in hyp {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && reference[j] == *h) {
            used[j] = true;
            alignment.push(j);
        } else {
            alignment.push(usize::MAX);
        }
    }
    let matches = alignment.iter().filter(|&&j| j != usize::MAX).count();
    if matches == 0 {
        return 0.0;
    }
    let mut chunks = 0;
    let mut last: Option<usize> = None;
    for &j in &alignment {
        if j == usize::MAX {
            last = None;
            continue;
        }
        if last.is_none_or(|prev| j != prev + 1) {
            chunks += 1;
        }
        last = Some(j);
    }
    let p = matches as f64 / hyp.len() as f64;
    let r = matches as f64 / reference.len() as f64;
    let f = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = 0.5 * (chunks as f64 / matches as f64).powi(3);
    f * (1.0 - penalty)
}

/// Unique n-grams over total n-grams across the whole hypothesis corpus.
pub fn distinct_n<T: Hash + Eq, S: AsRef<[T]>>(hyps: &[S], n: usize) -> f64 {
    assert!(n >= 1, "n-gram order must be positive");
    let mut unique = HashSet::new();
    let mut total = 0;
    for h in hyps {
        let h = h.as_ref();
        if h.len() >= n {
            for w in h.windows(n) {
                unique.insert(w);
                total += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        unique.len() as f64 / total as f64
    }
}

/// Scores of one (hypothesis, reference) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub rouge_1: f64,
    pub rouge_2: f64,
    pub rouge_l: f64,
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_4: f64,
    pub meteor: f64,
    pub exact: bool,
    pub token_accuracy: f64,
}

/// Position-wise agreement over the longer of the two sequences.
pub fn token_accuracy<T: Eq>(hyp: &[T], reference: &[T]) -> f64 {
    let len = hyp.len().max(reference.len());
    if len == 0 {
        return 1.0;
    }
    hyp.iter().zip(reference).filter(|(a, b)| a == b).count() as f64 / len as f64
}

pub fn score_pair<T: Hash + Eq>(hyp: &[T], reference: &[T]) -> PairScores {
    PairScores {
        rouge_1: rouge_n(hyp, reference, 1).f1,
        rouge_2: rouge_n(hyp, reference, 2).f1,
        rouge_l: rouge_l(hyp, reference).f1,
        bleu_1: bleu_n(hyp, reference, 1),
        bleu_2: bleu_n(hyp, reference, 2),
        bleu_4: bleu_n(hyp, reference, 4),
        meteor: meteor_simplified(hyp, reference),
        exact: hyp == reference,
        token_accuracy: token_accuracy(hyp, reference),
    }
}

/// Averaged sentence scores plus corpus-level BLEU and diversity.
pub fn summarize<T: Hash + Eq>(pairs: &[(&[T], &[T])]) -> Vec<(String, f64)> {
    let scores: Vec<PairScores> = pairs.iter().map(|(h, r)| score_pair(h, r)).collect();
    let n = scores.len().max(1) as f64;
    let mean = |f: fn(&PairScores) -> f64| scores.iter().map(f).sum::<f64>() / n;
    let hyps: Vec<&[T]> = pairs.iter().map(|(h, _)| *h).collect();
    vec![
        ("rouge_1".into(), mean(|s| s.rouge_1)),
        ("rouge_2".into(), mean(|s| s.rouge_2)),
        ("rouge_l".into(), mean(|s| s.rouge_l)),
        ("bleu_1".into(), mean(|s| s.bleu_1)),
        ("bleu_2".into(), mean(|s| s.bleu_2)),
        ("bleu_4".into(), mean(|s| s.bleu_4)),
        ("corpus_bleu_4".into(), corpus_bleu(pairs, 4)),
        ("meteor".into(), mean(|s| s.meteor)),
        ("distinct_1".into(), distinct_n(&hyps, 1)),
        ("distinct_2".into(), distinct_n(&hyps, 2)),
        ("token_accuracy".into(), mean(|s| s.token_accuracy)),
        ("exact_match".into(), mean(|s| s.exact as u8 as f64)),
    ]
}
