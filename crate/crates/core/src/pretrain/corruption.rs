//! Document corruption: sentence shuffling followed by span infilling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, MASK};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionConfig {
    /// Fraction of document tokens covered by masked spans.
    pub span_fraction: f64,
    /// Mean of the span-length distribution.
    pub poisson_lambda: f64,
    pub shuffle_sentences: bool,
    pub rng_seed: u64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            span_fraction: 0.15,
            poisson_lambda: 3.0,
            shuffle_sentences: true,
            rng_seed: 0,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.span_fraction > 0.0 && self.span_fraction < 1.0) {
            return Err(Error::Config(format!("span_fraction {} outside (0, 1)", self.span_fraction)));
        }
        if self.poisson_lambda.is_nan() || self.poisson_lambda <= 0.0 {
            return Err(Error::Config(format!("poisson_lambda {} must be positive", self.poisson_lambda)));
        }
        Ok(())
    }
}

/// Independent stream for document `index`, so documents can be corrupted
/// in any order or in parallel with identical results.
pub fn document_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Sentences of `doc`, each ending at (and including) a full stop. A
/// trailing fragment without one is its own sentence.
pub fn split_sentences(doc: &[TokenId], full_stop: TokenId) -> Vec<&[TokenId]> {
    doc.split_inclusive(|&id| id == full_stop)
        .filter(|s| !s.is_empty())
        .collect()
}

/// Uniformly permutes sentence order.
pub fn shuffle_sentences(doc: &[TokenId], full_stop: TokenId, rng: &mut impl Rng) -> Vec<TokenId> {
    let mut sentences = split_sentences(doc, full_stop);
    sentences.shuffle(rng);
    sentences.concat()
}

/// Result of span infilling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Infilled {
    pub ids: Vec<TokenId>,
    /// Original tokens covered by spans.
    pub masked_tokens: usize,
    /// Span lengths as drawn, before clipping to the remaining budget.
    pub drawn_lengths: Vec<usize>,
}

/// Replaces random non-overlapping spans with a single `[MASK]` each until
/// `round(span_fraction · len)` original tokens are covered. Span lengths are
/// Poisson draws (zeros redrawn) clipped to the remaining budget.
pub fn infill_spans(doc: &[TokenId], cfg: &CorruptionConfig, rng: &mut impl Rng) -> Result<Infilled> {
    cfg.validate()?;
    let n = doc.len();
    let poisson = Poisson::new(cfg.poisson_lambda).map_err(|e| Error::Config(e.to_string()))?;
    let mut remaining = (cfg.span_fraction * n as f64).round() as usize;
    let mut covered = vec![false; n];
    let mut span_start = vec![false; n];
    let mut drawn_lengths = Vec::new();
    let mut masked_tokens = 0;

    while remaining > 0 {
        let drawn = loop {
            let s = poisson.sample(rng) as usize;
            if s > 0 {
                break s;
            }
        };
        drawn_lengths.push(drawn);
        let mut len = drawn.min(remaining);
        let starts = loop {
            let free: Vec<usize> = (0..=n - len)
                .filter(|&i| covered[i..i + len].iter().all(|c| !c))
                .collect();
            if !free.is_empty() || len == 1 {
                break free;
            }
            len -= 1;
        };
        if starts.is_empty() {
            break;
        }
        let start = starts[rng.random_range(0..starts.len())];
        covered[start..start + len].iter_mut().for_each(|c| *c = true);
        span_start[start] = true;
        remaining -= len;
        masked_tokens += len;
    }

    let ids = doc
        .iter()
        .enumerate()
        .filter_map(|(i, &id)| match (covered[i], span_start[i]) {
            (false, _) => Some(id),
            (true, true) => Some(MASK),
            (true, false) => None,
        })
        .collect();
    Ok(Infilled {
        ids,
        masked_tokens,
        drawn_lengths,
    })
}

/// Full corruption: optional sentence shuffle, then infilling.
pub fn corrupt(
    doc: &[TokenId],
    full_stop: Option<TokenId>,
    cfg: &CorruptionConfig,
    rng: &mut impl Rng,
) -> Result<Vec<TokenId>> {
    let shuffled = match full_stop {
        Some(stop) if cfg.shuffle_sentences => shuffle_sentences(doc, stop, rng),
        _ => doc.to_vec(),
    };
    Ok(infill_spans(&shuffled, cfg, rng)?.ids)
}
