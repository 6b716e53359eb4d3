use std::collections::HashSet;

use serde::Serialize;

use crate::tokenizer::Tokenizer;

/// Reference statistics of the 100M-pair web corpus (tokens per caption).
/// Documentation only; desk-scale corpora are not expected to match.
pub const REFERENCE_TOKENS_PER_CAPTION: (f64, f64, f64) = (22.0, 7.0, 24.0);

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CorpusStats {
    pub pair_count: usize,
    pub unique_tokens: usize,
    pub tokens_per_caption_mean: f64,
    /// Population standard deviation.
    pub tokens_per_caption_std: f64,
    pub tokens_per_caption_median: f64,
}

impl CorpusStats {
    /// Summary of per-caption token counts. Empty input gives all zeros.
    pub fn from_counts(counts: &[usize], unique_tokens: usize) -> Self {
        if counts.is_empty() {
            return Self {
                unique_tokens,
                ..Self::default()
            };
        }
        let n = counts.len() as f64;
        let mean = counts.iter().map(|&c| c as f64).sum::<f64>() / n;
        let var = counts
            .iter()
            .map(|&c| (c as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        let mut sorted = counts.to_vec();
        sorted.sort_unstable();
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 {
            sorted[mid] as f64
        } else {
            (sorted[mid - 1] + sorted[mid]) as f64 / 2.0
        };
        Self {
            pair_count: counts.len(),
            unique_tokens,
            tokens_per_caption_mean: mean,
            tokens_per_caption_std: var.sqrt(),
            tokens_per_caption_median: median,
        }
    }
}

/// Token counts exclude `[CLS]`, `[SEP]` and padding, and are taken before
/// any length truncation.
pub fn corpus_stats<'a, I>(captions: I, tokenizer: &Tokenizer) -> CorpusStats
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts = Vec::new();
    let mut seen = HashSet::new();
    for c in captions {
        let ids = tokenizer.tokenize(c);
        counts.push(ids.len());
        seen.extend(ids);
    }
    CorpusStats::from_counts(&counts, seen.len())
}
