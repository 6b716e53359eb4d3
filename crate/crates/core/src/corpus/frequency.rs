use std::collections::HashMap;

use unicode_normalization::UnicodeNormalization;

/// NFC-normalized, whitespace-trimmed caption used as the frequency key.
pub fn normalize_caption(caption: &str) -> String {
    caption.trim().nfc().collect()
}

/// Exact caption multiset counts. Merging is associative and commutative,
/// so any sharding of the input yields the same table.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CaptionCounts {
    counts: HashMap<String, u64>,
}

impl CaptionCounts {
    pub fn new() -> Self {
        Self::default()
    }

    /// Counts `caption` under its normalized key.
    pub fn add(&mut self, caption: &str) {
        self.add_key(normalize_caption(caption));
    }

    pub fn add_key(&mut self, key: String) {
        *self.counts.entry(key).or_insert(0) += 1;
    }

    pub fn get(&self, caption: &str) -> u64 {
        self.counts
            .get(&normalize_caption(caption))
            .copied()
            .unwrap_or(0)
    }

    pub fn merge(&mut self, other: CaptionCounts) {
        for (k, v) in other.counts {
            *self.counts.entry(k).or_insert(0) += v;
        }
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.counts.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Counts normalized captions over a finite stream.
pub fn frequency_pass<'a, I>(captions: I) -> CaptionCounts
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts = CaptionCounts::new();
    for c in captions {
        counts.add(c);
    }
    counts
}
