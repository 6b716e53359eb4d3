//! Character-grained WordPiece tokenization for Chinese captions.
//!
//! CJK ideographs are spaced apart before WordPiece runs, so every Chinese
//! character becomes its own word and (when in the vocabulary) its own token.
//! Non-CJK text goes through the usual BERT preprocessing: control-character
//! cleanup, lowercasing, accent stripping and punctuation splitting, then
//! greedy longest-match-first subword segmentation.
//!
//! Word-grained tokenization is the same pipeline with CJK spacing switched
//! off: callers pre-segment the text with spaces and supply a vocabulary
//! that contains the multi-character words.

mod vocab;

use serde::Serialize;
use unicode_normalization::UnicodeNormalization;

pub use vocab::{Vocab, CLS, CONTINUATION_PREFIX, PAD, SEP, UNK};

use crate::error::{Error, Result};

/// Words longer than this many characters map straight to `[UNK]`.
pub const MAX_WORD_CHARS: usize = 100;

pub const DEFAULT_MAX_LEN: usize = 32;

/// CJK Unified Ideographs plus Extension A.
pub fn is_cjk(c: char) -> bool {
    matches!(c as u32, 0x4E00..=0x9FFF | 0x3400..=0x4DBF)
}

pub fn count_cjk(text: &str) -> usize {
    text.chars().filter(|&c| is_cjk(c)).count()
}

/// Puts a single space between every CJK character and any adjacent
/// non-whitespace character. Existing whitespace is left alone.
pub fn cjk_space(text: &str) -> String {
    let mut out = String::with_capacity(text.len() * 2);
    let mut prev: Option<char> = None;
    for c in text.chars() {
        if let Some(p) = prev {
            if (is_cjk(p) || is_cjk(c)) && !p.is_whitespace() && !c.is_whitespace() {
                out.push(' ');
            }
        }
        out.push(c);
        prev = Some(c);
    }
    out
}

fn is_punctuation(c: char) -> bool {
    if c.is_ascii() {
        return c.is_ascii_punctuation();
    }
    matches!(c as u32,
        0x2000..=0x206F     // general punctuation
        | 0x3000..=0x303F   // CJK symbols and punctuation
        | 0xFE30..=0xFE4F   // CJK compatibility forms
        | 0xFF01..=0xFF0F
        | 0xFF1A..=0xFF20
        | 0xFF3B..=0xFF40
        | 0xFF5B..=0xFF65)
}

fn is_combining_mark(c: char) -> bool {
    matches!(c as u32,
        0x0300..=0x036F | 0x1AB0..=0x1AFF | 0x1DC0..=0x1DFF | 0x20D0..=0x20FF | 0xFE20..=0xFE2F)
}

fn is_dropped_control(c: char) -> bool {
    c == '\u{0}' || c == '\u{FFFD}' || (c.is_control() && !c.is_whitespace())
}

/// Greedy longest-match-first segmentation of one word, appending ids to `out`.
/// A word with any unmatchable remainder becomes a single `[UNK]`.
pub fn wordpiece_word(word: &str, vocab: &Vocab, out: &mut Vec<u32>) {
    let chars: Vec<char> = word.chars().collect();
    if chars.is_empty() {
        return;
    }
    if chars.len() > MAX_WORD_CHARS {
        out.push(vocab.unk_id());
        return;
    }
    let mark = out.len();
    let mut start = 0;
    let mut piece = String::new();
    while start < chars.len() {
        let mut end = chars.len().min(start + vocab.max_token_chars());
        let mut found = None;
        while end > start {
            piece.clear();
            if start > 0 {
                piece.push_str(CONTINUATION_PREFIX);
            }
            piece.extend(&chars[start..end]);
            if let Some(id) = vocab.id(&piece) {
                found = Some(id);
                break;
            }
            end -= 1;
        }
        match found {
            Some(id) => {
                out.push(id);
                start = end;
            }
            None => {
                out.truncate(mark);
                out.push(vocab.unk_id());
                return;
            }
        }
    }
}

/// WordPiece over whitespace-separated words. No normalization is applied.
pub fn wordpiece_tokenize(text: &str, vocab: &Vocab) -> Vec<u32> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        wordpiece_word(word, vocab, &mut out);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Granularity {
    /// Space CJK characters apart before WordPiece.
    #[default]
    Char,
    /// Trust the caller's segmentation; CJK runs stay whole words.
    Word,
}

/// Fixed-length encoded caption: `[CLS] tokens… [SEP] [PAD]…`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
    pub sep_pos: usize,
}

impl TokenSequence {
    pub const CLS_POS: usize = 0;

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// Number of real (unpadded) positions, `[CLS]` and `[SEP]` included.
    pub fn real_len(&self) -> usize {
        self.sep_pos + 1
    }

    /// Positions eligible for token-wise matching: everything between
    /// `[CLS]` and `[SEP]`.
    pub fn content_positions(&self) -> std::ops::Range<usize> {
        1..self.sep_pos
    }
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vocab,
    granularity: Granularity,
    lowercase: bool,
}

impl Tokenizer {
    pub fn new(vocab: Vocab) -> Self {
        Self {
            vocab,
            granularity: Granularity::Char,
            lowercase: true,
        }
    }

    pub fn with_granularity(mut self, granularity: Granularity) -> Self {
        self.granularity = granularity;
        self
    }

    pub fn with_lowercase(mut self, lowercase: bool) -> Self {
        self.lowercase = lowercase;
        self
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    /// Cleanup, optional CJK spacing, lowercasing/accent stripping and
    /// punctuation splitting. Returns the words fed to WordPiece.
    pub fn pre_tokenize(&self, text: &str) -> Vec<String> {
        let cleaned: String = text
            .chars()
            .filter(|&c| !is_dropped_control(c))
            .map(|c| if c.is_whitespace() { ' ' } else { c })
            .collect();
        let spaced = match self.granularity {
            Granularity::Char => cjk_space(&cleaned),
            Granularity::Word => cleaned,
        };

        let mut words = Vec::new();
        for raw in spaced.split_whitespace() {
            let word: String = if self.lowercase {
                raw.chars()
                    .flat_map(|c| {
                        let v: Vec<char> = if is_cjk(c) {
                            vec![c]
                        } else {
                            c.to_lowercase().collect::<String>().nfd().collect()
                        };
                        v.into_iter()
                    })
                    .filter(|&c| !is_combining_mark(c))
                    .collect()
            } else {
                raw.to_string()
            };

            let mut current = String::new();
            for c in word.chars() {
                if is_punctuation(c) {
                    if !current.is_empty() {
                        words.push(std::mem::take(&mut current));
                    }
                    words.push(c.to_string());
                } else {
                    current.push(c);
                }
            }
            if !current.is_empty() {
                words.push(current);
            }
        }
        words
    }

    /// Token ids without special tokens or truncation.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in self.pre_tokenize(text) {
            wordpiece_word(&word, &self.vocab, &mut out);
        }
        out
    }

    pub fn encode(&self, text: &str, max_len: usize) -> Result<TokenSequence> {
        encode_ids(&self.tokenize(text), &self.vocab, max_len)
    }
}

/// Frames already-tokenized ids with `[CLS]`/`[SEP]`, truncating the tokens
/// (never `[SEP]`) and padding to `max_len`.
pub fn encode_ids(tokens: &[u32], vocab: &Vocab, max_len: usize) -> Result<TokenSequence> {
    if max_len < 3 {
        return Err(Error::Config(format!("max_len must be >= 3, got {max_len}")));
    }
    let keep = tokens.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(vocab.cls_id());
    ids.extend_from_slice(&tokens[..keep]);
    let sep_pos = ids.len();
    ids.push(vocab.sep_id());
    let mut mask = vec![1u8; ids.len()];
    ids.resize(max_len, vocab.pad_id());
    mask.resize(max_len, 0);
    Ok(TokenSequence { ids, mask, sep_pos })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_vocab() -> Vocab {
        Vocab::from_tokens([
            "[PAD]", "[UNK]", "[CLS]", "[SEP]", "蜂", "鸟", "un", "##aff", "##able", "a", "b",
            "蜂鸟", ",", "hello",
        ])
        .unwrap()
    }

    #[test]
    fn cjk_spacing_examples() {
        assert_eq!(cjk_space("蜂鸟"), "蜂 鸟");
        assert_eq!(cjk_space("abc"), "abc");
        assert_eq!(cjk_space("a蜂b"), "a 蜂 b");
        assert_eq!(cjk_space("蜂 鸟"), "蜂 鸟");
        assert_eq!(cjk_space(""), "");
    }

    #[test]
    fn cjk_block_boundaries() {
        assert!(is_cjk('\u{4E00}'));
        assert!(is_cjk('\u{9FFF}'));
        assert!(is_cjk('\u{3400}'));
        assert!(is_cjk('\u{4DBF}'));
        assert!(!is_cjk('\u{4DC0}'));
        assert!(!is_cjk('\u{3008}'));
        assert!(!is_cjk('a'));
    }

    #[test]
    fn wordpiece_examples() {
        let v = toy_vocab();
        assert_eq!(wordpiece_tokenize("蜂 鸟", &v), vec![4, 5]);
        assert_eq!(wordpiece_tokenize("zzz", &v), vec![v.unk_id()]);
        assert_eq!(wordpiece_tokenize("unaffable", &v), vec![6, 7, 8]);
        // remainder "x" unmatched: whole word collapses to one [UNK]
        assert_eq!(wordpiece_tokenize("unaffx", &v), vec![v.unk_id()]);
    }

    #[test]
    fn encode_examples() {
        let t = Tokenizer::new(toy_vocab());
        let v = t.vocab().clone();

        let empty = t.encode("", 32).unwrap();
        assert_eq!(&empty.ids[..3], &[v.cls_id(), v.sep_id(), v.pad_id()]);
        assert_eq!(empty.sep_pos, 1);
        assert_eq!(empty.mask.iter().filter(|&&m| m == 1).count(), 2);

        let seq = t.encode("蜂鸟", 32).unwrap();
        let mut expected = vec![v.cls_id(), 4, 5, v.sep_id()];
        expected.resize(32, v.pad_id());
        assert_eq!(seq.ids, expected);

        let long = "蜂".repeat(40);
        let seq = t.encode(&long, 32).unwrap();
        assert_eq!(seq.sep_pos, 31);
        assert_eq!(seq.ids[31], v.sep_id());
        assert_eq!(seq.ids[1..31].iter().filter(|&&i| i == 4).count(), 30);
        assert!(seq.mask.iter().all(|&m| m == 1));

        assert!(t.encode("蜂", 2).is_err());
    }

    #[test]
    fn word_grained_keeps_segmented_words() {
        let v = toy_vocab();
        let word = Tokenizer::new(v.clone()).with_granularity(Granularity::Word);
        assert_eq!(word.tokenize("蜂鸟"), vec![11]);
        let char = Tokenizer::new(v);
        assert_eq!(char.tokenize("蜂鸟"), vec![4, 5]);
    }

    #[test]
    fn preprocessing_lowercases_strips_accents_splits_punct() {
        let t = Tokenizer::new(toy_vocab());
        assert_eq!(t.pre_tokenize("HÉLLO,蜂"), vec!["hello", ",", "蜂"]);
        assert_eq!(t.tokenize("Hello,蜂"), vec![13, 12, 4]);
        assert_eq!(t.pre_tokenize("a\u{0}\tb"), vec!["a", "b"]);
    }
}
