use serde::{Deserialize, Serialize};

use super::lexicon::Lexicon;
use super::record::{ImageTextRecord, RejectStage};
use crate::error::{Error, Result};
use crate::tokenizer::count_cjk;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Both sides must be strictly greater than this.
    pub min_dim: u32,
    /// Upper bound on long side / short side, inclusive.
    pub max_aspect: f64,
    pub min_cjk_chars: usize,
    /// Exclusive upper bound.
    pub max_cjk_chars: usize,
    /// Captions occurring more often than this are dropped, every copy.
    pub max_text_frequency: u64,
    pub keyword_cap: usize,
    pub person_token: String,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_dim: 200,
            max_aspect: 3.0,
            min_cjk_chars: 1,
            max_cjk_chars: 32,
            max_text_frequency: 10,
            keyword_cap: 1000,
            person_token: "〈人名〉".to_string(),
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.min_dim > 0
            && self.max_aspect > 0.0
            && self.min_cjk_chars > 0
            && self.max_cjk_chars > 0
            && self.max_text_frequency > 0
            && self.keyword_cap > 0;
        if !positive {
            return Err(Error::Config("filter thresholds must be strictly positive".into()));
        }
        if !(self.max_aspect >= 1.0) {
            return Err(Error::Config(format!(
                "max_aspect must be >= 1, got {}",
                self.max_aspect
            )));
        }
        if self.min_cjk_chars >= self.max_cjk_chars {
            return Err(Error::Config("min_cjk_chars must be below max_cjk_chars".into()));
        }
        Ok(())
    }

    /// Applies `key=value` overrides (the CLI config-file format).
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: &dyn std::fmt::Display| Error::Config(format!("{key}={value}: {e}"));
        match key {
            "min_dim" => self.min_dim = value.parse().map_err(|e| bad(&e))?,
            "max_aspect" => self.max_aspect = value.parse().map_err(|e| bad(&e))?,
            "min_cjk_chars" => self.min_cjk_chars = value.parse().map_err(|e| bad(&e))?,
            "max_cjk_chars" => self.max_cjk_chars = value.parse().map_err(|e| bad(&e))?,
            "max_text_frequency" => self.max_text_frequency = value.parse().map_err(|e| bad(&e))?,
            "keyword_cap" => self.keyword_cap = value.parse().map_err(|e| bad(&e))?,
            "person_token" => self.person_token = value.to_string(),
            _ => return Err(Error::Config(format!("unknown filter key {key:?}"))),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict<T> {
    Keep(T),
    Reject { stage: RejectStage, reason: String },
}

impl<T> Verdict<T> {
    pub fn is_keep(&self) -> bool {
        matches!(self, Verdict::Keep(_))
    }

    pub fn stage(&self) -> Option<RejectStage> {
        match self {
            Verdict::Keep(_) => None,
            Verdict::Reject { stage, .. } => Some(*stage),
        }
    }
}

fn reject<T>(stage: RejectStage, reason: String) -> Verdict<T> {
    Verdict::Reject { stage, reason }
}

pub fn image_filter(record: &ImageTextRecord, cfg: &FilterConfig) -> Verdict<()> {
    let (w, h) = (record.width, record.height);
    if w <= cfg.min_dim || h <= cfg.min_dim {
        return reject(
            RejectStage::ImageSize,
            format!("{w}x{h}: both dimensions must exceed {}", cfg.min_dim),
        );
    }
    let ratio = w.max(h) as f64 / w.min(h) as f64;
    if ratio > cfg.max_aspect {
        return reject(
            RejectStage::ImageAspect,
            format!("aspect ratio {ratio:.3} exceeds {}", cfg.max_aspect),
        );
    }
    Verdict::Keep(())
}

const FILE_SUFFIXES: [&str; 5] = [".jpg", ".jpeg", ".png", ".gif", ".bmp"];

/// File-name captions ("000.jpg") and captions made only of digits,
/// punctuation and whitespace.
pub fn is_meaningless(caption: &str) -> bool {
    let t = caption.trim();
    let lower = t.to_lowercase();
    if FILE_SUFFIXES.iter().any(|s| lower.ends_with(s)) {
        return true;
    }
    t.chars().all(|c| {
        c.is_whitespace() || c.is_numeric() || c.is_ascii_punctuation() || is_wide_punct(c)
    })
}

fn is_wide_punct(c: char) -> bool {
    matches!(c as u32, 0x2000..=0x206F | 0x3000..=0x303F | 0xFF01..=0xFF0F | 0xFF1A..=0xFF20 | 0xFF3B..=0xFF40 | 0xFF5B..=0xFF65)
}

/// Text rules that depend only on the record itself: meaningless caption,
/// CJK character count, sensitive words. Returns the redacted caption.
pub fn text_filter(
    record: &ImageTextRecord,
    cfg: &FilterConfig,
    sensitive: &Lexicon,
    names: &Lexicon,
) -> Verdict<String> {
    if let Some(v) = text_shape_filter(record, cfg) {
        return v;
    }
    if let Some(v) = sensitive_filter(record, sensitive) {
        return v;
    }
    Verdict::Keep(redact(&record.caption, names, &cfg.person_token))
}

pub(crate) fn text_shape_filter(
    record: &ImageTextRecord,
    cfg: &FilterConfig,
) -> Option<Verdict<String>> {
    if is_meaningless(&record.caption) {
        return Some(reject(
            RejectStage::Meaningless,
            "caption is a file name or has no words".into(),
        ));
    }
    let n = count_cjk(&record.caption);
    if n < cfg.min_cjk_chars || n >= cfg.max_cjk_chars {
        return Some(reject(
            RejectStage::CjkCount,
            format!(
                "{n} CJK characters, need [{}, {})",
                cfg.min_cjk_chars, cfg.max_cjk_chars
            ),
        ));
    }
    None
}

pub(crate) fn sensitive_filter(
    record: &ImageTextRecord,
    sensitive: &Lexicon,
) -> Option<Verdict<String>> {
    sensitive.find_in(&record.caption).map(|w| {
        reject(
            RejectStage::Sensitive,
            format!("contains sensitive word {w:?}"),
        )
    })
}

pub fn redact(caption: &str, names: &Lexicon, person_token: &str) -> String {
    names.replace_all(caption, person_token)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(caption: &str, w: u32, h: u32) -> ImageTextRecord {
        ImageTextRecord::new("r", caption, w, h)
    }

    #[test]
    fn image_filter_examples() {
        let cfg = FilterConfig::default();
        assert_eq!(image_filter(&rec("", 300, 250), &cfg), Verdict::Keep(()));
        assert_eq!(
            image_filter(&rec("", 200, 400), &cfg).stage(),
            Some(RejectStage::ImageSize)
        );
        assert_eq!(
            image_filter(&rec("", 650, 210), &cfg).stage(),
            Some(RejectStage::ImageAspect)
        );
        // exactly 3 is allowed
        assert!(image_filter(&rec("", 900, 300), &cfg).is_keep());
        // size is checked before aspect
        assert_eq!(
            image_filter(&rec("", 150, 1000), &cfg).stage(),
            Some(RejectStage::ImageSize)
        );
    }

    #[test]
    fn text_filter_examples() {
        let cfg = FilterConfig::default();
        let none = Lexicon::empty();
        let names = Lexicon::new(["张伟"]).unwrap();
        assert_eq!(
            text_filter(&rec("000.jpg", 300, 300), &cfg, &none, &none).stage(),
            Some(RejectStage::Meaningless)
        );
        assert_eq!(
            text_filter(&rec("hello world", 300, 300), &cfg, &none, &none).stage(),
            Some(RejectStage::CjkCount)
        );
        assert_eq!(
            text_filter(&rec("张伟在公园", 300, 300), &cfg, &none, &names),
            Verdict::Keep("〈人名〉在公园".to_string())
        );
    }

    #[test]
    fn cjk_count_bounds() {
        let cfg = FilterConfig::default();
        let none = Lexicon::empty();
        let at = |n: usize| text_filter(&rec(&"山".repeat(n), 300, 300), &cfg, &none, &none);
        assert!(at(1).is_keep());
        assert!(at(31).is_keep());
        assert_eq!(at(32).stage(), Some(RejectStage::CjkCount));
    }

    #[test]
    fn meaningless_rule() {
        assert!(is_meaningless("000.jpg"));
        assert!(is_meaningless("  风景.JPEG "));
        assert!(is_meaningless("123 456"));
        assert!(is_meaningless("2021-08-01，。"));
        assert!(!is_meaningless("风景 2021"));
        assert!(!is_meaningless("hello"));
    }

    #[test]
    fn sensitive_is_case_sensitive_substring() {
        let cfg = FilterConfig::default();
        let none = Lexicon::empty();
        let bad = Lexicon::new(["赌博", "Bad"]).unwrap();
        assert_eq!(
            text_filter(&rec("网络赌博广告", 300, 300), &cfg, &bad, &none).stage(),
            Some(RejectStage::Sensitive)
        );
        assert!(text_filter(&rec("bad 猫", 300, 300), &cfg, &bad, &none).is_keep());
        assert!(!text_filter(&rec("Bad 猫", 300, 300), &cfg, &bad, &none).is_keep());
    }

    #[test]
    fn config_validation() {
        assert!(FilterConfig::default().validate().is_ok());
        let cfg = FilterConfig {
            max_aspect: 0.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let mut cfg = FilterConfig::default();
        cfg.apply_override("min_dim", "100").unwrap();
        assert_eq!(cfg.min_dim, 100);
        assert!(cfg.apply_override("nope", "1").is_err());
    }
}
