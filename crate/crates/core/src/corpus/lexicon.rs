use std::path::Path;

use aho_corasick::{AhoCorasick, MatchKind};

use crate::error::{Error, Result};

/// A word list matched by leftmost-longest substring search.
#[derive(Debug, Clone)]
pub struct Lexicon {
    entries: Vec<String>,
    matcher: Option<AhoCorasick>,
}

impl Default for Lexicon {
    fn default() -> Self {
        Self::empty()
    }
}

impl Lexicon {
    pub fn empty() -> Self {
        Self {
            entries: Vec::new(),
            matcher: None,
        }
    }

    pub fn new<I, S>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut entries: Vec<String> = entries
            .into_iter()
            .map(Into::into)
            .filter(|e| !e.is_empty())
            .collect();
        entries.sort();
        entries.dedup();
        if entries.is_empty() {
            return Ok(Self::empty());
        }
        let matcher = AhoCorasick::builder()
            .match_kind(MatchKind::LeftmostLongest)
            .build(&entries)
            .map_err(|e| Error::Data(format!("cannot build lexicon matcher: {e}")))?;
        Ok(Self {
            entries,
            matcher: Some(matcher),
        })
    }

    /// One entry per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8(bytes).map_err(|e| Error::Lexicon {
            path: path.to_path_buf(),
            reason: format!("not valid UTF-8: {e}"),
        })?;
        Self::parse(&text).map_err(|e| Error::Lexicon {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    /// First entry found in `text`, if any.
    pub fn find_in<'a>(&'a self, text: &str) -> Option<&'a str> {
        let m = self.matcher.as_ref()?.find(text)?;
        Some(&self.entries[m.pattern().as_usize()])
    }

    /// Replaces every leftmost-longest match with `token`.
    pub fn replace_all(&self, text: &str, token: &str) -> String {
        match &self.matcher {
            None => text.to_string(),
            Some(m) => {
                let reps = vec![token; self.entries.len()];
                m.replace_all(text, &reps)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blank_lines_ignored() {
        let lex = Lexicon::parse("# names\n张伟\n\n  李娜  \n#x\n").unwrap();
        assert_eq!(lex.entries(), &["张伟".to_string(), "李娜".to_string()]);
    }

    #[test]
    fn longest_match_wins() {
        let lex = Lexicon::new(["张", "张伟"]).unwrap();
        assert_eq!(lex.replace_all("张伟在公园", "X"), "X在公园");
        assert_eq!(lex.find_in("小张伟"), Some("张伟"));
    }

    #[test]
    fn invalid_utf8_is_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.txt");
        std::fs::write(&p, [0xff, 0xfe, b'\n']).unwrap();
        assert!(matches!(Lexicon::load(&p), Err(Error::Lexicon { .. })));
    }
}
