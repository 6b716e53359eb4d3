use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::Serialize;

use super::filter::{
    image_filter, redact, sensitive_filter, text_shape_filter, FilterConfig, Verdict,
};
use super::frequency::CaptionCounts;
use super::lexicon::Lexicon;
use super::record::{ImageTextRecord, RejectStage, RejectionLogEntry};
use crate::error::{Error, Result};

/// Two-pass filter: a frequency pass over the whole input, then per-record
/// stages in the fixed order image_size → image_aspect → meaningless →
/// cjk_count → frequency → sensitive → keyword_cap.
#[derive(Debug, Clone)]
pub struct Pipeline {
    cfg: FilterConfig,
    names: Lexicon,
    sensitive: Lexicon,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub input: usize,
    pub kept: usize,
    pub rejected: usize,
    pub parse_errors: usize,
    pub by_stage: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineOutput {
    pub kept: Vec<ImageTextRecord>,
    pub rejected: Vec<RejectionLogEntry>,
}

impl Pipeline {
    pub fn new(cfg: FilterConfig, names: Lexicon, sensitive: Lexicon) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            names,
            sensitive,
        })
    }

    pub fn config(&self) -> &FilterConfig {
        &self.cfg
    }

    pub fn redact(&self, caption: &str) -> String {
        redact(caption, &self.names, &self.cfg.person_token)
    }

    /// Captions are counted in redacted form, so two captions that differ
    /// only by a person name share a count. This keeps the pipeline
    /// idempotent on its own output.
    pub fn count<'a, I>(&self, records: I) -> CaptionCounts
    where
        I: IntoIterator<Item = &'a ImageTextRecord>,
    {
        let mut counts = CaptionCounts::new();
        for r in records {
            counts.add(&self.redact(&r.caption));
        }
        counts
    }

    /// Parallel frequency pass over an in-memory slice.
    pub fn count_parallel(&self, records: &[ImageTextRecord]) -> CaptionCounts {
        records
            .par_chunks(4096)
            .map(|chunk| self.count(chunk))
            .reduce(CaptionCounts::new, |mut a, b| {
                a.merge(b);
                a
            })
    }

    /// Frequency pass over JSONL; unparsable lines are skipped here and
    /// reported by [`Pipeline::run_lines`].
    pub fn count_lines<R: BufRead>(&self, reader: R) -> Result<CaptionCounts> {
        let mut counts = CaptionCounts::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if let Ok(r) = ImageTextRecord::from_json_line(&line) {
                counts.add(&self.redact(&r.caption));
            }
        }
        Ok(counts)
    }

    /// Every stage except the order-dependent keyword cap.
    pub fn evaluate(&self, record: &ImageTextRecord, counts: &CaptionCounts) -> Verdict<String> {
        if let Verdict::Reject { stage, reason } = image_filter(record, &self.cfg) {
            return Verdict::Reject { stage, reason };
        }
        if let Some(v) = text_shape_filter(record, &self.cfg) {
            return v;
        }
        let redacted = self.redact(&record.caption);
        let n = counts.get(&redacted);
        if n > self.cfg.max_text_frequency {
            return Verdict::Reject {
                stage: RejectStage::Frequency,
                reason: format!(
                    "caption occurs {n} times (limit {})",
                    self.cfg.max_text_frequency
                ),
            };
        }
        if let Some(v) = sensitive_filter(record, &self.sensitive) {
            return v;
        }
        Verdict::Keep(redacted)
    }

    /// Runs all stages over in-memory records.
    pub fn run_records(&self, records: &[ImageTextRecord]) -> PipelineOutput {
        let counts = self.count_parallel(records);
        let verdicts: Vec<Verdict<String>> = records
            .par_iter()
            .map(|r| self.evaluate(r, &counts))
            .collect();

        let mut cap = KeywordCap::new(self.cfg.keyword_cap);
        let mut out = PipelineOutput::default();
        for (r, v) in records.iter().zip(verdicts) {
            match cap.apply(r, v) {
                Ok(kept) => out.kept.push(kept),
                Err(entry) => out.rejected.push(entry),
            }
        }
        out
    }

    /// Streaming second pass over JSONL. Blank lines are ignored; every
    /// other line ends up in exactly one of the two outputs.
    pub fn run_lines<R, K, J>(
        &self,
        reader: R,
        counts: &CaptionCounts,
        mut kept: K,
        mut rejects: J,
    ) -> Result<RunSummary>
    where
        R: BufRead,
        K: Write,
        J: Write,
    {
        let mut cap = KeywordCap::new(self.cfg.keyword_cap);
        let mut summary = RunSummary::default();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            summary.input += 1;
            let outcome = match ImageTextRecord::from_json_line(&line) {
                Ok(r) => {
                    let v = self.evaluate(&r, counts);
                    cap.apply(&r, v)
                }
                Err(e) => {
                    summary.parse_errors += 1;
                    Err(RejectionLogEntry {
                        id: salvage_id(&line).unwrap_or_else(|| format!("line:{}", lineno + 1)),
                        stage: None,
                        reason: format!("unreadable record: {e}"),
                    })
                }
            };
            match outcome {
                Ok(r) => {
                    summary.kept += 1;
                    writeln!(kept, "{}", r.to_json_line())?;
                }
                Err(entry) => {
                    summary.rejected += 1;
                    let key = entry.stage.map_or("parse", RejectStage::as_str);
                    *summary.by_stage.entry(key.to_string()).or_insert(0) += 1;
                    writeln!(rejects, "{}", serde_json::to_string(&entry)?)?;
                }
            }
        }
        kept.flush()?;
        rejects.flush()?;
        Ok(summary)
    }
}

fn salvage_id(line: &str) -> Option<String> {
    let v: serde_json::Value = serde_json::from_str(line).ok()?;
    match v.get("id")? {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Keeps the first `cap` survivors per keyword in input order. Records
/// without a keyword are never capped.
struct KeywordCap {
    cap: usize,
    seen: HashMap<String, usize>,
}

impl KeywordCap {
    fn new(cap: usize) -> Self {
        Self {
            cap,
            seen: HashMap::new(),
        }
    }

    fn apply(
        &mut self,
        record: &ImageTextRecord,
        verdict: Verdict<String>,
    ) -> std::result::Result<ImageTextRecord, RejectionLogEntry> {
        match verdict {
            Verdict::Reject { stage, reason } => Err(RejectionLogEntry {
                id: record.id.clone(),
                stage: Some(stage),
                reason,
            }),
            Verdict::Keep(caption) => {
                if let Some(k) = &record.keyword {
                    let n = self.seen.entry(k.clone()).or_insert(0);
                    if *n >= self.cap {
                        return Err(RejectionLogEntry {
                            id: record.id.clone(),
                            stage: Some(RejectStage::KeywordCap),
                            reason: format!("keyword {k:?} already has {} kept pairs", self.cap),
                        });
                    }
                    *n += 1;
                }
                let mut kept = record.clone();
                kept.caption = caption;
                Ok(kept)
            }
        }
    }
}

/// Reads `input` twice (frequency pass, then filtering) and writes kept
/// records and rejection entries as JSONL.
pub fn run_pipeline_file(
    pipeline: &Pipeline,
    input: &std::path::Path,
    kept: impl Write,
    rejects: impl Write,
) -> Result<RunSummary> {
    let open = || {
        std::fs::File::open(input)
            .map(std::io::BufReader::new)
            .map_err(|e| Error::io(input, e))
    };
    let counts = pipeline.count_lines(open()?)?;
    pipeline.run_lines(open()?, &counts, kept, rejects)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pipeline() -> Pipeline {
        Pipeline::new(FilterConfig::default(), Lexicon::empty(), Lexicon::empty()).unwrap()
    }

    #[test]
    fn empty_input() {
        let out = pipeline().run_records(&[]);
        assert!(out.kept.is_empty() && out.rejected.is_empty());

        let mut k = Vec::new();
        let mut j = Vec::new();
        let s = pipeline()
            .run_lines(&b""[..], &CaptionCounts::new(), &mut k, &mut j)
            .unwrap();
        assert_eq!(s.input, 0);
        assert!(k.is_empty() && j.is_empty());
    }

    #[test]
    fn first_failing_stage_wins() {
        let r = ImageTextRecord::new("x", "hello", 100, 100);
        let out = pipeline().run_records(&[r]);
        assert_eq!(out.rejected.len(), 1);
        assert_eq!(out.rejected[0].stage, Some(RejectStage::ImageSize));
    }

    #[test]
    fn keyword_cap_keeps_first_survivors() {
        let recs: Vec<_> = (0..1005)
            .map(|i| ImageTextRecord::new(format!("r{i}"), format!("运动图片{i}"), 300, 300).with_keyword("运动"))
            .collect();
        let out = pipeline().run_records(&recs);
        assert_eq!(out.kept.len(), 1000);
        assert_eq!(out.rejected.len(), 5);
        assert!(out.rejected.iter().all(|e| e.stage == Some(RejectStage::KeywordCap)));
        assert_eq!(out.rejected[0].id, "r1000");
    }

    #[test]
    fn over_frequent_caption_loses_every_copy() {
        let mut recs: Vec<_> = (0..11)
            .map(|i| ImageTextRecord::new(format!("r{i}"), "查看源网页", 300, 300))
            .collect();
        recs.push(ImageTextRecord::new("ok", "一只猫", 300, 300));
        let out = pipeline().run_records(&recs);
        assert_eq!(out.kept.len(), 1);
        assert_eq!(
            out.rejected
                .iter()
                .filter(|e| e.stage == Some(RejectStage::Frequency))
                .count(),
            11
        );
    }

    #[test]
    fn ten_copies_survive() {
        let recs: Vec<_> = (0..10)
            .map(|i| ImageTextRecord::new(format!("r{i}"), "展开全文", 300, 300))
            .collect();
        assert_eq!(pipeline().run_records(&recs).kept.len(), 10);
    }

    #[test]
    fn unreadable_lines_are_logged_and_skipped() {
        let input = "{\"id\":\"a\",\"caption\":\"猫\",\"width\":300,\"height\":300}\n\
                     {broken\n\
                     {\"id\":\"b\",\"caption\":\"狗\",\"width\":0,\"height\":300}\n";
        let p = pipeline();
        let counts = p.count_lines(input.as_bytes()).unwrap();
        let mut k = Vec::new();
        let mut j = Vec::new();
        let s = p.run_lines(input.as_bytes(), &counts, &mut k, &mut j).unwrap();
        assert_eq!((s.input, s.kept, s.rejected, s.parse_errors), (3, 1, 2, 2));
        let rejects = String::from_utf8(j).unwrap();
        assert!(rejects.contains("\"id\":\"line:2\""));
        assert!(rejects.contains("\"id\":\"b\""));
        assert!(rejects.contains("\"stage\":null"));
    }

    #[test]
    fn redaction_shares_frequency_key() {
        let names = Lexicon::new((0..11).map(|i| format!("名{}", char::from_u32(0x4E00 + i).unwrap()))).unwrap();
        let p = Pipeline::new(FilterConfig::default(), names, Lexicon::empty()).unwrap();
        let recs: Vec<_> = (0..11)
            .map(|i| {
                let n = char::from_u32(0x4E00 + i).unwrap();
                ImageTextRecord::new(format!("r{i}"), format!("名{n}在公园"), 300, 300)
            })
            .collect();
        let out = p.run_records(&recs);
        assert!(out.kept.is_empty());
    }
}
