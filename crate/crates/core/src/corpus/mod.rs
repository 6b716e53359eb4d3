//! Web-corpus filtering: image-size and aspect rules, caption text rules,
//! caption-frequency deduplication, person-name redaction, sensitive-word
//! removal, per-keyword capping, and corpus statistics.

mod filter;
mod frequency;
mod lexicon;
mod pipeline;
mod record;
mod stats;

pub use filter::{image_filter, is_meaningless, redact, text_filter, FilterConfig, Verdict};
pub use frequency::{frequency_pass, normalize_caption, CaptionCounts};
pub use lexicon::Lexicon;
pub use pipeline::{run_pipeline_file, Pipeline, PipelineOutput, RunSummary};
pub use record::{ImageTextRecord, RejectStage, RejectionLogEntry};
pub use stats::{corpus_stats, CorpusStats, REFERENCE_TOKENS_PER_CAPTION};
