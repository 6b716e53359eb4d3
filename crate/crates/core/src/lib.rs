//! Toolkit for Chinese image-text contrastive pretraining at desk scale.
//!
//! - [`corpus`]: web-corpus filtering and statistics over JSONL records
//! - [`tokenizer`]: character-grained WordPiece with `[CLS]`/`[SEP]` framing
//! - [`align`]: projections, global / token-wise / reduced-token similarity,
//!   the token reduction layer and word-patch alignment
//! - [`loss`]: temperature-scaled symmetric contrastive loss
//! - [`textenc`]: causal transformer text tower with hand-written backward
//! - [`train`]: locked-image text tuning with LAMB and warmup-cosine schedule
//! - [`evalkit`]: prompt-ensemble zero-shot classification and Recall@K

pub mod align;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod linalg;
pub mod loss;
pub mod textenc;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
