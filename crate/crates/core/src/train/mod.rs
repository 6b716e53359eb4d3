//! Locked-image text tuning: frozen image embeddings, trainable text tower,
//! projections, token reducer and temperature, optimized with LAMB under a
//! warmup-cosine schedule.

mod data;
mod lamb;
mod model;
mod schedule;
mod synth;
mod trainer;

pub use data::{read_captions, CaptionRecord, PairDataset};
pub use lamb::{lamb_step, trust_ratio, LambConfig, LambTensor, OptimizerState};
pub use model::{
    batch_loss, similarity_matrices, BatchResult, ModelParams, ModelShape, SimilarityMode,
};
pub use schedule::lr_schedule;
pub use synth::{synth_caption, synth_task, synth_vocab, SynthTask, MAX_SYNTH_PAIRS};
pub use trainer::{
    batch_indices, lit_train, load_model, model_digest, validate, LogLine, StepLog, TrainConfig, TrainState,
    Validation, CHECKPOINT_FORMAT,
};
