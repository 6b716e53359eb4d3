//! Zero-shot classification with prompt ensembles, and image-text retrieval
//! scored by Recall@K and mean recall.

mod prompts;
mod retrieval;
mod zeroshot;

pub use prompts::{class_embeddings, load_class_names, PromptSet, DEFAULT_PROMPTS, PLACEHOLDER};
pub use retrieval::{
    load_ground_truth, mean_recall, parse_ground_truth, rank_of, recall_at_k, retrieval_eval,
    GroundTruthLine, Recalls, RetrievalGroundTruth, RetrievalReport, KS,
};
pub use zeroshot::{predict, report_average, round_to, zero_shot_classify, ZeroShotReport};
