//! Projection into the shared space, the three similarity kernels, the token
//! reduction layer and word-patch alignment. Differentiable pieces come with
//! a matching `*_backward`.

mod alignment;
mod embedding;
mod project;
mod reduce;
mod similarity;

pub use alignment::word_patch_alignment;
pub use embedding::{EmbeddingFile, EmbeddingKind, EmbeddingSet, WKEB_VERSION};
pub use project::{l2_project, project_rows, project_rows_backward, ProjectionHead, Projected};
pub use reduce::{
    reduce_tokens, reduce_tokens_backward, token_reduce, ReduceCache, TokenReducer, KERNEL,
};
pub use similarity::{
    global_similarity, global_similarity_backward, reduced_tokenwise_similarity, tokenwise_backward,
    tokenwise_flops, tokenwise_scores, tokenwise_similarity, TokenwiseScore,
};
