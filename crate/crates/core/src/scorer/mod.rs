//! Vision-token importance scoring, soft score masking and scorer training.

mod gap;
mod scores;
mod select;
mod train;

use ndarray::{Array2, Axis};

pub use gap::{gap_of, importance_gap};
pub use scores::{cosine_scores, default_grid, score_tokens, spiral_order, spiral_scores, ImportanceScores, Provenance};
pub use select::{
    compute_threshold, hard_mask_complement, keep_count, rank_descending, select_top_k, soft_mask, soft_penalties,
};
pub use train::{
    corpus_fingerprint, loss_gradient, objective_at, train_scorer, training_loss, AdamMoments, LossGradient,
    ScorerHyperParams, ScorerState, SCORER_SCHEMA_VERSION,
};

use crate::error::Result;
use crate::model::{TokenSequence, ToyVLM};

/// Scoring inputs taken from the embedding layer: vision payloads and the
/// token-embedding rows of the text ids (position embeddings excluded).
pub fn modality_embeddings(model: &ToyVLM, seq: &TokenSequence) -> Result<(Array2<f32>, Array2<f32>)> {
    let vocab = model.config().vocab_size;
    let ids: Vec<usize> = seq.text_ids().into_iter().map(|i| i as usize).collect();
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(crate::Error::Input(format!("token id {bad} exceeds vocab size {vocab}")));
    }
    let text = model.weights().token_embedding.select(Axis(0), &ids);
    Ok((seq.vision_embeddings(), text))
}
