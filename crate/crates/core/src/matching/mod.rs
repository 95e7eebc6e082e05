//! Set-prediction matching and the training objectives.
//!
//! Predictions are scored against ground truth padded with "no object" slots
//! so every assignment is a square permutation problem.

mod giou;
mod hungarian;
mod loss;

pub use giou::{giou, giou_rows, l1_rows};
pub use hungarian::{assignment_cost, brute_force_assignment, hungarian};
pub use loss::{
    class_probs, class_probs_rows, contrastive_loss, gn_loss, match_slots, matching_cost, set_loss, total_loss,
    LossBundle, LossTerms, SlotTargets, PROB_FLOOR,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MatchError {
    #[error("more GT {kind} ({n}) than {kind} tokens ({k})")]
    TooManyTargets { kind: &'static str, n: usize, k: usize },
    #[error("cost matrix must be square and non-empty, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("non-finite cost at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("class embedding has zero norm")]
    ZeroEmbedding,
    #[error("empty batch")]
    EmptyBatch,
    #[error("loss weight {name} must be non-negative, got {value}")]
    NegativeWeight { name: &'static str, value: f64 },
    #[error("{0}")]
    Shape(String),
}

/// Optimal assignment of predictions to ground-truth slots.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `perm[j]` is the slot assigned to prediction `j`.
    pub perm: Vec<usize>,
    pub pair_costs: Vec<f64>,
    pub total: f64,
}
