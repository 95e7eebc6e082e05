//! Structured vision-language learning from image / scene-graph pairs.
//!
//! The crate is organised bottom-up:
//!
//! - [`scene`]: scene-graph types, validation, components and JSONL I/O.
//! - [`pipeline`]: random-walk subgraphs, crop-and-densify, graph captions
//!   and the four graph-based negative rules.
//! - [`tensor`]: a small reverse-mode autodiff engine over `f64` tensors,
//!   finite-difference checks, AdamW and checkpoints.
//! - [`model`]: word tokenizer, text transformer, and a vision transformer
//!   whose scene-graph tokens run on their own LoRA-adapted parameter track.
//! - [`matching`]: GIoU, Hungarian matching, set-prediction and contrastive
//!   objectives.
//! - [`synth`], [`train`], [`eval`]: synthetic compositional data, the mixed
//!   batch training loop and the evaluation metrics.

pub mod eval;
pub mod matching;
pub mod model;
pub mod pipeline;
pub mod scene;
pub mod synth;
pub mod tensor;
pub mod train;

pub use matching::{LossBundle, MatchResult};
pub use model::{ModelConfig, SgvlModel};
pub use pipeline::{CaptionPair, NegativeRule, RuleConfig};
pub use scene::{
    AttrTag, Attribute, BBox, ImageRef, ImageSgPair, ImageTextPair, ObjectNode, RelationEdge,
    RgbImage, SceneGraph,
};
pub use tensor::{ParamId, ParamStore, Tape, Tensor, Var};
pub use train::TrainConfig;

/// Crate-level error.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Parse(#[from] scene::ParseError),
    #[error(transparent)]
    Graph(#[from] scene::GraphError),
    #[error(transparent)]
    Raster(#[from] scene::RasterError),
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Matching(#[from] matching::MatchError),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("no negative derivable for graph {0}")]
    NoNegative(String),
    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
