//! Graph preprocessing, caption generation and graph-based negatives.

mod caption;
mod config;
mod negatives;
mod walk;

pub use caption::{graph_to_caption, objects_caption};
pub use config::RuleConfig;
pub use negatives::{apply_negative_rule, negative_caption, sample_caption_pair, CaptionPair, NegativeRule};
pub use walk::{accept_subgraph, crop_and_densify, extract_subgraph_random_walk, preprocess_pair};
