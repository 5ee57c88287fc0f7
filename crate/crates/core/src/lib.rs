//! Retrieval-augmented open-vocabulary segment classification.
//!
//! The engine consumes precomputed dense feature maps and binary segment
//! masks, pools one feature per segment, classifies it through three paths
//! (nearest-neighbor retrieval against a masked-segment feature database,
//! text-embedding cosine scores, and a projected in-vocabulary classifier),
//! blends the paths, assembles a panoptic map and scores it with PQ, mIoU
//! and mask mAP.

pub mod classify;
pub mod config;
pub mod error;
pub mod featdb;
pub mod io;
pub mod metrics;
pub mod panoptic;
pub mod pipeline;
pub mod pooling;
pub mod rle;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    DenseFeatureMap, EnsembleConfig, FeatureRecord, ScoreVector, SegmentMask, Vocabulary, VocabularyEntry,
};
