//! Masked-segment feature database with exact and graph-based k-NN search.

mod exact;
mod hnsw;
mod labels;
mod persist;

use serde::{Deserialize, Serialize};

pub use exact::ExactIndex;
pub use hnsw::{HnswIndex, HnswParams};
pub use labels::{ensure_coverage, match_labels, CoverageReport, DEFAULT_MATCH_THRESHOLD};
pub use persist::{decode, encode, load, load_with, save, RFDB_MAGIC};

use crate::error::{Error, Result};
use crate::types::{FeatureRecord, Vocabulary, UNIT_NORM_TOLERANCE};

/// Default number of neighbors retrieved per query.
pub const DEFAULT_K: usize = 16;

/// One search hit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    /// Euclidean distance between unit vectors, in `[0, 2]`.
    pub distance: f32,
    pub label_id: usize,
    pub record_index: usize,
}

/// Squared Euclidean distance, summed left to right in `f32`.
#[inline]
pub fn squared_distance(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

#[inline]
pub fn euclidean(a: &[f32], b: &[f32]) -> f32 {
    squared_distance(a, b).sqrt()
}

/// Ascending distance, ties by record index.
pub(crate) fn neighbor_order(a: &(f32, usize), b: &(f32, usize)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Backend {
    Exact,
    #[serde(rename = "approx")]
    Approximate(HnswParams),
}

impl Default for Backend {
    fn default() -> Self {
        Backend::Approximate(HnswParams::default())
    }
}

#[derive(Debug, Clone)]
enum SearchIndex {
    Exact(ExactIndex),
    Approximate(HnswIndex),
}

#[derive(Debug, Clone)]
pub struct FeatureDatabase {
    dim: usize,
    vocabulary: Vocabulary,
    records: Vec<FeatureRecord>,
    index: Option<SearchIndex>,
}

impl FeatureDatabase {
    pub fn new(dim: usize, vocabulary: Vocabulary) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidValue("database dimension must be positive".into()));
        }
        Ok(Self {
            dim,
            vocabulary,
            records: Vec::new(),
            index: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub(crate) fn vocabulary_mut(&mut self) -> &mut Vocabulary {
        self.index = None;
        &mut self.vocabulary
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn is_indexed(&self) -> bool {
        self.index.is_some()
    }

    /// Number of records per vocabulary class.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.vocabulary.len()];
        for r in &self.records {
            counts[r.label_id] += 1;
        }
        counts
    }

    /// Adds a record. Any built index is dropped and must be rebuilt.
    pub fn insert(&mut self, record: FeatureRecord) -> Result<()> {
        if record.feature.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: record.feature.len(),
            });
        }
        if record.label_id >= self.vocabulary.len() {
            return Err(Error::UnknownLabel(record.label_id));
        }
        let norm = crate::types::l2_norm(&record.feature);
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::InvalidValue(format!("record feature norm {norm} is not 1")));
        }
        self.records.push(record);
        self.index = None;
        Ok(())
    }

    pub fn build_index(&mut self, backend: Backend) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::EmptyDatabase);
        }
        let flat: Vec<f32> = self.records.iter().flat_map(|r| r.feature.iter().copied()).collect();
        self.index = Some(match backend {
            Backend::Exact => SearchIndex::Exact(ExactIndex::new(self.dim, flat)),
            Backend::Approximate(params) => SearchIndex::Approximate(HnswIndex::build(self.dim, flat, params)?),
        });
        Ok(())
    }

    /// The `min(k, len)` nearest records to `key`, nearest first.
    pub fn query_knn(&self, key: &[f32], k: usize) -> Result<Vec<Neighbor>> {
        let index = self.index.as_ref().ok_or(Error::IndexNotBuilt)?;
        if key.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: key.len(),
            });
        }
        if k == 0 {
            return Err(Error::InvalidValue("k must be at least 1".into()));
        }
        let hits = match index {
            SearchIndex::Exact(ix) => ix.search(key, k),
            SearchIndex::Approximate(ix) => ix.search(key, k),
        };
        Ok(hits
            .into_iter()
            .map(|(distance, record_index)| Neighbor {
                distance,
                label_id: self.records[record_index].label_id,
                record_index,
            })
            .collect())
    }
}
