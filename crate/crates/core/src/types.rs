use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the L2 norm of anything the engine treats as a unit vector.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

/// Per-patch feature grid produced by a vision backbone, row-major `[h][w][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFeatureMap {
    height_patches: usize,
    width_patches: usize,
    dim: usize,
    patch_size: usize,
    data: Vec<f32>,
}

impl DenseFeatureMap {
    pub fn new(
        height_patches: usize,
        width_patches: usize,
        dim: usize,
        patch_size: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if height_patches == 0 || width_patches == 0 || dim == 0 || patch_size == 0 {
            return Err(Error::DimensionMismatch(format!(
                "feature map extents must be positive, got {height_patches}x{width_patches}x{dim} (patch {patch_size})"
            )));
        }
        let expected = height_patches * width_patches * dim;
        if data.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "feature map payload has {} values, expected {expected}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("feature map contains non-finite values".into()));
        }
        Ok(Self {
            height_patches,
            width_patches,
            dim,
            patch_size,
            data,
        })
    }

    pub fn height_patches(&self) -> usize {
        self.height_patches
    }

    pub fn width_patches(&self) -> usize {
        self.width_patches
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Feature of patch `(row, col)`.
    pub fn patch(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width_patches + col) * self.dim;
        &self.data[start..start + self.dim]
    }
}

/// Binary mask stored as row-major `(start, length)` runs of set pixels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SegmentMask {
    height: usize,
    width: usize,
    runs: Vec<(u32, u32)>,
}

impl SegmentMask {
    /// Builds a mask from runs, checking they are sorted, disjoint and in bounds.
    ///
    /// Touching runs are accepted; [`crate::rle::encode`] never produces them.
    pub fn new(height: usize, width: usize, runs: Vec<(u32, u32)>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::DimensionMismatch(format!(
                "mask extents must be positive, got {height}x{width}"
            )));
        }
        let pixels = height * width;
        let mut prev_end = 0usize;
        for (index, &(start, len)) in runs.iter().enumerate() {
            let (start, len) = (start as usize, len as usize);
            if index > 0 && start < prev_end {
                return Err(Error::OverlappingRuns { index });
            }
            if len == 0 || start + len > pixels {
                return Err(Error::RunOutOfBounds { index, pixels });
            }
            prev_end = start + len;
        }
        Ok(Self { height, width, runs })
    }

    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, Vec::new())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn runs(&self) -> &[(u32, u32)] {
        &self.runs
    }

    pub fn area(&self) -> usize {
        self.runs.iter().map(|&(_, len)| len as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    /// Row-major indices of every set pixel.
    pub fn pixels(&self) -> impl Iterator<Item = usize> + '_ {
        self.runs
            .iter()
            .flat_map(|&(start, len)| start as usize..(start + len) as usize)
    }
}

/// One pooled segment feature and its class.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub feature: Vec<f32>,
    pub label_id: usize,
    pub source_tag: String,
}

impl FeatureRecord {
    /// Normalizes `feature` to unit length.
    pub fn new(feature: Vec<f32>, label_id: usize, source_tag: impl Into<String>) -> Result<Self> {
        Ok(Self {
            feature: normalized(&feature).ok_or(Error::DegenerateFeature)?,
            label_id,
            source_tag: source_tag.into(),
        })
    }

    /// Wraps an already normalized feature, rejecting it if it is not unit length.
    pub fn from_unit(feature: Vec<f32>, label_id: usize, source_tag: impl Into<String>) -> Result<Self> {
        let norm = l2_norm(&feature);
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::InvalidValue(format!("record feature norm {norm} is not 1")));
        }
        Ok(Self {
            feature,
            label_id,
            source_tag: source_tag.into(),
        })
    }
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Unit-length copy of `v`, or `None` when it is zero or not finite.
pub fn normalized(v: &[f32]) -> Option<Vec<f32>> {
    let norm = l2_norm(v);
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(v.iter().map(|&x| (f64::from(x) / norm) as f32).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabularyEntry {
    pub name: String,
    /// Whether the class was part of the in-vocabulary training label set.
    #[serde(default)]
    pub seen: bool,
    /// Countable ("thing") class; stuff classes are merged per image.
    #[serde(default = "default_thing")]
    pub thing: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f32>>,
}

fn default_thing() -> bool {
    true
}

impl VocabularyEntry {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            seen: false,
            thing: true,
            embedding: None,
        }
    }

    pub fn seen(mut self, seen: bool) -> Self {
        self.seen = seen;
        self
    }

    pub fn thing(mut self, thing: bool) -> Self {
        self.thing = thing;
        self
    }

    pub fn embedding(mut self, embedding: Vec<f32>) -> Self {
        self.embedding = Some(embedding);
        self
    }
}

/// Ordered class list. Serialized as a JSON array of entries.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<VocabularyEntry>", into = "Vec<VocabularyEntry>")]
pub struct Vocabulary {
    entries: Vec<VocabularyEntry>,
    #[serde(skip)]
    by_name: HashMap<String, usize>,
}

impl Vocabulary {
    /// Validates names and embeddings. Embeddings more than
    /// [`UNIT_NORM_TOLERANCE`] away from unit length are renormalized.
    pub fn new(entries: Vec<VocabularyEntry>) -> Result<Self> {
        let mut vocab = Self::default();
        for entry in entries {
            vocab.push(entry)?;
        }
        Ok(vocab)
    }

    pub fn push(&mut self, mut entry: VocabularyEntry) -> Result<usize> {
        if entry.name.is_empty() {
            return Err(Error::InvalidVocabulary("empty class name".into()));
        }
        if self.by_name.contains_key(&entry.name) {
            return Err(Error::InvalidVocabulary(format!("duplicate class {:?}", entry.name)));
        }
        if let Some(emb) = entry.embedding.take() {
            if let Some(dim) = self.embedding_dim() {
                if emb.len() != dim {
                    return Err(Error::InvalidVocabulary(format!(
                        "embedding of {:?} has dimension {}, expected {dim}",
                        entry.name,
                        emb.len()
                    )));
                }
            }
            let norm = l2_norm(&emb);
            let emb = if (norm - 1.0).abs() <= UNIT_NORM_TOLERANCE {
                emb
            } else {
                normalized(&emb)
                    .ok_or_else(|| Error::InvalidVocabulary(format!("embedding of {:?} has zero norm", entry.name)))?
            };
            entry.embedding = Some(emb);
        }
        let id = self.entries.len();
        self.by_name.insert(entry.name.clone(), id);
        self.entries.push(entry);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[VocabularyEntry] {
        &self.entries
    }

    pub fn get(&self, id: usize) -> Option<&VocabularyEntry> {
        self.entries.get(id)
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn seen_mask(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.seen).collect()
    }

    /// Dimension shared by the embeddings present, if any.
    pub fn embedding_dim(&self) -> Option<usize> {
        self.entries.iter().find_map(|e| e.embedding.as_ref().map(Vec::len))
    }

    /// All class embeddings, failing if any class lacks one.
    pub fn embeddings(&self) -> Result<Vec<&[f32]>> {
        self.entries
            .iter()
            .map(|e| {
                e.embedding
                    .as_deref()
                    .ok_or_else(|| Error::MissingEmbeddings(format!("class {:?}", e.name)))
            })
            .collect()
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(bytes)?)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }
}

impl TryFrom<Vec<VocabularyEntry>> for Vocabulary {
    type Error = Error;

    fn try_from(entries: Vec<VocabularyEntry>) -> Result<Self> {
        Self::new(entries)
    }
}

impl From<Vocabulary> for Vec<VocabularyEntry> {
    fn from(vocab: Vocabulary) -> Self {
        vocab.entries
    }
}

/// Per-class scores in `[0, 1]` for one segment from one classification path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::InvalidValue(format!("score {bad} outside [0, 1]")));
        }
        Ok(Self(scores))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Highest-scoring class; ties resolve to the lowest class id.
    pub fn argmax(&self) -> Option<(usize, f64)> {
        self.0
            .iter()
            .copied()
            .enumerate()
            .fold(None, |best, (i, s)| match best {
                Some((_, b)) if b >= s => best,
                _ => Some((i, s)),
            })
    }
}

impl std::ops::Index<usize> for ScoreVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Blend weights of the three classification paths.
///
/// `gamma` mixes retrieval into the out-of-vocabulary score, `alpha` and
/// `beta` mix that score with the in-vocabulary one for seen and unseen
/// classes respectively.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            beta: 0.7,
            gamma: 0.3,
        }
    }
}

impl EnsembleConfig {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let cfg = Self { alpha, beta, gamma };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name}={v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_map_rejects_bad_payload() {
        assert!(DenseFeatureMap::new(2, 2, 3, 1, vec![0.0; 11]).is_err());
        assert!(DenseFeatureMap::new(1, 1, 1, 1, vec![f32::NAN]).is_err());
        assert!(DenseFeatureMap::new(0, 1, 1, 1, vec![]).is_err());
        let map = DenseFeatureMap::new(1, 2, 2, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(map.patch(0, 1), &[3.0, 4.0]);
    }

    #[test]
    fn mask_validation() {
        assert!(matches!(
            SegmentMask::new(2, 2, vec![(0, 2), (1, 1)]),
            Err(Error::OverlappingRuns { index: 1 })
        ));
        assert!(matches!(
            SegmentMask::new(2, 2, vec![(3, 2)]),
            Err(Error::RunOutOfBounds { index: 0, pixels: 4 })
        ));
        let m = SegmentMask::new(2, 2, vec![(0, 1), (2, 2)]).unwrap();
        assert_eq!(m.area(), 3);
        assert_eq!(m.pixels().collect::<Vec<_>>(), vec![0, 2, 3]);
    }

    #[test]
    fn vocabulary_json_and_invariants() {
        let json = br#"[{"name":"cat","seen":true,"embedding":[3.0,4.0]},{"name":"sky","seen":false,"thing":false}]"#;
        let vocab = Vocabulary::from_json(json).unwrap();
        assert_eq!(vocab.len(), 2);
        assert_eq!(vocab.id_of("sky"), Some(1));
        assert!(!vocab.get(1).unwrap().thing);
        let emb = vocab.get(0).unwrap().embedding.as_ref().unwrap();
        assert!((l2_norm(emb) - 1.0).abs() < 1e-6);
        assert!(matches!(vocab.embeddings(), Err(Error::MissingEmbeddings(_))));

        let dup = br#"[{"name":"a"},{"name":"a"}]"#;
        assert!(Vocabulary::from_json(dup).is_err());
        let empty_name = br#"[{"name":""}]"#;
        assert!(Vocabulary::from_json(empty_name).is_err());
        let mixed = br#"[{"name":"a","embedding":[1.0]},{"name":"b","embedding":[1.0,0.0]}]"#;
        assert!(Vocabulary::from_json(mixed).is_err());

        let back = Vocabulary::from_json(&vocab.to_json().unwrap()).unwrap();
        assert_eq!(back, vocab);
    }

    #[test]
    fn score_vector_argmax_prefers_lowest_index() {
        let s = ScoreVector::new(vec![0.2, 0.5, 0.5]).unwrap();
        assert_eq!(s.argmax(), Some((1, 0.5)));
        assert!(ScoreVector::new(vec![1.5]).is_err());
    }

    #[test]
    fn ensemble_config_bounds() {
        assert_eq!(EnsembleConfig::default(), EnsembleConfig::new(0.4, 0.7, 0.3).unwrap());
        assert!(EnsembleConfig::new(1.1, 0.0, 0.0).is_err());
    }
}
