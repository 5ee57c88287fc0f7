//! Segment classification: retrieval scores, text-embedding cosine scores,
//! projected in-vocabulary scores, and their blend.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featdb::{FeatureDatabase, Neighbor};
use crate::io::{put_f32s, read_file, write_file, ByteReader};
use crate::types::{EnsembleConfig, ScoreVector, Vocabulary};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;
pub const RPRJ_MAGIC: [u8; 4] = *b"RPRJ";

/// `y = matrix · x + bias`, with `matrix` row-major `d_out × d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    d_in: usize,
    d_out: usize,
    matrix: Vec<f32>,
    bias: Vec<f32>,
}

impl Affine {
    pub fn new(d_in: usize, d_out: usize, matrix: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if d_in == 0 || d_out == 0 || matrix.len() != d_in * d_out || bias.len() != d_out {
            return Err(Error::DimensionMismatch(format!(
                "affine map {d_out}x{d_in} with {} weights and {} biases",
                matrix.len(),
                bias.len()
            )));
        }
        if matrix.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("projection weights must be finite".into()));
        }
        Ok(Self {
            d_in,
            d_out,
            matrix,
            bias,
        })
    }

    pub fn identity(dim: usize) -> Self {
        let mut matrix = vec![0.0; dim * dim];
        for i in 0..dim {
            matrix[i * dim + i] = 1.0;
        }
        Self {
            d_in: dim,
            d_out: dim,
            matrix,
            bias: vec![0.0; dim],
        }
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn apply(&self, x: &[f32]) -> Result<Vec<f64>> {
        if x.len() != self.d_in {
            return Err(Error::DimMismatch {
                expected: self.d_in,
                found: x.len(),
            });
        }
        Ok(self
            .matrix
            .chunks_exact(self.d_in)
            .zip(&self.bias)
            .map(|(row, &b)| {
                row.iter()
                    .zip(x)
                    .map(|(&w, &v)| f64::from(w) * f64::from(v))
                    .sum::<f64>()
                    + f64::from(b)
            })
            .collect())
    }
}

/// Linear projections into the in-vocabulary embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights {
    pub image: Affine,
    pub text: Affine,
}

#[derive(Serialize, Deserialize)]
struct ProjectionHeader {
    d_in: usize,
    d_out: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    d_in_text: Option<usize>,
}

impl ProjectionWeights {
    pub fn identity(dim: usize) -> Self {
        Self {
            image: Affine::identity(dim),
            text: Affine::identity(dim),
        }
    }

    pub fn new(image: Affine, text: Affine) -> Result<Self> {
        if image.d_out != text.d_out {
            return Err(Error::DimensionMismatch(format!(
                "image projection emits {} dims, text projection {}",
                image.d_out, text.d_out
            )));
        }
        Ok(Self { image, text })
    }

    /// `"RPRJ" | header_len u32 | JSON {d_in, d_out[, d_in_text]} |
    /// image matrix | image bias | text matrix | text bias` (all `f32` LE).
    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = ProjectionHeader {
            d_in: self.image.d_in,
            d_out: self.image.d_out,
            d_in_text: (self.text.d_in != self.image.d_in).then_some(self.text.d_in),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(&RPRJ_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for a in [&self.image, &self.text] {
            put_f32s(&mut out, &a.matrix);
            put_f32s(&mut out, &a.bias);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "RPRJ");
        r.magic(RPRJ_MAGIC)?;
        let len = r.u32()? as usize;
        let header: ProjectionHeader = serde_json::from_slice(r.take(len)?)?;
        let d_in_text = header.d_in_text.unwrap_or(header.d_in);
        let mut affine = |d_in: usize| -> Result<Affine> {
            let count = d_in
                .checked_mul(header.d_out)
                .ok_or_else(|| Error::CorruptPayload("projection extents overflow".into()))?;
            let matrix = r.f32s(count)?;
            let bias = r.f32s(header.d_out)?;
            Affine::new(d_in, header.d_out, matrix, bias)
        };
        let image = affine(header.d_in)?;
        let text = affine(d_in_text)?;
        if !r.is_empty() {
            return Err(Error::CorruptPayload("trailing bytes in RPRJ file".into()));
        }
        Self::new(image, text)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&read_file(path.as_ref())?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.encode()?)
    }
}

/// Scores from all three paths and their blends for one segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierOutput {
    pub s_clip: ScoreVector,
    pub s_ret: ScoreVector,
    pub s_iv: ScoreVector,
    pub s_oov: ScoreVector,
    pub s_final: ScoreVector,
}

/// Retrieval scores with neighbor labels already in the target vocabulary.
pub fn retrieval_scores(neighbors: &[Neighbor], vocab_size: usize) -> Result<ScoreVector> {
    if let Some(n) = neighbors.iter().find(|n| n.label_id >= vocab_size) {
        return Err(Error::UnknownLabel(n.label_id));
    }
    retrieval_scores_mapped(neighbors, vocab_size, Some)
}

/// Retrieval scores over the target vocabulary.
///
/// Distances are min-max normalized over the neighbors given and turned
/// into similarities `1 - normalized`; a class scores the best similarity
/// among its neighbors and 0 if it has none. When all distances are equal
/// every similarity is 1. `map` translates a neighbor's label into a target
/// class; neighbors it rejects still take part in the normalization.
pub fn retrieval_scores_mapped(
    neighbors: &[Neighbor],
    vocab_size: usize,
    map: impl Fn(usize) -> Option<usize>,
) -> Result<ScoreVector> {
    if neighbors.is_empty() {
        return Err(Error::NoNeighbors);
    }
    let (min, max) = neighbors
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), n| {
            let d = f64::from(n.distance);
            (lo.min(d), hi.max(d))
        });
    let span = max - min;
    let mut scores = vec![0.0f64; vocab_size];
    for n in neighbors {
        let Some(class) = map(n.label_id).filter(|&c| c < vocab_size) else {
            continue;
        };
        let sim = if span > 0.0 {
            1.0 - (f64::from(n.distance) - min) / span
        } else {
            1.0
        };
        scores[class] = scores[class].max(sim.clamp(0.0, 1.0));
    }
    ScoreVector::new(scores)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Numerically stable softmax of `values / temperature`.
pub fn softmax(values: &[f64], temperature: f64) -> Result<ScoreVector> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidValue(format!(
            "temperature {temperature} must be positive"
        )));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    ScoreVector::new(exps.iter().map(|e| (e / total).clamp(0.0, 1.0)).collect())
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

fn softmax_cosines(feature: &[f64], classes: &[Vec<f64>], temperature: f64) -> Result<ScoreVector> {
    if feature.iter().all(|&x| x == 0.0) {
        return Err(Error::DegenerateFeature);
    }
    let cos: Vec<f64> = classes.iter().map(|c| cosine(feature, c)).collect();
    if cos.iter().any(|c| !c.is_finite()) {
        return Err(Error::DegenerateFeature);
    }
    softmax(&cos, temperature)
}

/// Softmax over `cosine(feature, class) / temperature`.
pub fn cosine_scores(feature: &[f32], class_embeddings: &[&[f32]], temperature: f64) -> Result<ScoreVector> {
    if class_embeddings.is_empty() {
        return Err(Error::MissingEmbeddings("no class embeddings".into()));
    }
    let classes: Vec<Vec<f64>> = class_embeddings
        .iter()
        .map(|e| {
            if e.len() != feature.len() {
                Err(Error::DimMismatch {
                    expected: feature.len(),
                    found: e.len(),
                })
            } else {
                Ok(widen(e))
            }
        })
        .collect::<Result<_>>()?;
    softmax_cosines(&widen(feature), &classes, temperature)
}

fn project_classes(vocab: &Vocabulary, weights: &ProjectionWeights) -> Result<Vec<Vec<f64>>> {
    vocab.embeddings()?.iter().map(|e| weights.text.apply(e)).collect()
}

/// Cosine scores after projecting the feature and the class embeddings
/// through their affine maps.
pub fn in_vocab_scores(
    feature: &[f32],
    vocab: &Vocabulary,
    weights: &ProjectionWeights,
    temperature: f64,
) -> Result<ScoreVector> {
    let classes = project_classes(vocab, weights)?;
    softmax_cosines(&weights.image.apply(feature)?, &classes, temperature)
}

/// Blends the three paths. Returns `(s_oov, s_final)`:
///
/// ```text
/// s_oov   = s_ret * gamma + s_clip * (1 - gamma)
/// s_final = s_oov * alpha + s_iv * (1 - alpha)   for seen classes
/// s_final = s_oov * beta  + s_iv * (1 - beta)    otherwise
/// ```
pub fn ensemble(
    s_clip: &ScoreVector,
    s_ret: &ScoreVector,
    s_iv: &ScoreVector,
    seen: &[bool],
    cfg: &EnsembleConfig,
) -> Result<(ScoreVector, ScoreVector)> {
    let n = s_clip.len();
    if s_ret.len() != n || s_iv.len() != n || seen.len() != n {
        return Err(Error::LengthMismatch(format!(
            "clip {n}, retrieval {}, in-vocab {}, seen {}",
            s_ret.len(),
            s_iv.len(),
            seen.len()
        )));
    }
    cfg.validate()?;
    let mut oov = Vec::with_capacity(n);
    let mut fin = Vec::with_capacity(n);
    for i in 0..n {
        let o = s_ret[i] * cfg.gamma + s_clip[i] * (1.0 - cfg.gamma);
        let w = if seen[i] { cfg.alpha } else { cfg.beta };
        let f = o * w + s_iv[i] * (1.0 - w);
        oov.push(o.clamp(0.0, 1.0));
        fin.push(f.clamp(0.0, 1.0));
    }
    Ok((ScoreVector::new(oov)?, ScoreVector::new(fin)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub ensemble: EnsembleConfig,
    pub k: usize,
    pub temperature: f64,
}

impl Default for ClassifierParams {
    fn default() -> Self {
        Self {
            ensemble: EnsembleConfig::default(),
            k: crate::featdb::DEFAULT_K,
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

/// The three unblended path scores of one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct PathScores {
    pub s_clip: ScoreVector,
    pub s_ret: ScoreVector,
    pub s_iv: ScoreVector,
}

impl PathScores {
    pub fn blend(&self, seen: &[bool], cfg: &EnsembleConfig) -> Result<ClassifierOutput> {
        let (s_oov, s_final) = ensemble(&self.s_clip, &self.s_ret, &self.s_iv, seen, cfg)?;
        Ok(ClassifierOutput {
            s_clip: self.s_clip.clone(),
            s_ret: self.s_ret.clone(),
            s_iv: self.s_iv.clone(),
            s_oov,
            s_final,
        })
    }
}

/// Classifies segment features against one database and target vocabulary.
///
/// Database labels are matched to target classes by name; retrieved
/// records of classes outside the target vocabulary still shape the
/// distance normalization but score nothing.
#[derive(Debug)]
pub struct Classifier<'a> {
    db: &'a FeatureDatabase,
    weights: &'a ProjectionWeights,
    params: ClassifierParams,
    seen: Vec<bool>,
    label_map: Vec<Option<usize>>,
    clip_classes: Vec<Vec<f64>>,
    iv_classes: Vec<Vec<f64>>,
}

impl<'a> Classifier<'a> {
    pub fn new(
        db: &'a FeatureDatabase,
        vocab: &Vocabulary,
        weights: &'a ProjectionWeights,
        params: ClassifierParams,
    ) -> Result<Self> {
        params.ensemble.validate()?;
        if params.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if !(params.temperature > 0.0 && params.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "temperature {} must be positive",
                params.temperature
            )));
        }
        if vocab.is_empty() {
            return Err(Error::InvalidVocabulary("target vocabulary is empty".into()));
        }
        let clip_classes: Vec<Vec<f64>> = vocab.embeddings()?.iter().map(|e| widen(e)).collect();
        if clip_classes[0].len() != db.dim() {
            return Err(Error::DimMismatch {
                expected: db.dim(),
                found: clip_classes[0].len(),
            });
        }
        if weights.image.d_in() != db.dim() {
            return Err(Error::DimMismatch {
                expected: db.dim(),
                found: weights.image.d_in(),
            });
        }
        let iv_classes = project_classes(vocab, weights)?;
        let label_map = db.vocabulary().names().map(|name| vocab.id_of(name)).collect();
        Ok(Self {
            db,
            weights,
            params,
            seen: vocab.seen_mask(),
            label_map,
            clip_classes,
            iv_classes,
        })
    }

    pub fn params(&self) -> &ClassifierParams {
        &self.params
    }

    pub fn seen(&self) -> &[bool] {
        &self.seen
    }

    pub fn path_scores(&self, feature: &[f32]) -> Result<PathScores> {
        if feature.len() != self.db.dim() {
            return Err(Error::DimMismatch {
                expected: self.db.dim(),
                found: feature.len(),
            });
        }
        let neighbors = self.db.query_knn(feature, self.params.k)?;
        let s_ret = retrieval_scores_mapped(&neighbors, self.seen.len(), |l| {
            self.label_map.get(l).copied().flatten()
        })?;
        let s_clip = softmax_cosines(&widen(feature), &self.clip_classes, self.params.temperature)?;
        let s_iv = softmax_cosines(
            &self.weights.image.apply(feature)?,
            &self.iv_classes,
            self.params.temperature,
        )?;
        Ok(PathScores { s_clip, s_ret, s_iv })
    }

    pub fn classify(&self, feature: &[f32]) -> Result<ClassifierOutput> {
        self.path_scores(feature)?.blend(&self.seen, &self.params.ensemble)
    }
}

/// One-shot classification of a single segment feature.
pub fn classify_segment(
    feature: &[f32],
    db: &FeatureDatabase,
    vocab: &Vocabulary,
    weights: &ProjectionWeights,
    params: ClassifierParams,
) -> Result<ClassifierOutput> {
    Classifier::new(db, vocab, weights, params)?.classify(feature)
}
