//! File-level operations: building a database from record manifests,
//! classifying query images, scoring and sweeping blend weights.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{Classifier, ClassifierOutput, PathScores};
use crate::error::{Error, Result};
use crate::featdb::{Backend, FeatureDatabase};
use crate::io::{read_feature_map, read_file, read_mask, write_file};
use crate::metrics::{self, MetricsReport};
use crate::panoptic::{assemble, AssembleConfig, MaskProposal, PanopticMap};
use crate::pooling::pool_segment;
use crate::types::{DenseFeatureMap, EnsembleConfig, FeatureRecord, ScoreVector, SegmentMask, Vocabulary};

/// One image on disk: its feature map and segment masks. Paths are relative
/// to the manifest unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageManifest {
    pub features: PathBuf,
    #[serde(default)]
    pub segments: Vec<SegmentEntry>,
    /// Ground-truth panoptic map (RPAN), used by `sweep`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentEntry {
    pub mask: PathBuf,
    /// Class name; required for database records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default = "full_confidence")]
    pub confidence: f64,
}

fn full_confidence() -> f64 {
    1.0
}

impl ImageManifest {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &serde_json::to_vec_pretty(self)?)
    }
}

#[derive(Debug, Clone)]
pub struct SegmentInput {
    pub mask_path: PathBuf,
    pub mask: SegmentMask,
    pub label: Option<String>,
    pub confidence: f64,
}

/// A manifest with every referenced file loaded and checked.
#[derive(Debug, Clone)]
pub struct ImageInput {
    pub source: PathBuf,
    pub features: DenseFeatureMap,
    pub segments: Vec<SegmentInput>,
    pub ground_truth: Option<PathBuf>,
}

impl ImageInput {
    /// Image size shared by the masks, if there are any.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.segments.first().map(|s| (s.mask.height(), s.mask.width()))
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads a manifest file and the files it names.
pub fn load_image(manifest_path: &Path) -> Result<ImageInput> {
    let manifest = ImageManifest::from_json(&read_file(manifest_path)?)?;
    let base = manifest_path.parent().unwrap_or(Path::new(""));
    load_manifest(&manifest, base, manifest_path)
}

/// Loads the files of a manifest, resolving relative paths against `base`.
/// Every mask must fit the feature map.
pub fn load_manifest(manifest: &ImageManifest, base: &Path, source: &Path) -> Result<ImageInput> {
    let features = read_feature_map(resolve(base, &manifest.features))?;
    let p = features.patch_size();
    let mut segments = Vec::with_capacity(manifest.segments.len());
    for entry in &manifest.segments {
        let mask_path = resolve(base, &entry.mask);
        let mask = read_mask(&mask_path)?;
        if mask.height().div_ceil(p) != features.height_patches()
            || mask.width().div_ceil(p) != features.width_patches()
        {
            return Err(Error::DimensionMismatch(format!(
                "{}: mask {}x{} does not fit a {}x{} feature map with patch size {p}",
                mask_path.display(),
                mask.height(),
                mask.width(),
                features.height_patches(),
                features.width_patches()
            )));
        }
        if !(0.0..=1.0).contains(&entry.confidence) {
            return Err(Error::InvalidValue(format!(
                "{}: confidence {} outside [0, 1]",
                mask_path.display(),
                entry.confidence
            )));
        }
        segments.push(SegmentInput {
            mask_path,
            mask,
            label: entry.label.clone(),
            confidence: entry.confidence,
        });
    }
    if let Some(first) = segments.first() {
        let size = (first.mask.height(), first.mask.width());
        if segments.iter().any(|s| (s.mask.height(), s.mask.width()) != size) {
            return Err(Error::MixedDimensions);
        }
    }
    Ok(ImageInput {
        source: source.to_path_buf(),
        features,
        segments,
        ground_truth: manifest.ground_truth.as_ref().map(|g| resolve(base, g)),
    })
}

pub fn load_images(paths: &[PathBuf]) -> Result<Vec<ImageInput>> {
    paths.par_iter().map(|p| load_image(p)).collect()
}

/// Pools every labelled segment into a database over `vocab` and builds
/// its index. Records keep input order; each is tagged with its manifest.
pub fn build_database(images: &[ImageInput], vocab: &Vocabulary, backend: Backend) -> Result<FeatureDatabase> {
    let Some(first) = images.first() else {
        return Err(Error::EmptyDatabase);
    };
    let dim = first.features.dim();
    let pooled: Vec<Vec<FeatureRecord>> = images
        .par_iter()
        .map(|img| {
            if img.features.dim() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    found: img.features.dim(),
                });
            }
            let tag = img.source.display().to_string();
            img.segments
                .iter()
                .map(|s| {
                    let name = s.label.as_deref().ok_or_else(|| {
                        Error::InvalidValue(format!("{}: record segment has no label", s.mask_path.display()))
                    })?;
                    let label = vocab
                        .id_of(name)
                        .ok_or_else(|| Error::InvalidVocabulary(format!("label {name:?} is not in the vocabulary")))?;
                    FeatureRecord::new(pool_segment(&img.features, &s.mask)?, label, tag.clone())
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut db = FeatureDatabase::new(dim, vocab.clone())?;
    for record in pooled.into_iter().flatten() {
        db.insert(record)?;
    }
    db.build_index(backend)?;
    Ok(db)
}

/// Classification result of one segment; `error` is set when the segment
/// could not be scored (for example a mask that covers no patch).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentOutcome {
    pub index: usize,
    pub mask: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_id: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<ClassifierOutput>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Per-segment errors that are reported instead of aborting the image.
fn is_segment_local(e: &Error) -> bool {
    matches!(e, Error::EmptyCoverage | Error::DegenerateFeature)
}

/// A per-segment result whose failure is kept as its message.
type Scored<T> = std::result::Result<T, String>;

fn segment_paths(classifier: &Classifier<'_>, img: &ImageInput) -> Result<Vec<Scored<PathScores>>> {
    img.segments
        .iter()
        .map(
            |s| match pool_segment(&img.features, &s.mask).and_then(|f| classifier.path_scores(&f)) {
                Err(e) if is_segment_local(&e) => Ok(Err(e.to_string())),
                Err(e) => Err(e),
                Ok(p) => Ok(Ok(p)),
            },
        )
        .collect()
}

fn outcomes(img: &ImageInput, blended: &[Scored<ClassifierOutput>], vocab: &Vocabulary) -> Vec<SegmentOutcome> {
    img.segments
        .iter()
        .zip(blended)
        .enumerate()
        .map(|(index, (s, r))| {
            let mask = s.mask_path.display().to_string();
            match r {
                Ok(out) => {
                    let best = out.s_final.argmax();
                    SegmentOutcome {
                        index,
                        mask,
                        class_id: best.map(|b| b.0),
                        class_name: best.map(|b| vocab.entries()[b.0].name.clone()),
                        score: best.map(|b| b.1),
                        scores: Some(out.clone()),
                        error: None,
                    }
                }
                Err(e) => SegmentOutcome {
                    index,
                    mask,
                    class_id: None,
                    class_name: None,
                    score: None,
                    scores: None,
                    error: Some(e.clone()),
                },
            }
        })
        .collect()
}

fn blend_all(
    paths: &[Scored<PathScores>],
    seen: &[bool],
    cfg: &EnsembleConfig,
) -> Result<Vec<Scored<ClassifierOutput>>> {
    paths
        .iter()
        .map(|p| match p {
            Ok(p) => p.blend(seen, cfg).map(Ok),
            Err(e) => Ok(Err(e.clone())),
        })
        .collect()
}

fn assemble_image(
    img: &ImageInput,
    blended: &[Scored<ClassifierOutput>],
    vocab: &Vocabulary,
    cfg: &AssembleConfig,
) -> Result<Option<PanopticMap>> {
    let Some((h, w)) = img.image_size() else {
        return Ok(None);
    };
    let mut proposals = Vec::new();
    let mut scores: Vec<ScoreVector> = Vec::new();
    for (s, r) in img.segments.iter().zip(blended) {
        if let Ok(out) = r {
            proposals.push(MaskProposal::new(s.mask.clone(), s.confidence)?);
            scores.push(out.s_final.clone());
        }
    }
    assemble(h, w, &proposals, &scores, vocab, cfg).map(Some)
}

/// Classified segments of one image and, when it has masks, the assembled
/// panoptic map.
#[derive(Debug, Clone)]
pub struct ImageResult {
    pub segments: Vec<SegmentOutcome>,
    pub panoptic: Option<PanopticMap>,
}

pub fn classify_image(
    classifier: &Classifier<'_>,
    img: &ImageInput,
    vocab: &Vocabulary,
    cfg: &AssembleConfig,
) -> Result<ImageResult> {
    let paths = segment_paths(classifier, img)?;
    let blended = blend_all(&paths, classifier.seen(), &classifier.params().ensemble)?;
    Ok(ImageResult {
        segments: outcomes(img, &blended, vocab),
        panoptic: assemble_image(img, &blended, vocab, cfg)?,
    })
}

/// Classifies images in parallel; results keep input order.
pub fn classify_images(
    classifier: &Classifier<'_>,
    images: &[ImageInput],
    vocab: &Vocabulary,
    cfg: &AssembleConfig,
) -> Result<Vec<ImageResult>> {
    images
        .par_iter()
        .map(|img| classify_image(classifier, img, vocab, cfg))
        .collect()
}

/// Loads each image's ground-truth map.
pub fn load_ground_truth(images: &[ImageInput]) -> Result<Vec<PanopticMap>> {
    images
        .iter()
        .map(|img| {
            let path = img
                .ground_truth
                .as_ref()
                .ok_or_else(|| Error::InvalidValue(format!("{} has no ground_truth entry", img.source.display())))?;
            PanopticMap::load(path)
        })
        .collect()
}

/// Empty prediction for images without masks.
fn prediction_or_empty(pred: Option<PanopticMap>, gt: &PanopticMap) -> Result<PanopticMap> {
    match pred {
        Some(p) => Ok(p),
        None => PanopticMap::empty(gt.height(), gt.width()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub miou: f64,
    pub map: f64,
}

/// Every combination of the given weights, alpha slowest and gamma fastest.
pub fn grid(alphas: &[f64], betas: &[f64], gammas: &[f64]) -> Result<Vec<EnsembleConfig>> {
    let mut out = Vec::with_capacity(alphas.len() * betas.len() * gammas.len());
    for &a in alphas {
        for &b in betas {
            for &g in gammas {
                out.push(EnsembleConfig::new(a, b, g)?);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidConfig("empty sweep grid".into()));
    }
    Ok(out)
}

/// Evaluates each blend configuration on fixed inputs. Path scores are
/// computed once; rows follow the order of `configs`.
pub fn sweep(
    classifier: &Classifier<'_>,
    images: &[ImageInput],
    ground_truth: &[PanopticMap],
    vocab: &Vocabulary,
    configs: &[EnsembleConfig],
    assemble_cfg: &AssembleConfig,
) -> Result<Vec<SweepRow>> {
    if images.len() != ground_truth.len() {
        return Err(Error::LengthMismatch(format!(
            "{} images for {} ground-truth maps",
            images.len(),
            ground_truth.len()
        )));
    }
    let paths: Vec<Vec<Scored<PathScores>>> = images
        .par_iter()
        .map(|img| segment_paths(classifier, img))
        .collect::<Result<_>>()?;
    configs
        .iter()
        .map(|cfg| {
            let preds: Vec<PanopticMap> = images
                .par_iter()
                .zip(&paths)
                .zip(ground_truth)
                .map(|((img, p), gt)| {
                    let blended = blend_all(p, classifier.seen(), cfg)?;
                    prediction_or_empty(assemble_image(img, &blended, vocab, assemble_cfg)?, gt)
                })
                .collect::<Result<_>>()?;
            let r = metrics::evaluate(&preds, ground_truth, vocab)?;
            Ok(SweepRow {
                alpha: cfg.alpha,
                beta: cfg.beta,
                gamma: cfg.gamma,
                pq: r.pq,
                sq: r.sq,
                rq: r.rq,
                miou: r.miou,
                map: r.map,
            })
        })
        .collect()
}

/// Scores prediction files against ground-truth files, pairwise.
pub fn evaluate_files(pred: &[PathBuf], gt: &[PathBuf], vocab: &Vocabulary) -> Result<MetricsReport> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch(format!(
            "{} prediction files for {} ground-truth files",
            pred.len(),
            gt.len()
        )));
    }
    let load = |paths: &[PathBuf]| -> Result<Vec<PanopticMap>> { paths.par_iter().map(PanopticMap::load).collect() };
    metrics::evaluate(&load(pred)?, &load(gt)?, vocab)
}

/// Deterministic color for a class id.
pub fn class_color(class_id: u32) -> [u8; 3] {
    let mut x = u64::from(class_id).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x ^= x >> 29;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 32;
    // keep colors away from black, which marks void
    [(x as u8) | 0x40, ((x >> 8) as u8) | 0x40, ((x >> 16) as u8) | 0x40]
}

/// Renders a panoptic map as an RGB image: class colors, void in black,
/// segment borders darkened.
pub fn render_overlay(map: &PanopticMap) -> image::RgbImage {
    let (h, w) = (map.height(), map.width());
    let ids = map.ids();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (r, c) = (y as usize, x as usize);
        let id = ids[r * w + c];
        let Some(seg) = map.segment(id) else {
            return image::Rgb([0, 0, 0]);
        };
        let mut rgb = class_color(seg.class_id);
        let border = (c + 1 < w && ids[r * w + c + 1] != id) || (r + 1 < h && ids[(r + 1) * w + c] != id);
        if border {
            rgb = rgb.map(|v| v / 2);
        }
        image::Rgb(rgb)
    })
}

pub fn save_overlay(map: &PanopticMap, path: &Path) -> Result<()> {
    let img = render_overlay(map);
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Internal(format!("png encoding failed: {e}")))?;
    write_file(path, &bytes)
}
