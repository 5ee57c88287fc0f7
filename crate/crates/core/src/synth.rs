//! Seeded synthetic fixtures: Gaussian feature clusters painted into
//! rectangular segments.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featdb::{Backend, FeatureDatabase};
use crate::io::{write_feature_map, write_mask, write_vocabulary};
use crate::panoptic::{PanopticMap, SegmentInfo};
use crate::pipeline::{ImageManifest, SegmentEntry};
use crate::types::{normalized, DenseFeatureMap, FeatureRecord, SegmentMask, Vocabulary, VocabularyEntry};

/// Uniformly random unit vector.
pub fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if let Some(u) = normalized(&v) {
            return u;
        }
    }
}

/// `center` plus isotropic Gaussian noise of standard deviation `sigma`
/// per component, renormalized.
pub fn perturb(rng: &mut impl Rng, center: &[f32], sigma: f64) -> Vec<f32> {
    loop {
        let v: Vec<f32> = center
            .iter()
            .map(|&c| {
                let n: f64 = StandardNormal.sample(rng);
                (f64::from(c) + sigma * n) as f32
            })
            .collect();
        if let Some(u) = normalized(&v) {
            return u;
        }
    }
}

pub fn centroids(rng: &mut impl Rng, classes: usize, dim: usize) -> Vec<Vec<f32>> {
    (0..classes).map(|_| random_unit(rng, dim)).collect()
}

/// Classes named `class_0`, `class_1`, ... carrying the given embeddings.
pub fn vocabulary(embeddings: &[Vec<f32>], seen: impl Fn(usize) -> bool) -> Result<Vocabulary> {
    Vocabulary::new(
        embeddings
            .iter()
            .enumerate()
            .map(|(i, e)| {
                VocabularyEntry::new(format!("class_{i}"))
                    .seen(seen(i))
                    .embedding(e.clone())
            })
            .collect(),
    )
}

/// `per_class` noisy records around each centroid, inserted class by class.
pub fn cluster_database(
    rng: &mut impl Rng,
    centroids: &[Vec<f32>],
    vocab: Vocabulary,
    per_class: usize,
    sigma: f64,
    backend: Backend,
) -> Result<FeatureDatabase> {
    let dim = centroids.first().map_or(0, Vec::len);
    let mut db = FeatureDatabase::new(dim, vocab)?;
    for (label, c) in centroids.iter().enumerate() {
        for _ in 0..per_class {
            db.insert(FeatureRecord::from_unit(perturb(rng, c, sigma), label, "synthetic")?)?;
        }
    }
    db.build_index(backend)?;
    Ok(db)
}

/// Layout of a synthetic image: a grid of equal square cells, one segment each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneLayout {
    pub rows: usize,
    pub cols: usize,
    /// Cell side in patches.
    pub cell_patches: usize,
    pub patch_size: usize,
}

impl SceneLayout {
    pub fn segments(&self) -> usize {
        self.rows * self.cols
    }

    pub fn height(&self) -> usize {
        self.rows * self.cell_patches * self.patch_size
    }

    pub fn width(&self) -> usize {
        self.cols * self.cell_patches * self.patch_size
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub features: DenseFeatureMap,
    pub masks: Vec<SegmentMask>,
    pub labels: Vec<usize>,
}

impl Scene {
    /// Ground truth with one segment per cell.
    pub fn ground_truth(&self, vocab: &Vocabulary) -> Result<PanopticMap> {
        let (h, w) = (self.masks[0].height(), self.masks[0].width());
        let mut ids = vec![0u32; h * w];
        let mut segments = Vec::with_capacity(self.masks.len());
        for (i, (mask, &label)) in self.masks.iter().zip(&self.labels).enumerate() {
            let id = i as u32 + 1;
            for p in mask.pixels() {
                ids[p] = id;
            }
            segments.push(SegmentInfo {
                id,
                class_id: label as u32,
                is_thing: vocab.entries()[label].thing,
                score: 1.0,
                crowd: false,
            });
        }
        PanopticMap::new(h, w, ids, segments)
    }
}

/// One image whose cells carry one noisy centroid feature each, painted
/// over every patch of the cell.
pub fn scene(
    rng: &mut impl Rng,
    centroids: &[Vec<f32>],
    labels: &[usize],
    sigma: f64,
    layout: SceneLayout,
) -> Result<Scene> {
    assert_eq!(labels.len(), layout.segments(), "one label per cell");
    let dim = centroids[0].len();
    let (hp, wp) = (layout.rows * layout.cell_patches, layout.cols * layout.cell_patches);
    let mut data = vec![0.0f32; hp * wp * dim];
    let (h, w) = (layout.height(), layout.width());
    let cell_px = layout.cell_patches * layout.patch_size;
    let mut masks = Vec::with_capacity(labels.len());
    for (i, &label) in labels.iter().enumerate() {
        let (r, c) = (i / layout.cols, i % layout.cols);
        let feature = perturb(rng, &centroids[label], sigma);
        for pr in r * layout.cell_patches..(r + 1) * layout.cell_patches {
            for pc in c * layout.cell_patches..(c + 1) * layout.cell_patches {
                let at = (pr * wp + pc) * dim;
                data[at..at + dim].copy_from_slice(&feature);
            }
        }
        let runs = (r * cell_px..(r + 1) * cell_px)
            .map(|row| ((row * w + c * cell_px) as u32, cell_px as u32))
            .collect();
        masks.push(SegmentMask::new(h, w, runs)?);
    }
    Ok(Scene {
        features: DenseFeatureMap::new(hp, wp, dim, layout.patch_size, data)?,
        masks,
        labels: labels.to_vec(),
    })
}

/// Where class text embeddings come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextEmbeddings {
    /// The cluster centroids, so cosine scoring agrees with retrieval.
    Centroids,
    /// Independent random unit vectors, so cosine scoring is noise.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub classes: usize,
    pub dim: usize,
    pub sigma: f64,
    pub records_per_class: usize,
    pub queries: usize,
    pub seed: u64,
    pub text: TextEmbeddings,
    /// The first `seen_classes` classes are marked seen.
    pub seen_classes: usize,
    /// Every class is a thing class when set, otherwise all are stuff.
    pub things: bool,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            classes: 20,
            dim: 64,
            sigma: 0.05,
            records_per_class: 200,
            queries: 1000,
            seed: 7,
            text: TextEmbeddings::Centroids,
            seen_classes: 0,
            things: true,
        }
    }
}

/// Cell grid used for every fixture image.
pub const FIXTURE_LAYOUT: SceneLayout = SceneLayout {
    rows: 2,
    cols: 4,
    cell_patches: 2,
    patch_size: 4,
};

/// In-memory fixture: labelled record scenes and query scenes.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub vocab: Vocabulary,
    pub centroids: Vec<Vec<f32>>,
    pub records: Vec<Scene>,
    pub queries: Vec<Scene>,
}

/// Scenes holding `total` segments whose labels cycle through the classes.
fn cyclic_scenes(rng: &mut ChaCha8Rng, centroids: &[Vec<f32>], total: usize, sigma: f64) -> Result<Vec<Scene>> {
    let per = FIXTURE_LAYOUT.segments();
    let classes = centroids.len();
    (0..total.div_ceil(per))
        .map(|s| {
            let labels: Vec<usize> = (0..per).map(|j| (s * per + j) % classes).collect();
            let mut sc = scene(rng, centroids, &labels, sigma, FIXTURE_LAYOUT)?;
            let keep = per.min(total - s * per);
            sc.masks.truncate(keep);
            sc.labels.truncate(keep);
            Ok(sc)
        })
        .collect()
}

pub fn fixture(spec: &FixtureSpec) -> Result<Fixture> {
    if spec.classes == 0 || spec.dim == 0 || spec.seen_classes > spec.classes {
        return Err(Error::InvalidConfig(format!("fixture spec out of range: {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centroids = centroids(&mut rng, spec.classes, spec.dim);
    let text = match spec.text {
        TextEmbeddings::Centroids => centroids.clone(),
        TextEmbeddings::Random => (0..spec.classes).map(|_| random_unit(&mut rng, spec.dim)).collect(),
    };
    let mut vocab = Vec::with_capacity(spec.classes);
    for (i, e) in text.into_iter().enumerate() {
        vocab.push(
            VocabularyEntry::new(format!("class_{i}"))
                .seen(i < spec.seen_classes)
                .thing(spec.things)
                .embedding(e),
        );
    }
    let vocab = Vocabulary::new(vocab)?;
    let records = cyclic_scenes(&mut rng, &centroids, spec.classes * spec.records_per_class, spec.sigma)?;
    let queries = cyclic_scenes(&mut rng, &centroids, spec.queries, spec.sigma)?;
    Ok(Fixture {
        vocab,
        centroids,
        records,
        queries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixtureFiles {
    pub vocab: PathBuf,
    pub records: Vec<PathBuf>,
    pub queries: Vec<PathBuf>,
    pub ground_truth: Vec<PathBuf>,
}

fn write_scene(dir: &Path, stem: &str, sc: &Scene, vocab: &Vocabulary, labelled: bool) -> Result<PathBuf> {
    let features = format!("{stem}.dfmp");
    write_feature_map(&sc.features, dir.join(&features))?;
    let mut segments = Vec::with_capacity(sc.masks.len());
    for (j, (m, &l)) in sc.masks.iter().zip(&sc.labels).enumerate() {
        let mask = format!("{stem}_m{j}.rsmk");
        write_mask(m, dir.join(&mask))?;
        segments.push(SegmentEntry {
            mask: mask.into(),
            label: labelled.then(|| vocab.entries()[l].name.clone()),
            confidence: 1.0,
        });
    }
    let ground_truth = if labelled {
        None
    } else {
        let gt = format!("{stem}_gt.rpan");
        sc.ground_truth(vocab)?.save(dir.join(&gt))?;
        Some(gt.into())
    };
    let manifest = dir.join(format!("{stem}.json"));
    ImageManifest {
        features: features.into(),
        segments,
        ground_truth,
    }
    .save(&manifest)?;
    Ok(manifest)
}

/// Writes the fixture under `dir`: `vocab.json`, `records/` manifests with
/// labels, and `queries/` manifests with ground-truth RPAN maps.
pub fn write_fixture(dir: &Path, spec: &FixtureSpec) -> Result<FixtureFiles> {
    let fx = fixture(spec)?;
    let (rec_dir, query_dir) = (dir.join("records"), dir.join("queries"));
    for d in [dir, &rec_dir, &query_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let vocab = dir.join("vocab.json");
    write_vocabulary(&fx.vocab, &vocab)?;
    let records = fx
        .records
        .iter()
        .enumerate()
        .map(|(i, sc)| write_scene(&rec_dir, &format!("rec_{i:04}"), sc, &fx.vocab, true))
        .collect::<Result<_>>()?;
    let queries: Vec<PathBuf> = fx
        .queries
        .iter()
        .enumerate()
        .map(|(i, sc)| write_scene(&query_dir, &format!("q_{i:04}"), sc, &fx.vocab, false))
        .collect::<Result<_>>()?;
    let ground_truth = (0..queries.len())
        .map(|i| query_dir.join(format!("q_{i:04}_gt.rpan")))
        .collect();
    Ok(FixtureFiles {
        vocab,
        records,
        queries,
        ground_truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pooling::pool_segment;

    #[test]
    fn scene_pools_back_to_its_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = centroids(&mut rng, 3, 8);
        let layout = SceneLayout {
            rows: 2,
            cols: 2,
            cell_patches: 2,
            patch_size: 4,
        };
        let s = scene(&mut rng, &c, &[0, 1, 2, 1], 0.05, layout).unwrap();
        assert_eq!((s.masks[0].height(), s.masks[0].width()), (16, 16));
        for (m, &l) in s.masks.iter().zip(&s.labels) {
            assert_eq!(m.area(), 64);
            let f = pool_segment(&s.features, m).unwrap();
            let cos: f32 = f.iter().zip(&c[l]).map(|(a, b)| a * b).sum();
            assert!(cos > 0.9);
        }
        let v = vocabulary(&c, |_| false).unwrap();
        let gt = s.ground_truth(&v).unwrap();
        assert_eq!(gt.segments().len(), 4);
        assert!(gt.ids().iter().all(|&id| id > 0));
    }

    #[test]
    fn fixture_files_load_back() {
        let spec = FixtureSpec {
            classes: 3,
            dim: 8,
            records_per_class: 3,
            queries: 10,
            ..FixtureSpec::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let files = write_fixture(dir.path(), &spec).unwrap();
        assert_eq!(files.records.len(), 2);
        assert_eq!(files.queries.len(), 2);
        let records = crate::pipeline::load_images(&files.records).unwrap();
        assert_eq!(records.iter().map(|r| r.segments.len()).sum::<usize>(), 9);
        let queries = crate::pipeline::load_images(&files.queries).unwrap();
        assert_eq!(queries[1].segments.len(), 2);
        let gt = crate::pipeline::load_ground_truth(&queries).unwrap();
        assert_eq!(gt[1].segments().len(), 2);
        assert_eq!(fixture(&spec).unwrap().records[0].labels, vec![0, 1, 2, 0, 1, 2, 0, 1]);
    }
}
