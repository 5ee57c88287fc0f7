//! Masked average pooling of a dense feature map.
//!
//! A pixel-resolution mask is first reduced to a per-patch coverage grid
//! (fraction of each patch's pixels inside the mask); the pooled feature is
//! the coverage-weighted mean of patch features, L2-normalized.

use crate::error::{Error, Result};
use crate::types::{DenseFeatureMap, SegmentMask};

/// Fraction of each patch covered by a mask, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageMap {
    height_patches: usize,
    width_patches: usize,
    weights: Vec<f64>,
}

impl CoverageMap {
    pub fn new(height_patches: usize, width_patches: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != height_patches * width_patches {
            return Err(Error::DimensionMismatch(format!(
                "coverage {height_patches}x{width_patches} with {} weights",
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::InvalidValue(format!("coverage weight {w} outside [0, 1]")));
        }
        Ok(Self {
            height_patches,
            width_patches,
            weights,
        })
    }

    pub fn height_patches(&self) -> usize {
        self.height_patches
    }

    pub fn width_patches(&self) -> usize {
        self.width_patches
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.width_patches + col]
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Reduces a mask to patch resolution.
///
/// When the image size is not a multiple of `patch_size` the last row and
/// column of patches are partial, and their weights are relative to the
/// pixels they actually contain.
pub fn mask_to_coverage(mask: &SegmentMask, patch_size: usize) -> Result<CoverageMap> {
    if patch_size == 0 {
        return Err(Error::InvalidValue("patch size must be positive".into()));
    }
    let (h, w) = (mask.height(), mask.width());
    let hp = h.div_ceil(patch_size);
    let wp = w.div_ceil(patch_size);
    let mut counts = vec![0u32; hp * wp];
    for (start, len) in mask.runs().iter().map(|&(s, l)| (s as usize, l as usize)) {
        // Walk the run row segment by row segment, then patch column by patch column.
        let mut pos = start;
        let end = start + len;
        while pos < end {
            let row = pos / w;
            let row_end = end.min((row + 1) * w);
            let mut col = pos % w;
            let last_col = row_end - row * w;
            let prow = row / patch_size;
            while col < last_col {
                let pcol = col / patch_size;
                let stop = last_col.min((pcol + 1) * patch_size);
                counts[prow * wp + pcol] += (stop - col) as u32;
                col = stop;
            }
            pos = row_end;
        }
    }
    let extent = |index: usize, total: usize| patch_size.min(total - index * patch_size);
    let weights = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let area = extent(i / wp, h) * extent(i % wp, w);
            f64::from(c) / area as f64
        })
        .collect();
    CoverageMap::new(hp, wp, weights)
}

/// Coverage-weighted mean feature, L2-normalized.
pub fn mask_pool(map: &DenseFeatureMap, coverage: &CoverageMap) -> Result<Vec<f32>> {
    if coverage.height_patches != map.height_patches() || coverage.width_patches != map.width_patches() {
        return Err(Error::DimensionMismatch(format!(
            "coverage {}x{} vs feature map {}x{}",
            coverage.height_patches,
            coverage.width_patches,
            map.height_patches(),
            map.width_patches()
        )));
    }
    let total = coverage.total();
    if total <= 0.0 {
        return Err(Error::EmptyCoverage);
    }
    let dim = map.dim();
    let mut acc = vec![0.0f64; dim];
    for (patch, &w) in map.data().chunks_exact(dim).zip(&coverage.weights) {
        if w == 0.0 {
            continue;
        }
        for (a, &f) in acc.iter_mut().zip(patch) {
            *a += w * f64::from(f);
        }
    }
    for a in &mut acc {
        *a /= total;
    }
    let norm = acc.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::DegenerateFeature);
    }
    Ok(acc.iter().map(|a| (a / norm) as f32).collect())
}

/// Pools one segment, checking the mask belongs to the map's image.
pub fn pool_segment(map: &DenseFeatureMap, mask: &SegmentMask) -> Result<Vec<f32>> {
    let p = map.patch_size();
    if mask.height().div_ceil(p) != map.height_patches() || mask.width().div_ceil(p) != map.width_patches() {
        return Err(Error::DimensionMismatch(format!(
            "mask {}x{} does not fit a {}x{} map with patch size {p}",
            mask.height(),
            mask.width(),
            map.height_patches(),
            map.width_patches()
        )));
    }
    mask_pool(map, &mask_to_coverage(mask, p)?)
}
