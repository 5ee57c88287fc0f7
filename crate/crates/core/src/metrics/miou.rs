use serde::Serialize;

use crate::error::{Error, Result};
use crate::panoptic::VOID;

/// Pixel intersection and union counts for one class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IouTally {
    pub intersection: u64,
    pub union: u64,
    /// Ground-truth pixels of the class.
    pub gt_pixels: u64,
}

impl IouTally {
    pub fn merge(&mut self, other: &IouTally) {
        self.intersection += other.intersection;
        self.union += other.union;
        self.gt_pixels += other.gt_pixels;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanIou {
    /// `None` for classes absent from the ground truth.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

impl MeanIou {
    pub fn from_tallies(tallies: &[IouTally]) -> Self {
        let per_class: Vec<Option<f64>> = tallies
            .iter()
            .map(|t| (t.gt_pixels > 0).then(|| t.intersection as f64 / t.union as f64))
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        Self { per_class, miou }
    }
}

/// Counts over pixels whose ground truth is not void.
pub fn iou_tally(pred: &[u32], gt: &[u32], num_classes: usize) -> Result<Vec<IouTally>> {
    if pred.len() != gt.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predicted pixels vs {} ground-truth pixels",
            pred.len(),
            gt.len()
        )));
    }
    let mut t = vec![IouTally::default(); num_classes];
    let in_range = |c: u32| -> Result<Option<usize>> {
        match c {
            VOID => Ok(None),
            c if (c as usize) < num_classes => Ok(Some(c as usize)),
            c => Err(Error::VocabMismatch(format!(
                "class id {c} outside a {num_classes}-class vocabulary"
            ))),
        }
    };
    for (&p, &g) in pred.iter().zip(gt) {
        let Some(g) = in_range(g)? else {
            continue;
        };
        let p = in_range(p)?;
        t[g].gt_pixels += 1;
        t[g].union += 1;
        match p {
            Some(p) if p == g => t[g].intersection += 1,
            Some(p) => t[p].union += 1,
            None => {}
        }
    }
    Ok(t)
}

pub fn mean_iou(pred: &[u32], gt: &[u32], num_classes: usize) -> Result<MeanIou> {
    Ok(MeanIou::from_tallies(&iou_tally(pred, gt, num_classes)?))
}
