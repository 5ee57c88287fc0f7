use serde::Serialize;

use crate::error::{Error, Result};
use crate::panoptic::PanopticMap;
use crate::types::SegmentMask;

pub const NUM_IOU_THRESHOLDS: usize = 10;
const RECALL_POINTS: usize = 101;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> [f64; NUM_IOU_THRESHOLDS] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub mask: SegmentMask,
    pub class_id: u32,
    /// Detection confidence; ignored for ground truth.
    pub score: f64,
}

/// Thing segments of a panoptic map as instances; crowd regions are skipped.
pub fn instances(map: &PanopticMap) -> Vec<Instance> {
    map.segments()
        .iter()
        .filter(|s| s.is_thing && !s.crowd)
        .map(|s| Instance {
            mask: map.segment_mask(s.id),
            class_id: s.class_id,
            score: s.score,
        })
        .collect()
}

/// Pixel count shared by two run-length masks of the same size.
pub fn intersection(a: &SegmentMask, b: &SegmentMask) -> u64 {
    let (ra, rb) = (a.runs(), b.runs());
    let (mut i, mut j, mut total) = (0, 0, 0u64);
    while i < ra.len() && j < rb.len() {
        let (s1, e1) = (ra[i].0, ra[i].0 + ra[i].1);
        let (s2, e2) = (rb[j].0, rb[j].0 + rb[j].1);
        let lo = s1.max(s2);
        let hi = e1.min(e2);
        if hi > lo {
            total += u64::from(hi - lo);
        }
        if e1 <= e2 {
            i += 1;
        } else {
            j += 1;
        }
    }
    total
}

pub fn mask_iou(a: &SegmentMask, b: &SegmentMask) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() as u64 + b.area() as u64 - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Detections of one class across images: score plus a TP bit per threshold.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ApTally {
    pub num_gt: u64,
    pub detections: Vec<(f64, u16)>,
}

impl ApTally {
    pub fn merge(&mut self, other: &ApTally) {
        self.num_gt += other.num_gt;
        self.detections.extend_from_slice(&other.detections);
    }

    /// 101-point interpolated AP per threshold, `None` without ground truth.
    ///
    /// Precision and recall are read at score-group boundaries, so detections
    /// sharing a score count together regardless of their order.
    pub fn average_precisions(&self) -> Option<[f64; NUM_IOU_THRESHOLDS]> {
        if self.num_gt == 0 {
            return None;
        }
        let mut dets = self.detections.clone();
        dets.sort_by(|a, b| b.0.total_cmp(&a.0));
        Some(std::array::from_fn(|t| {
            let mut recall = Vec::new();
            let mut precision = Vec::new();
            let (mut tp, mut fp) = (0u64, 0u64);
            for (i, &(score, bits)) in dets.iter().enumerate() {
                if bits >> t & 1 == 1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
                if dets.get(i + 1).is_none_or(|next| next.0 != score) {
                    recall.push(tp as f64 / self.num_gt as f64);
                    precision.push(tp as f64 / (tp + fp) as f64);
                }
            }
            for i in (1..precision.len()).rev() {
                precision[i - 1] = precision[i - 1].max(precision[i]);
            }
            let mut sum = 0.0;
            let mut k = 0;
            for r in 0..RECALL_POINTS {
                let target = r as f64 / (RECALL_POINTS - 1) as f64;
                while k < recall.len() && recall[k] < target {
                    k += 1;
                }
                if k == recall.len() {
                    break;
                }
                sum += precision[k];
            }
            sum / RECALL_POINTS as f64
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskAp {
    /// Mean AP over thresholds per class; `None` without ground truth.
    pub per_class: Vec<Option<f64>>,
    pub map: f64,
}

impl MaskAp {
    pub fn from_tallies(tallies: &[ApTally]) -> Self {
        let per_class: Vec<Option<f64>> = tallies
            .iter()
            .map(|t| {
                t.average_precisions()
                    .map(|aps| aps.iter().sum::<f64>() / NUM_IOU_THRESHOLDS as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let map = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        Self { per_class, map }
    }
}

/// Per-class detection tallies for one image.
///
/// At each threshold, predictions are visited by descending score (ties by
/// input order) and each takes the unmatched ground-truth instance of its
/// class with the highest IoU, provided that IoU reaches the threshold.
pub fn ap_tally(pred: &[Instance], gt: &[Instance], num_classes: usize) -> Result<Vec<ApTally>> {
    let dims = pred.iter().chain(gt).map(|i| (i.mask.height(), i.mask.width()));
    if let Some(first) = dims.clone().next() {
        if dims.into_iter().any(|d| d != first) {
            return Err(Error::DimensionMismatch("instances differ in image size".into()));
        }
    }
    if let Some(i) = pred.iter().chain(gt).find(|i| i.class_id as usize >= num_classes) {
        return Err(Error::VocabMismatch(format!(
            "class id {} outside a {num_classes}-class vocabulary",
            i.class_id
        )));
    }
    let thresholds = iou_thresholds();
    let mut tallies = vec![ApTally::default(); num_classes];
    for (class, tally) in tallies.iter_mut().enumerate() {
        let gts: Vec<&Instance> = gt.iter().filter(|g| g.class_id as usize == class).collect();
        let mut preds: Vec<&Instance> = pred.iter().filter(|p| p.class_id as usize == class).collect();
        preds.sort_by(|a, b| b.score.total_cmp(&a.score));
        tally.num_gt = gts.len() as u64;
        let ious: Vec<Vec<f64>> = preds
            .iter()
            .map(|p| gts.iter().map(|g| mask_iou(&p.mask, &g.mask)).collect())
            .collect();
        let mut bits = vec![0u16; preds.len()];
        for (t, &thr) in thresholds.iter().enumerate() {
            let mut taken = vec![false; gts.len()];
            for (d, row) in ious.iter().enumerate() {
                let best = row
                    .iter()
                    .enumerate()
                    .filter(|&(g, &iou)| !taken[g] && iou >= thr)
                    .fold(None, |best: Option<(usize, f64)>, (g, &iou)| match best {
                        Some((_, b)) if b >= iou => best,
                        _ => Some((g, iou)),
                    });
                if let Some((g, _)) = best {
                    taken[g] = true;
                    bits[d] |= 1 << t;
                }
            }
        }
        tally.detections = preds.iter().zip(bits).map(|(p, b)| (p.score, b)).collect();
    }
    Ok(tallies)
}

pub fn mask_map(pred: &[Instance], gt: &[Instance], num_classes: usize) -> Result<MaskAp> {
    Ok(MaskAp::from_tallies(&ap_tally(pred, gt, num_classes)?))
}
