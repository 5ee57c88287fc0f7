use std::collections::HashMap;

use serde::Serialize;

use super::ratio::FractionSum;
use crate::error::{Error, Result};
use crate::panoptic::PanopticMap;

/// Running panoptic-quality counts for one class.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PqTally {
    pub iou_sum: FractionSum,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl PqTally {
    pub fn merge(&mut self, other: &PqTally) {
        self.iou_sum += other.iou_sum;
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn is_populated(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0
    }

    pub fn scores(&self) -> ClassPq {
        let twice_den = 2 * self.tp + self.fp + self.fn_;
        ClassPq {
            pq: self.iou_sum.scaled_ratio(2, twice_den),
            sq: self.iou_sum.scaled_ratio(1, self.tp),
            rq: if twice_den == 0 {
                0.0
            } else {
                (2 * self.tp) as f64 / twice_den as f64
            },
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassPq {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PqResult {
    /// `None` for classes with no ground truth and no prediction.
    pub per_class: Vec<Option<ClassPq>>,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

impl PqResult {
    pub fn from_tallies(tallies: &[PqTally]) -> Self {
        let per_class: Vec<Option<ClassPq>> = tallies.iter().map(|t| t.is_populated().then(|| t.scores())).collect();
        let present: Vec<&ClassPq> = per_class.iter().flatten().collect();
        let mean = |f: fn(&ClassPq) -> f64| {
            if present.is_empty() {
                0.0
            } else {
                present.iter().map(|c| f(c)).sum::<f64>() / present.len() as f64
            }
        };
        Self {
            pq: mean(|c| c.pq),
            sq: mean(|c| c.sq),
            rq: mean(|c| c.rq),
            per_class,
        }
    }
}

pub(crate) fn check_pair(pred: &PanopticMap, gt: &PanopticMap, num_classes: usize) -> Result<()> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::DimensionMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    for s in pred.segments().iter().chain(gt.segments()) {
        if s.class_id as usize >= num_classes {
            return Err(Error::VocabMismatch(format!(
                "class id {} outside a {num_classes}-class vocabulary",
                s.class_id
            )));
        }
    }
    Ok(())
}

/// Per-class PQ counts for one image.
///
/// A prediction and a ground-truth segment match when they share a class
/// and their IoU exceeds 0.5; void ground-truth pixels are left out of the
/// union. Unmatched predictions lying more than half on void or on a crowd
/// region of their class are not false positives, and crowd segments are
/// never false negatives.
pub fn pq_tally(pred: &PanopticMap, gt: &PanopticMap, num_classes: usize) -> Result<Vec<PqTally>> {
    check_pair(pred, gt, num_classes)?;
    let pred_area = pred.areas();
    let gt_area = gt.areas();
    let mut overlap: HashMap<(u32, u32), u64> = HashMap::new();
    for (&g, &p) in gt.ids().iter().zip(pred.ids()) {
        if p != 0 {
            *overlap.entry((g, p)).or_default() += 1;
        }
    }
    let on_void = |p: u32| overlap.get(&(0, p)).copied().unwrap_or(0);

    let mut tallies = vec![PqTally::default(); num_classes];
    let mut gt_matched = vec![false; gt.segments().len() + 1];
    let mut pred_matched = vec![false; pred.segments().len() + 1];
    let mut pairs: Vec<(&(u32, u32), &u64)> = overlap.iter().collect();
    pairs.sort();
    for (&(g, p), &inter) in pairs {
        let (Some(gs), Some(ps)) = (gt.segment(g), pred.segment(p)) else {
            continue;
        };
        if gs.crowd || gs.class_id != ps.class_id {
            continue;
        }
        let union = pred_area[p as usize] + gt_area[g as usize] - inter - on_void(p);
        // IoU > 1/2
        if 2 * inter > union {
            let t = &mut tallies[gs.class_id as usize];
            t.tp += 1;
            t.iou_sum += FractionSum::of(inter, union);
            gt_matched[g as usize] = true;
            pred_matched[p as usize] = true;
        }
    }
    for gs in gt.segments() {
        if !gs.crowd && !gt_matched[gs.id as usize] && gt_area[gs.id as usize] > 0 {
            tallies[gs.class_id as usize].fn_ += 1;
        }
    }
    let mut crowd_overlap: HashMap<u32, u64> = HashMap::new();
    for (&(g, p), &inter) in &overlap {
        if let (Some(gs), Some(ps)) = (gt.segment(g), pred.segment(p)) {
            if gs.crowd && gs.class_id == ps.class_id {
                *crowd_overlap.entry(p).or_default() += inter;
            }
        }
    }
    for ps in pred.segments() {
        let area = pred_area[ps.id as usize];
        if pred_matched[ps.id as usize] || area == 0 {
            continue;
        }
        let ignored = on_void(ps.id) + crowd_overlap.get(&ps.id).copied().unwrap_or(0);
        if 2 * ignored > area {
            continue;
        }
        tallies[ps.class_id as usize].fp += 1;
    }
    Ok(tallies)
}

pub fn panoptic_quality(pred: &PanopticMap, gt: &PanopticMap, num_classes: usize) -> Result<PqResult> {
    Ok(PqResult::from_tallies(&pq_tally(pred, gt, num_classes)?))
}
