//! Panoptic quality, mean IoU and mask AP, with mergeable per-image tallies.

mod map;
mod miou;
mod pq;
mod ratio;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::panoptic::{to_semantic, PanopticMap};
use crate::types::Vocabulary;

pub use map::{
    ap_tally, instances, intersection, iou_thresholds, mask_iou, mask_map, ApTally, Instance, MaskAp,
    NUM_IOU_THRESHOLDS,
};
pub use miou::{iou_tally, mean_iou, IouTally, MeanIou};
pub use pq::{panoptic_quality, pq_tally, ClassPq, PqResult, PqTally};
pub use ratio::FractionSum;

/// Everything needed to score one or more images, summed before any ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTally {
    pub pq: Vec<PqTally>,
    pub iou: Vec<IouTally>,
    pub ap: Vec<ApTally>,
}

impl ImageTally {
    pub fn empty(num_classes: usize) -> Self {
        Self {
            pq: vec![PqTally::default(); num_classes],
            iou: vec![IouTally::default(); num_classes],
            ap: vec![ApTally::default(); num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.pq.len()
    }

    pub fn merge(&mut self, other: &ImageTally) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(Error::VocabMismatch(format!(
                "tallies over {} and {} classes",
                self.num_classes(),
                other.num_classes()
            )));
        }
        for (a, b) in self.pq.iter_mut().zip(&other.pq) {
            a.merge(b);
        }
        for (a, b) in self.iou.iter_mut().zip(&other.iou) {
            a.merge(b);
        }
        for (a, b) in self.ap.iter_mut().zip(&other.ap) {
            a.merge(b);
        }
        Ok(())
    }
}

/// Tallies one predicted/ground-truth pair.
pub fn evaluate_image(pred: &PanopticMap, gt: &PanopticMap, num_classes: usize) -> Result<ImageTally> {
    let pq = pq_tally(pred, gt, num_classes)?;
    let iou = iou_tally(&to_semantic(pred), &to_semantic(gt), num_classes)?;
    let ap = ap_tally(&instances(pred), &instances(gt), num_classes)?;
    Ok(ImageTally { pq, iou, ap })
}

/// Sums per-image tallies.
pub fn accumulate<'a>(num_classes: usize, tallies: impl IntoIterator<Item = &'a ImageTally>) -> Result<ImageTally> {
    let mut total = ImageTally::empty(num_classes);
    for t in tallies {
        total.merge(t)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassRow {
    pub class_id: usize,
    pub name: String,
    pub pq: Option<f64>,
    pub sq: Option<f64>,
    pub rq: Option<f64>,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub iou: Option<f64>,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub miou: f64,
    pub map: f64,
    pub num_images: usize,
    pub per_class: Vec<ClassRow>,
}

impl MetricsReport {
    pub fn from_tally(tally: &ImageTally, vocab: &Vocabulary, num_images: usize) -> Result<Self> {
        if tally.num_classes() != vocab.len() {
            return Err(Error::VocabMismatch(format!(
                "tally over {} classes for a {}-class vocabulary",
                tally.num_classes(),
                vocab.len()
            )));
        }
        let pq = PqResult::from_tallies(&tally.pq);
        let iou = MeanIou::from_tallies(&tally.iou);
        let ap = MaskAp::from_tallies(&tally.ap);
        let per_class = vocab
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let c = pq.per_class[i];
                ClassRow {
                    class_id: i,
                    name: e.name.clone(),
                    pq: c.map(|c| c.pq),
                    sq: c.map(|c| c.sq),
                    rq: c.map(|c| c.rq),
                    tp: tally.pq[i].tp,
                    fp: tally.pq[i].fp,
                    fn_: tally.pq[i].fn_,
                    iou: iou.per_class[i],
                    ap: ap.per_class[i],
                }
            })
            .collect();
        Ok(Self {
            pq: pq.pq,
            sq: pq.sq,
            rq: pq.rq,
            miou: iou.miou,
            map: ap.map,
            num_images,
            per_class,
        })
    }
}

/// Scores aligned prediction and ground-truth maps.
pub fn evaluate(pred: &[PanopticMap], gt: &[PanopticMap], vocab: &Vocabulary) -> Result<MetricsReport> {
    use rayon::prelude::*;
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions for {} ground-truth maps",
            pred.len(),
            gt.len()
        )));
    }
    let n = vocab.len();
    let tallies: Vec<ImageTally> = pred
        .par_iter()
        .zip(gt)
        .map(|(p, g)| evaluate_image(p, g, n))
        .collect::<Result<_>>()?;
    MetricsReport::from_tally(&accumulate(n, &tallies)?, vocab, pred.len())
}
