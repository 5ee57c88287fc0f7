//! Panoptic assembly from scored mask proposals.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_file, write_file, ByteReader};
use crate::rle::{self, Bitmap};
use crate::types::{ScoreVector, SegmentMask, Vocabulary};

pub const RPAN_MAGIC: [u8; 4] = *b"RPAN";
/// Class value of void pixels in a semantic map.
pub const VOID: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskProposal {
    pub mask: SegmentMask,
    pub mask_confidence: f64,
}

impl MaskProposal {
    pub fn new(mask: SegmentMask, mask_confidence: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&mask_confidence) {
            return Err(Error::InvalidValue(format!(
                "mask confidence {mask_confidence} outside [0, 1]"
            )));
        }
        Ok(Self { mask, mask_confidence })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssembleConfig {
    /// Minimum final class score for a proposal to become a segment.
    pub score_threshold: f64,
    /// Minimum fraction of a proposal's area still unclaimed when its turn comes.
    pub overlap_threshold: f64,
    /// Proposals with lower mask confidence are ignored outright.
    pub detection_threshold: f64,
}

impl Default for AssembleConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.3,
            overlap_threshold: 0.8,
            detection_threshold: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub id: u32,
    pub class_id: u32,
    pub is_thing: bool,
    /// Detection score, used for mask AP ranking.
    #[serde(default = "one")]
    pub score: f64,
    /// Ground-truth region to ignore during matching.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub crowd: bool,
}

fn one() -> f64 {
    1.0
}

/// Non-overlapping segmentation: one segment id per pixel, 0 for void.
#[derive(Debug, Clone, PartialEq)]
pub struct PanopticMap {
    height: usize,
    width: usize,
    ids: Vec<u32>,
    segments: Vec<SegmentInfo>,
}

impl PanopticMap {
    /// Checks that segment ids run `1..=n` in table order and that every
    /// labelled pixel refers to one of them.
    pub fn new(height: usize, width: usize, ids: Vec<u32>, segments: Vec<SegmentInfo>) -> Result<Self> {
        if height == 0 || width == 0 || ids.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "panoptic map {height}x{width} with {} pixels",
                ids.len()
            )));
        }
        for (i, s) in segments.iter().enumerate() {
            if s.id as usize != i + 1 {
                return Err(Error::CorruptPayload(format!(
                    "segment ids must run from 1 in order, found {} at position {i}",
                    s.id
                )));
            }
            if s.class_id == VOID {
                return Err(Error::CorruptPayload(format!("segment {} has the void class", s.id)));
            }
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize > segments.len()) {
            return Err(Error::CorruptPayload(format!("pixel id {bad} has no segment entry")));
        }
        Ok(Self {
            height,
            width,
            ids,
            segments,
        })
    }

    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0; height * width], Vec::new())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn segments(&self) -> &[SegmentInfo] {
        &self.segments
    }

    pub fn segment(&self, id: u32) -> Option<&SegmentInfo> {
        id.checked_sub(1).and_then(|i| self.segments.get(i as usize))
    }

    /// Pixel count per segment id (index 0 counts void).
    pub fn areas(&self) -> Vec<u64> {
        let mut areas = vec![0u64; self.segments.len() + 1];
        for &id in &self.ids {
            areas[id as usize] += 1;
        }
        areas
    }

    /// Run-length mask of one segment.
    pub fn segment_mask(&self, id: u32) -> SegmentMask {
        let bits = self.ids.iter().map(|&p| p == id).collect();
        rle::encode(&Bitmap::new(self.height, self.width, bits).expect("map extents are valid"))
    }

    /// `"RPAN" | height u32 | width u32 | u32 id per pixel | JSON segment table`.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(12 + self.ids.len() * 4);
        out.extend_from_slice(&RPAN_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for id in &self.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        out.extend_from_slice(&serde_json::to_vec(&self.segments)?);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "RPAN");
        r.magic(RPAN_MAGIC)?;
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let count = height
            .checked_mul(width)
            .ok_or_else(|| Error::DimensionMismatch("panoptic extents overflow".into()))?;
        let ids = r.u32s(count)?;
        let segments: Vec<SegmentInfo> =
            serde_json::from_slice(r.remaining()).map_err(|e| Error::CorruptPayload(format!("segment table: {e}")))?;
        Self::new(height, width, ids, segments)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&read_file(path.as_ref())?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.encode()?)
    }
}

/// Greedy panoptic assembly.
///
/// Proposals are ranked by best class score times mask confidence (ties by
/// proposal index). Each in turn claims its still-unclaimed pixels if they
/// make up at least `overlap_threshold` of its area. Claimed proposals whose
/// class score is below `score_threshold` are then dropped and their pixels
/// left void, so the claim pattern does not depend on the score threshold.
/// Stuff segments of one class are merged into the first such segment.
pub fn assemble(
    height: usize,
    width: usize,
    proposals: &[MaskProposal],
    scores: &[ScoreVector],
    vocab: &Vocabulary,
    cfg: &AssembleConfig,
) -> Result<PanopticMap> {
    if proposals.len() != scores.len() {
        return Err(Error::MisalignedInputs {
            proposals: proposals.len(),
            scores: scores.len(),
        });
    }
    if proposals
        .iter()
        .any(|p| p.mask.height() != height || p.mask.width() != width)
    {
        return Err(Error::MixedDimensions);
    }
    if let Some(s) = scores.iter().find(|s| s.len() != vocab.len()) {
        return Err(Error::LengthMismatch(format!(
            "score vector of {} classes for a {}-class vocabulary",
            s.len(),
            vocab.len()
        )));
    }
    let mut ranked: Vec<(usize, usize, f64, f64)> = proposals
        .iter()
        .zip(scores)
        .enumerate()
        .filter(|(_, (p, _))| p.mask_confidence >= cfg.detection_threshold)
        .filter_map(|(i, (p, s))| {
            let (class, score) = s.argmax()?;
            Some((i, class, score, score * p.mask_confidence))
        })
        .collect();
    ranked.sort_by(|a, b| b.3.total_cmp(&a.3).then(a.0.cmp(&b.0)));

    let mut claimed = vec![false; height * width];
    let mut ids = vec![0u32; height * width];
    let mut segments: Vec<SegmentInfo> = Vec::new();
    let mut stuff_segment: Vec<Option<u32>> = vec![None; vocab.len()];
    for (index, class, class_score, rank_score) in ranked {
        let mask = &proposals[index].mask;
        let area = mask.area();
        if area == 0 {
            continue;
        }
        let free: Vec<usize> = mask.pixels().filter(|&p| !claimed[p]).collect();
        if free.is_empty() || (free.len() as f64) < cfg.overlap_threshold * area as f64 {
            continue;
        }
        for &p in &free {
            claimed[p] = true;
        }
        if class_score < cfg.score_threshold {
            continue;
        }
        let is_thing = vocab.entries()[class].thing;
        let id = match stuff_segment[class] {
            Some(id) if !is_thing => {
                let seg = &mut segments[id as usize - 1];
                seg.score = seg.score.max(rank_score);
                id
            }
            _ => {
                let id = segments.len() as u32 + 1;
                segments.push(SegmentInfo {
                    id,
                    class_id: class as u32,
                    is_thing,
                    score: rank_score,
                    crowd: false,
                });
                if !is_thing {
                    stuff_segment[class] = Some(id);
                }
                id
            }
        };
        for p in free {
            ids[p] = id;
        }
    }
    PanopticMap::new(height, width, ids, segments)
}

/// Class id per pixel, [`VOID`] where unlabelled.
pub fn to_semantic(map: &PanopticMap) -> Vec<u32> {
    map.ids
        .iter()
        .map(|&id| map.segment(id).map_or(VOID, |s| s.class_id))
        .collect()
}
