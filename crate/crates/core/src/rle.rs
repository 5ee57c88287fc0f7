//! Row-major run-length coding of binary masks.

use crate::error::{Error, Result};
use crate::types::SegmentMask;

/// Dense binary `height × width` grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Bitmap {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "bitmap {height}x{width} with {} pixels",
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }
}

/// Encodes a bitmap into maximal runs, so equal bitmaps always share one encoding.
pub fn encode(bitmap: &Bitmap) -> SegmentMask {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &bit) in bitmap.bits.iter().enumerate() {
        match (bit, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push((s as u32, (i - s) as u32));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s as u32, (bitmap.bits.len() - s) as u32));
    }
    SegmentMask::new(bitmap.height, bitmap.width, runs).expect("maximal runs are valid")
}

pub fn decode(mask: &SegmentMask) -> Bitmap {
    let mut bitmap = Bitmap::zeros(mask.height(), mask.width());
    for i in mask.pixels() {
        bitmap.bits[i] = true;
    }
    bitmap
}

/// Decodes unvalidated runs, as read from disk.
pub fn decode_runs(height: usize, width: usize, runs: &[(u32, u32)]) -> Result<Bitmap> {
    Ok(decode(&SegmentMask::new(height, width, runs.to_vec())?))
}

/// Whether no two runs touch, i.e. the encoding is the one [`encode`] produces.
pub fn is_canonical(mask: &SegmentMask) -> bool {
    mask.runs().windows(2).all(|w| w[0].0 + w[0].1 < w[1].0)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn empty_and_full() {
        assert!(encode(&Bitmap::zeros(4, 4)).runs().is_empty());
        let full = Bitmap::new(2, 2, vec![true; 4]).unwrap();
        assert_eq!(encode(&full).runs(), &[(0, 4)]);
        assert_eq!(decode(&encode(&full)), full);
    }

    #[test]
    fn single_pixel_row_major() {
        let mut b = Bitmap::zeros(2, 2);
        b.set(1, 0, true);
        assert_eq!(encode(&b).runs(), &[(2, 1)]);
    }

    #[test]
    fn decode_examples() {
        let all = decode_runs(2, 2, &[(0, 4)]).unwrap();
        assert!(all.bits().iter().all(|&b| b));
        assert!(decode_runs(4, 4, &[]).unwrap().bits().iter().all(|&b| !b));
        let b = decode_runs(2, 2, &[(1, 2)]).unwrap();
        assert_eq!(b.bits(), &[false, true, true, false]);
        assert!(b.get(0, 1) && b.get(1, 0));
    }

    #[test]
    fn decode_errors() {
        assert!(matches!(
            decode_runs(2, 2, &[(0, 2), (1, 1)]),
            Err(Error::OverlappingRuns { .. })
        ));
        assert!(matches!(
            decode_runs(2, 2, &[(2, 3)]),
            Err(Error::RunOutOfBounds { .. })
        ));
    }

    #[test]
    fn runs_span_rows() {
        let b = Bitmap::from_fn(3, 3, |r, c| (r == 0 && c == 2) || (r == 1 && c == 0));
        assert_eq!(encode(&b).runs(), &[(2, 2)]);
    }

    fn bitmaps() -> impl Strategy<Value = Bitmap> {
        (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
            proptest::collection::vec(any::<bool>(), h * w).prop_map(move |bits| Bitmap::new(h, w, bits).unwrap())
        })
    }

    proptest! {
        #[test]
        fn roundtrip(b in bitmaps()) {
            let mask = encode(&b);
            prop_assert!(is_canonical(&mask));
            prop_assert_eq!(mask.area(), b.bits().iter().filter(|&&x| x).count());
            prop_assert_eq!(decode(&mask), b);
        }

        #[test]
        fn canonical_masks_reencode_identically(b in bitmaps()) {
            let canonical = encode(&b);
            prop_assert_eq!(encode(&decode(&canonical)), canonical);
        }
    }
}
