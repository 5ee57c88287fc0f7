//! Binary file formats shared by the engine.
//!
//! All multi-byte integers and reals are little-endian; reals are `f32`.
//!
//! DFMP (dense feature map):
//! `"DFMP" | version u16 | patch_size u16 | height u32 | width u32 | dim u32 | f32 * h*w*dim`
//!
//! RSMK (segment mask):
//! `"RSMK" | version u16 | height u32 | width u32 | run_count u32 | (start u32, length u32) * run_count`

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{DenseFeatureMap, SegmentMask, Vocabulary};

pub const DFMP_MAGIC: [u8; 4] = *b"DFMP";
pub const RSMK_MAGIC: [u8; 4] = *b"RSMK";
pub const FORMAT_VERSION: u16 = 1;

/// Cursor over an in-memory file image. Running out of bytes yields
/// [`Error::TruncatedFile`] tagged with the format name.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8], format: &'static str) -> Self {
        Self { buf, pos: 0, format }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.buf.len())
            .ok_or(Error::TruncatedFile(self.format))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }

    pub fn version(&mut self) -> Result<()> {
        let version = self.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionUnsupported {
                format: self.format,
                version,
            });
        }
        Ok(())
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let bytes = self.take(count.checked_mul(4).ok_or(Error::TruncatedFile(self.format))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn u32s(&mut self, count: usize) -> Result<Vec<u32>> {
        let bytes = self.take(count.checked_mul(4).ok_or(Error::TruncatedFile(self.format))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn remaining(&self) -> &'a [u8] {
        &self.buf[self.pos..]
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    fs::write(tmp, bytes).map_err(|e| Error::io(tmp, e))?;
    fs::rename(tmp, path).map_err(|e| Error::io(path, e))
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidValue(format!("{what} {v} exceeds u32")))
}

pub fn encode_feature_map(map: &DenseFeatureMap) -> Result<Vec<u8>> {
    let patch = u16::try_from(map.patch_size())
        .map_err(|_| Error::InvalidValue(format!("patch size {} exceeds u16", map.patch_size())))?;
    let mut out = Vec::with_capacity(22 + map.data().len() * 4);
    out.extend_from_slice(&DFMP_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&patch.to_le_bytes());
    out.extend_from_slice(&to_u32(map.height_patches(), "height")?.to_le_bytes());
    out.extend_from_slice(&to_u32(map.width_patches(), "width")?.to_le_bytes());
    out.extend_from_slice(&to_u32(map.dim(), "dim")?.to_le_bytes());
    put_f32s(&mut out, map.data());
    Ok(out)
}

pub fn decode_feature_map(bytes: &[u8]) -> Result<DenseFeatureMap> {
    let mut r = ByteReader::new(bytes, "DFMP");
    r.magic(DFMP_MAGIC)?;
    r.version()?;
    let patch_size = r.u16()? as usize;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let count = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(dim))
        .ok_or_else(|| Error::DimensionMismatch("feature map extents overflow".into()))?;
    let data = r.f32s(count)?;
    if !r.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} trailing bytes after {height}x{width}x{dim} payload",
            r.remaining().len()
        )));
    }
    DenseFeatureMap::new(height, width, dim, patch_size, data)
}

pub fn read_feature_map(path: impl AsRef<Path>) -> Result<DenseFeatureMap> {
    decode_feature_map(&read_file(path.as_ref())?)
}

pub fn write_feature_map(map: &DenseFeatureMap, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_feature_map(map)?)
}

pub fn encode_mask(mask: &SegmentMask) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(18 + mask.runs().len() * 8);
    out.extend_from_slice(&RSMK_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(mask.height(), "height")?.to_le_bytes());
    out.extend_from_slice(&to_u32(mask.width(), "width")?.to_le_bytes());
    out.extend_from_slice(&to_u32(mask.runs().len(), "run count")?.to_le_bytes());
    for &(start, len) in mask.runs() {
        out.extend_from_slice(&start.to_le_bytes());
        out.extend_from_slice(&len.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_mask(bytes: &[u8]) -> Result<SegmentMask> {
    let mut r = ByteReader::new(bytes, "RSMK");
    r.magic(RSMK_MAGIC)?;
    r.version()?;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let count = r.u32()? as usize;
    let flat = r.u32s(count.checked_mul(2).ok_or(Error::TruncatedFile("RSMK"))?)?;
    if !r.is_empty() {
        return Err(Error::CorruptPayload(format!(
            "{} trailing bytes in RSMK file",
            r.remaining().len()
        )));
    }
    let runs = flat.chunks_exact(2).map(|p| (p[0], p[1])).collect();
    SegmentMask::new(height, width, runs)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<SegmentMask> {
    decode_mask(&read_file(path.as_ref())?)
}

pub fn write_mask(mask: &SegmentMask, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_mask(mask)?)
}

pub fn read_vocabulary(path: impl AsRef<Path>) -> Result<Vocabulary> {
    Vocabulary::from_json(&read_file(path.as_ref())?)
}

pub fn write_vocabulary(vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &serde_json::to_vec_pretty(vocab)?)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::rle::{self, Bitmap};

    #[test]
    fn zero_map_roundtrip() {
        let map = DenseFeatureMap::new(1, 1, 4, 16, vec![0.0; 4]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zeros.dfmp");
        write_feature_map(&map, &path).unwrap();
        assert_eq!(read_feature_map(&path).unwrap(), map);
    }

    #[test]
    fn random_map_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..3 * 5 * 8).map(|_| rng.random_range(-10.0..10.0)).collect();
        let map = DenseFeatureMap::new(3, 5, 8, 14, data).unwrap();
        let bytes = encode_feature_map(&map).unwrap();
        assert_eq!(bytes.len(), 20 + 3 * 5 * 8 * 4);
        let back = decode_feature_map(&bytes).unwrap();
        let bits = |m: &DenseFeatureMap| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&map));
        assert_eq!(encode_feature_map(&back).unwrap(), bytes);
    }

    #[test]
    fn dfmp_header_layout() {
        let map = DenseFeatureMap::new(2, 3, 1, 16, vec![1.0; 6]).unwrap();
        let bytes = encode_feature_map(&map).unwrap();
        assert_eq!(&bytes[..4], b"DFMP");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..8], &[16, 0]);
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[3, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &[1, 0, 0, 0]);
        assert_eq!(&bytes[20..24], &1.0f32.to_le_bytes());
    }

    #[test]
    fn dfmp_errors() {
        let map = DenseFeatureMap::new(1, 1, 4, 1, vec![0.5; 4]).unwrap();
        let mut bytes = encode_feature_map(&map).unwrap();
        assert!(matches!(
            decode_feature_map(&bytes[..bytes.len() - 1]),
            Err(Error::TruncatedFile("DFMP"))
        ));
        bytes.push(0);
        assert!(matches!(decode_feature_map(&bytes), Err(Error::DimensionMismatch(_))));
        bytes[0] = b'X';
        assert!(matches!(decode_feature_map(&bytes), Err(Error::BadMagic { .. })));
        let mut v2 = encode_feature_map(&map).unwrap();
        v2[4] = 2;
        assert!(matches!(
            decode_feature_map(&v2),
            Err(Error::VersionUnsupported { version: 2, .. })
        ));
    }

    #[test]
    fn rsmk_layout_and_errors() {
        let mask = SegmentMask::new(2, 3, vec![(1, 2), (4, 1)]).unwrap();
        let bytes = encode_mask(&mask).unwrap();
        assert_eq!(&bytes[..4], b"RSMK");
        assert_eq!(bytes.len(), 18 + 16);
        assert_eq!(&bytes[14..18], &[2, 0, 0, 0]);
        assert_eq!(decode_mask(&bytes).unwrap(), mask);
        assert!(matches!(
            decode_mask(&bytes[..bytes.len() - 2]),
            Err(Error::TruncatedFile("RSMK"))
        ));

        let mut overlapping = bytes.clone();
        overlapping[26..30].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode_mask(&overlapping), Err(Error::OverlappingRuns { .. })));
    }

    proptest! {
        #[test]
        fn mask_file_roundtrip(h in 1usize..20, w in 1usize..20, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bitmap = Bitmap::from_fn(h, w, |_, _| rng.random_bool(0.4));
            let mask = rle::encode(&bitmap);
            let bytes = encode_mask(&mask).unwrap();
            prop_assert_eq!(&decode_mask(&bytes).unwrap(), &mask);
            prop_assert_eq!(encode_mask(&decode_mask(&bytes).unwrap()).unwrap(), bytes);
        }
    }
}
