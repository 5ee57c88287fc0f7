//! RFDB database file.
//!
//! `"RFDB" | version u16 | dim u32 | record_count u64 | vocab_len u32 | vocabulary JSON |
//! record_count * (label_id u32 | tag_len u16 | tag UTF-8 | f32 * dim)`

use std::path::Path;

use super::{Backend, FeatureDatabase};
use crate::error::{Error, Result};
use crate::io::{put_f32s, read_file, write_file, ByteReader, FORMAT_VERSION};
use crate::types::{FeatureRecord, Vocabulary};

pub const RFDB_MAGIC: [u8; 4] = *b"RFDB";

pub fn encode(db: &FeatureDatabase) -> Result<Vec<u8>> {
    let vocab = db.vocabulary().to_json()?;
    let mut out = Vec::with_capacity(22 + vocab.len() + db.len() * (8 + db.dim() * 4));
    out.extend_from_slice(&RFDB_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(db.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(db.len() as u64).to_le_bytes());
    out.extend_from_slice(&(vocab.len() as u32).to_le_bytes());
    out.extend_from_slice(&vocab);
    for r in db.records() {
        let tag = r.source_tag.as_bytes();
        let tag_len = u16::try_from(tag.len())
            .map_err(|_| Error::InvalidValue(format!("source tag of {} bytes is too long", tag.len())))?;
        out.extend_from_slice(&(r.label_id as u32).to_le_bytes());
        out.extend_from_slice(&tag_len.to_le_bytes());
        out.extend_from_slice(tag);
        put_f32s(&mut out, &r.feature);
    }
    Ok(out)
}

/// Parses a database image. The result has no index; see [`load_with`].
pub fn decode(bytes: &[u8]) -> Result<FeatureDatabase> {
    decode_inner(bytes).map_err(|e| match e {
        Error::TruncatedFile(_) => Error::CorruptPayload("RFDB file is truncated".into()),
        Error::Json(e) => Error::CorruptPayload(format!("vocabulary: {e}")),
        Error::InvalidVocabulary(m) => Error::CorruptPayload(format!("vocabulary: {m}")),
        other => other,
    })
}

fn decode_inner(bytes: &[u8]) -> Result<FeatureDatabase> {
    let mut r = ByteReader::new(bytes, "RFDB");
    r.magic(RFDB_MAGIC)?;
    r.version()?;
    let dim = r.u32()? as usize;
    let count = r.u64()?;
    let vocab_len = r.u32()? as usize;
    let vocabulary = Vocabulary::from_json(r.take(vocab_len)?)?;
    let mut db = FeatureDatabase::new(dim, vocabulary).map_err(|_| Error::CorruptPayload("zero dimension".into()))?;
    for i in 0..count {
        let label_id = r.u32()? as usize;
        let tag_len = r.u16()? as usize;
        let tag = std::str::from_utf8(r.take(tag_len)?)
            .map_err(|_| Error::CorruptPayload(format!("record {i}: source tag is not UTF-8")))?
            .to_owned();
        let feature = r.f32s(dim)?;
        let record = FeatureRecord {
            feature,
            label_id,
            source_tag: tag,
        };
        db.insert(record)
            .map_err(|e| Error::CorruptPayload(format!("record {i}: {e}")))?;
    }
    if !r.is_empty() {
        return Err(Error::CorruptPayload(format!(
            "{} trailing bytes after {count} records",
            r.remaining().len()
        )));
    }
    Ok(db)
}

pub fn save(db: &FeatureDatabase, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode(db)?)
}

/// Loads a database and builds an exact index over it.
pub fn load(path: impl AsRef<Path>) -> Result<FeatureDatabase> {
    load_with(path, Backend::Exact)
}

pub fn load_with(path: impl AsRef<Path>, backend: Backend) -> Result<FeatureDatabase> {
    let mut db = decode(&read_file(path.as_ref())?)?;
    if !db.is_empty() {
        db.build_index(backend)?;
    }
    Ok(db)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::featdb::tests::random_unit;
    use crate::types::VocabularyEntry;

    fn sample(n: usize) -> FeatureDatabase {
        let vocab = Vocabulary::new(vec![
            VocabularyEntry::new("wall")
                .seen(true)
                .thing(false)
                .embedding(vec![1.0, 0.0]),
            VocabularyEntry::new("chair").embedding(vec![0.0, 1.0]),
        ])
        .unwrap();
        let mut db = FeatureDatabase::new(8, vocab).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..n {
            let tag = if i % 3 == 0 { "fallback" } else { "ade20k" };
            db.insert(FeatureRecord::from_unit(random_unit(&mut rng, 8), i % 2, tag).unwrap())
                .unwrap();
        }
        db
    }

    #[test]
    fn roundtrip_bit_exact() {
        let db = sample(10);
        let bytes = encode(&db).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back.records(), db.records());
        assert_eq!(back.vocabulary(), db.vocabulary());
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn load_rebuilds_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.rfdb");
        save(&sample(10), &path).unwrap();
        let db = load(&path).unwrap();
        assert!(db.is_indexed());
        assert_eq!(db.query_knn(&db.records()[4].feature, 1).unwrap()[0].record_index, 4);
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = encode(&sample(10)).unwrap();
        for cut in [5, 20, bytes.len() - 1] {
            assert!(
                matches!(decode(&bytes[..cut]), Err(Error::CorruptPayload(_))),
                "cut {cut}"
            );
        }
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"NOPE");
        assert!(matches!(decode(&bad), Err(Error::BadMagic { .. })));
        let mut v9 = bytes.clone();
        v9[4] = 9;
        assert!(matches!(decode(&v9), Err(Error::VersionUnsupported { version: 9, .. })));
        let mut extra = bytes.clone();
        extra.push(1);
        assert!(matches!(decode(&extra), Err(Error::CorruptPayload(_))));
    }

    #[test]
    fn empty_database_roundtrip() {
        let db = sample(0);
        let back = decode(&encode(&db).unwrap()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.dim(), 8);
    }
}
