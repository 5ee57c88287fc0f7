//! C ABI over the retseg engine.
//!
//! Every function returns a [`RetsegStatus`]. On failure the message is kept
//! per thread and can be read with [`retseg_last_error`]. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use retseg::classify::{Classifier, ClassifierParams, ProjectionWeights};
use retseg::featdb::{self, Backend, FeatureDatabase, HnswParams};
use retseg::io::read_vocabulary;
use retseg::pooling::pool_segment;
use retseg::types::{DenseFeatureMap, EnsembleConfig, ScoreVector, SegmentMask, Vocabulary};
use retseg::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetsegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    DimensionMismatch = 5,
    EmptyDatabase = 6,
    BufferTooSmall = 7,
    Internal = 8,
    Panic = 9,
}

/// Loaded feature database with its search index.
pub struct RetsegDatabase {
    inner: FeatureDatabase,
}

/// Loaded class vocabulary.
pub struct RetsegVocabulary {
    inner: Vocabulary,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetsegNeighbor {
    pub distance: f32,
    pub label_id: u32,
    pub record_index: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetsegParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub k: usize,
    pub temperature: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(RetsegStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => RetsegStatus::Io,
            Error::BadMagic { .. }
            | Error::VersionUnsupported { .. }
            | Error::TruncatedFile(_)
            | Error::CorruptPayload(_)
            | Error::Json(_) => RetsegStatus::Format,
            Error::DimensionMismatch(_)
            | Error::DimMismatch { .. }
            | Error::LengthMismatch(_)
            | Error::MixedDimensions
            | Error::MisalignedInputs { .. } => RetsegStatus::DimensionMismatch,
            Error::EmptyDatabase => RetsegStatus::EmptyDatabase,
            Error::Internal(_) => RetsegStatus::Internal,
            _ => RetsegStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: RetsegStatus, msg: &str) -> Failure {
    Failure(status, msg.to_owned())
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RetsegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RetsegStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_owned());
            set_last_error(format!("panic: {msg}"));
            RetsegStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(fail(RetsegStatus::NullPointer, &format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be null or a NUL-terminated string.
unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, Failure> {
    non_null(p, name)?;
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(RetsegStatus::InvalidArgument, &format!("{name} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// # Safety
/// `p` must be valid for `len` reads unless `len` is 0.
unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be valid for `len` writes unless `len` is 0.
unsafe fn slice_out<'a, T>(p: *mut T, len: usize, name: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn retseg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Default blend weights, k and temperature.
#[no_mangle]
pub extern "C" fn retseg_params_default() -> RetsegParams {
    let p = ClassifierParams::default();
    RetsegParams {
        alpha: p.ensemble.alpha,
        beta: p.ensemble.beta,
        gamma: p.ensemble.gamma,
        k: p.k,
        temperature: p.temperature,
    }
}

/// Loads a vocabulary JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn retseg_vocabulary_load(path: *const c_char, out: *mut *mut RetsegVocabulary) -> RetsegStatus {
    guard(|| {
        non_null(out, "out")?;
        let inner = read_vocabulary(path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(RetsegVocabulary { inner }));
        Ok(())
    })
}

/// # Safety
/// `vocab` must be a handle from [`retseg_vocabulary_load`] or null.
#[no_mangle]
pub unsafe extern "C" fn retseg_vocabulary_len(vocab: *const RetsegVocabulary) -> usize {
    vocab.as_ref().map_or(0, |v| v.inner.len())
}

/// # Safety
/// `vocab` must be a handle from [`retseg_vocabulary_load`] or null, and
/// not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn retseg_vocabulary_free(vocab: *mut RetsegVocabulary) {
    if !vocab.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(vocab))));
    }
}

/// Loads an RFDB file and builds an exact (`approximate == false`) or
/// graph index with default parameters.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn retseg_database_load(
    path: *const c_char,
    approximate: bool,
    out: *mut *mut RetsegDatabase,
) -> RetsegStatus {
    guard(|| {
        non_null(out, "out")?;
        let backend = if approximate {
            Backend::Approximate(HnswParams::default())
        } else {
            Backend::Exact
        };
        let inner = featdb::load_with(path_arg(path, "path")?, backend)?;
        *out = Box::into_raw(Box::new(RetsegDatabase { inner }));
        Ok(())
    })
}

/// # Safety
/// `db` must be a handle from [`retseg_database_load`] or null.
#[no_mangle]
pub unsafe extern "C" fn retseg_database_len(db: *const RetsegDatabase) -> usize {
    db.as_ref().map_or(0, |d| d.inner.len())
}

/// # Safety
/// `db` must be a handle from [`retseg_database_load`] or null.
#[no_mangle]
pub unsafe extern "C" fn retseg_database_dim(db: *const RetsegDatabase) -> usize {
    db.as_ref().map_or(0, |d| d.inner.dim())
}

/// # Safety
/// `db` must be a handle from [`retseg_database_load`] or null, and not
/// used afterwards.
#[no_mangle]
pub unsafe extern "C" fn retseg_database_free(db: *mut RetsegDatabase) {
    if !db.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(db))));
    }
}

/// Up to `k` nearest records to `key`, nearest first. Writes at most
/// `capacity` neighbors and their number to `count`.
///
/// # Safety
/// `key` must hold `key_len` floats, `out` room for `capacity` neighbors,
/// and `count` must be valid.
#[no_mangle]
pub unsafe extern "C" fn retseg_database_query(
    db: *const RetsegDatabase,
    key: *const f32,
    key_len: usize,
    k: usize,
    out: *mut RetsegNeighbor,
    capacity: usize,
    count: *mut usize,
) -> RetsegStatus {
    guard(|| {
        non_null(db, "db")?;
        non_null(count, "count")?;
        let key = slice_arg(key, key_len, "key")?;
        let hits = (*db).inner.query_knn(key, k)?;
        if hits.len() > capacity {
            return Err(fail(
                RetsegStatus::BufferTooSmall,
                &format!("{} neighbors for a buffer of {capacity}", hits.len()),
            ));
        }
        let out = slice_out(out, hits.len(), "out")?;
        for (o, h) in out.iter_mut().zip(&hits) {
            *o = RetsegNeighbor {
                distance: h.distance,
                label_id: h.label_id as u32,
                record_index: h.record_index as u64,
            };
        }
        *count = hits.len();
        Ok(())
    })
}

/// Pools a row-major feature map (`height_patches * width_patches * dim`
/// floats) under a run-length mask of `run_count` (start, length) pairs into
/// a unit vector of `dim` floats.
///
/// # Safety
/// All pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn retseg_mask_pool(
    features: *const f32,
    height_patches: usize,
    width_patches: usize,
    dim: usize,
    patch_size: usize,
    mask_height: usize,
    mask_width: usize,
    runs: *const u32,
    run_count: usize,
    out: *mut f32,
) -> RetsegStatus {
    guard(|| {
        let data = slice_arg(features, height_patches * width_patches * dim, "features")?;
        let map = DenseFeatureMap::new(height_patches, width_patches, dim, patch_size, data.to_vec())?;
        let flat = slice_arg(runs, run_count * 2, "runs")?;
        let pairs = flat.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        let mask = SegmentMask::new(mask_height, mask_width, pairs)?;
        let pooled = pool_segment(&map, &mask)?;
        slice_out(out, dim, "out")?.copy_from_slice(&pooled);
        Ok(())
    })
}

/// Blends `n` per-class path scores into `out_oov` and `out_final`.
///
/// # Safety
/// Score arrays and `seen` must hold `n` values; outputs room for `n`.
#[no_mangle]
pub unsafe extern "C" fn retseg_ensemble(
    s_clip: *const f64,
    s_ret: *const f64,
    s_iv: *const f64,
    seen: *const bool,
    n: usize,
    params: RetsegParams,
    out_oov: *mut f64,
    out_final: *mut f64,
) -> RetsegStatus {
    guard(|| {
        let score = |p: *const f64, name: &str| -> Result<ScoreVector, Failure> {
            Ok(ScoreVector::new(slice_arg(p, n, name)?.to_vec())?)
        };
        let cfg = EnsembleConfig::new(params.alpha, params.beta, params.gamma)?;
        let (oov, fin) = retseg::classify::ensemble(
            &score(s_clip, "s_clip")?,
            &score(s_ret, "s_ret")?,
            &score(s_iv, "s_iv")?,
            slice_arg(seen, n, "seen")?,
            &cfg,
        )?;
        slice_out(out_oov, n, "out_oov")?.copy_from_slice(oov.as_slice());
        slice_out(out_final, n, "out_final")?.copy_from_slice(fin.as_slice());
        Ok(())
    })
}

/// Final per-class scores of one pooled segment feature, with the identity
/// projection. `out` must have room for one score per vocabulary class.
///
/// # Safety
/// Handles must be live; `feature` must hold `feature_len` floats and `out`
/// room for `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn retseg_classify(
    db: *const RetsegDatabase,
    vocab: *const RetsegVocabulary,
    feature: *const f32,
    feature_len: usize,
    params: RetsegParams,
    out: *mut f64,
    out_len: usize,
) -> RetsegStatus {
    guard(|| {
        non_null(db, "db")?;
        non_null(vocab, "vocab")?;
        let (db, vocab) = (&(*db).inner, &(*vocab).inner);
        if out_len != vocab.len() {
            return Err(fail(
                RetsegStatus::BufferTooSmall,
                &format!("output holds {out_len} scores for {} classes", vocab.len()),
            ));
        }
        let weights = ProjectionWeights::identity(db.dim());
        let params = ClassifierParams {
            ensemble: EnsembleConfig::new(params.alpha, params.beta, params.gamma)?,
            k: params.k,
            temperature: params.temperature,
        };
        let classifier = Classifier::new(db, vocab, &weights, params)?;
        let result = classifier.classify(slice_arg(feature, feature_len, "feature")?)?;
        slice_out(out, out_len, "out")?.copy_from_slice(result.s_final.as_slice());
        Ok(())
    })
}
