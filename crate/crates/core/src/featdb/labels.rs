//! Cross-vocabulary label matching and fallback-database merging.

use serde::Serialize;

use super::FeatureDatabase;
use crate::error::{Error, Result};
use crate::types::{FeatureRecord, Vocabulary};

/// Text-embedding cosine a class pair must exceed to count as the same class.
pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.95;

pub const FALLBACK_TAG: &str = "fallback";

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}

/// Maps each class of `from` to its most similar class of `to`, when that
/// similarity is strictly above `threshold`. Ties go to the lower id in `to`.
pub fn match_labels(from: &Vocabulary, to: &Vocabulary, threshold: f64) -> Result<Vec<Option<usize>>> {
    let src = from.embeddings()?;
    let dst = to.embeddings()?;
    if let (Some(a), Some(b)) = (from.embedding_dim(), to.embedding_dim()) {
        if a != b {
            return Err(Error::DimMismatch { expected: a, found: b });
        }
    }
    Ok(src
        .iter()
        .map(|s| {
            let mut best: Option<(usize, f64)> = None;
            for (j, d) in dst.iter().enumerate() {
                let sim = cosine(s, d);
                if best.is_none_or(|(_, b)| sim > b) {
                    best = Some((j, sim));
                }
            }
            best.filter(|&(_, sim)| sim > threshold).map(|(j, _)| j)
        })
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CoverageReport {
    /// Target classes that received fallback records, with the count inserted.
    pub filled: Vec<(String, usize)>,
    /// Target classes with no records in either database.
    pub missing: Vec<String>,
}

/// Fills target classes that have no records in `db` from `fallback`.
///
/// Target classes are found in `db` by name. For every empty one, all
/// fallback records of the matched fallback class are inserted under the
/// target class, tagged `"fallback"`; the class is appended to the database
/// vocabulary if needed. Running this twice is the same as running it once.
pub fn ensure_coverage(
    db: &mut FeatureDatabase,
    target: &Vocabulary,
    fallback: &FeatureDatabase,
    threshold: f64,
) -> Result<CoverageReport> {
    if fallback.dim() != db.dim() {
        return Err(Error::DimMismatch {
            expected: db.dim(),
            found: fallback.dim(),
        });
    }
    let counts = db.label_counts();
    let empty: Vec<usize> = (0..target.len())
        .filter(|&t| {
            let name = &target.entries()[t].name;
            db.vocabulary().id_of(name).is_none_or(|id| counts[id] == 0)
        })
        .collect();
    let mut report = CoverageReport::default();
    if empty.is_empty() {
        return Ok(report);
    }
    let mapping = match_labels(target, fallback.vocabulary(), threshold)?;
    for t in empty {
        let entry = &target.entries()[t];
        let Some(source) = mapping[t] else {
            report.missing.push(entry.name.clone());
            continue;
        };
        let records: Vec<&FeatureRecord> = fallback.records().iter().filter(|r| r.label_id == source).collect();
        if records.is_empty() {
            report.missing.push(entry.name.clone());
            continue;
        }
        let label_id = match db.vocabulary().id_of(&entry.name) {
            Some(id) => id,
            None => db.vocabulary_mut().push(entry.clone())?,
        };
        for r in &records {
            db.insert(FeatureRecord {
                feature: r.feature.clone(),
                label_id,
                source_tag: FALLBACK_TAG.to_owned(),
            })?;
        }
        report.filled.push((entry.name.clone(), records.len()));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::VocabularyEntry;

    fn unit(angle_deg: f64) -> Vec<f32> {
        let r = angle_deg.to_radians();
        vec![r.cos() as f32, r.sin() as f32, 0.0]
    }

    fn vocab(entries: &[(&str, Vec<f32>)]) -> Vocabulary {
        Vocabulary::new(
            entries
                .iter()
                .map(|(n, e)| VocabularyEntry::new(*n).embedding(e.clone()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_mapping() {
        let v = vocab(&[("a", unit(0.0)), ("b", unit(90.0)), ("c", vec![0.0, 0.0, 1.0])]);
        assert_eq!(match_labels(&v, &v, 0.95).unwrap(), vec![Some(0), Some(1), Some(2)]);
    }

    #[test]
    fn orthogonal_is_empty() {
        let a = vocab(&[("a", unit(0.0))]);
        let b = vocab(&[("x", unit(90.0)), ("y", vec![0.0, 0.0, 1.0])]);
        assert_eq!(match_labels(&a, &b, 0.95).unwrap(), vec![None]);
    }

    #[test]
    fn many_to_one() {
        let target = vocab(&[("x", unit(0.0))]);
        let a = vocab(&[
            ("a1", unit(0.97f64.acos().to_degrees())),
            ("a2", unit(-(0.96f64.acos().to_degrees()))),
        ]);
        let sims: Vec<f64> = a.embeddings().unwrap().iter().map(|e| cosine(e, &unit(0.0))).collect();
        assert!((sims[0] - 0.97).abs() < 1e-6 && (sims[1] - 0.96).abs() < 1e-6);
        assert_eq!(match_labels(&a, &target, 0.95).unwrap(), vec![Some(0), Some(0)]);
    }

    #[test]
    fn threshold_extremes() {
        let a = vocab(&[("a", unit(0.0)), ("b", unit(40.0)), ("c", unit(170.0))]);
        let b = vocab(&[("x", unit(0.0)), ("y", unit(100.0))]);
        assert!(match_labels(&a, &b, 1.0 + 1e-9).unwrap().iter().all(Option::is_none));
        assert!(match_labels(&a, &b, -1.0 - 1e-9).unwrap().iter().all(Option::is_some));
        // strict inequality: exact cosine 1 does not pass threshold 1
        assert_eq!(match_labels(&a, &b, 1.0).unwrap()[0], None);
    }

    #[test]
    fn missing_embeddings() {
        let a = Vocabulary::new(vec![VocabularyEntry::new("a")]).unwrap();
        let b = vocab(&[("x", unit(0.0))]);
        assert!(matches!(match_labels(&a, &b, 0.95), Err(Error::MissingEmbeddings(_))));
    }

    fn db_with(vocab: Vocabulary, records: &[(usize, f64)]) -> FeatureDatabase {
        let mut db = FeatureDatabase::new(3, vocab).unwrap();
        for &(label, angle) in records {
            db.insert(FeatureRecord::new(unit(angle), label, "primary").unwrap())
                .unwrap();
        }
        db
    }

    #[test]
    fn coverage_fill_and_report() {
        let target = vocab(&[
            ("wall", unit(0.0)),
            ("lamp", unit(60.0)),
            ("zebra", vec![0.0, 0.0, 1.0]),
        ]);
        let mut db = db_with(vocab(&[("wall", unit(0.0))]), &[(0, 1.0), (0, 2.0)]);
        let fallback = db_with(
            vocab(&[("desk lamp", unit(61.0)), ("tree", unit(120.0))]),
            &[(0, 10.0), (1, 20.0), (0, 30.0)],
        );
        let report = ensure_coverage(&mut db, &target, &fallback, DEFAULT_MATCH_THRESHOLD).unwrap();
        assert_eq!(report.filled, vec![("lamp".to_owned(), 2)]);
        assert_eq!(report.missing, vec!["zebra".to_owned()]);
        assert_eq!(db.len(), 4);
        let lamp = db.vocabulary().id_of("lamp").unwrap();
        assert_eq!(db.records()[2].label_id, lamp);
        assert_eq!(db.records()[3].source_tag, FALLBACK_TAG);

        let snapshot = db.records().to_vec();
        let again = ensure_coverage(&mut db, &target, &fallback, DEFAULT_MATCH_THRESHOLD).unwrap();
        assert_eq!(db.records(), &snapshot[..]);
        assert!(again.filled.is_empty());
        assert_eq!(again.missing, vec!["zebra".to_owned()]);
    }

    #[test]
    fn coverage_noop_when_all_present() {
        let target = vocab(&[("wall", unit(0.0))]);
        let mut db = db_with(target.clone(), &[(0, 0.0)]);
        let fallback = db_with(vocab(&[("wall", unit(0.0))]), &[(0, 5.0)]);
        let report = ensure_coverage(&mut db, &target, &fallback, 0.95).unwrap();
        assert_eq!(report, CoverageReport::default());
        assert_eq!(db.len(), 1);
    }
}
