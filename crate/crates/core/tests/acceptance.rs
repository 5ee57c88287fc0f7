//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::HashMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use retseg::classify::{ensemble, Classifier, ClassifierParams, ProjectionWeights};
use retseg::featdb::{self, Backend, FeatureDatabase, HnswParams};
use retseg::io::{decode_feature_map, decode_mask, encode_feature_map, encode_mask};
use retseg::metrics::{evaluate, panoptic_quality, pq_tally};
use retseg::panoptic::{AssembleConfig, PanopticMap, SegmentInfo};
use retseg::pipeline;
use retseg::pooling::{mask_pool, mask_to_coverage};
use retseg::rle::{self, Bitmap};
use retseg::synth::{self, random_unit, FixtureSpec, TextEmbeddings};
use retseg::{DenseFeatureMap, EnsembleConfig, FeatureRecord, ScoreVector, Vocabulary, VocabularyEntry};

type Criterion<'a> = (&'static str, Box<dyn FnOnce() -> Outcome + 'a>);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn vocab_of(n: usize) -> Vocabulary {
    Vocabulary::new((0..n).map(|i| VocabularyEntry::new(format!("c{i}"))).collect()).unwrap()
}

fn unit_database(rng: &mut ChaCha8Rng, n: usize, dim: usize, labels: usize) -> FeatureDatabase {
    let mut db = FeatureDatabase::new(dim, vocab_of(labels)).unwrap();
    for i in 0..n {
        db.insert(FeatureRecord::from_unit(random_unit(rng, dim), i % labels, "random").unwrap())
            .unwrap();
    }
    db
}

/// Independent scan: f32 squared differences summed in order, then sqrt;
/// ascending distance, ties by record index.
fn brute_force_knn(db: &FeatureDatabase, key: &[f32], k: usize) -> Vec<(u32, usize)> {
    let mut all: Vec<(f32, usize)> = db
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut acc = 0.0f32;
            for (a, b) in r.feature.iter().zip(key) {
                acc += (a - b) * (a - b);
            }
            (acc.sqrt(), i)
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.truncate(k);
    all.into_iter().map(|(d, i)| (d.to_bits(), i)).collect()
}

fn knn_workload() -> (FeatureDatabase, Vec<Vec<f32>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce);
    let db = unit_database(&mut rng, 10_000, 64, 10);
    let queries = (0..500).map(|_| random_unit(&mut rng, 64)).collect();
    (db, queries)
}

fn exact_knn(db: &FeatureDatabase, queries: &[Vec<f32>]) -> Outcome {
    let mut db = db.clone();
    let start = Instant::now();
    db.build_index(Backend::Exact).unwrap();
    let got: Vec<Vec<(u32, usize)>> = queries
        .iter()
        .map(|q| {
            db.query_knn(q, 10)
                .unwrap()
                .iter()
                .map(|n| (n.distance.to_bits(), n.record_index))
                .collect()
        })
        .collect();
    let elapsed = start.elapsed();
    let mismatches = queries
        .iter()
        .zip(&got)
        .filter(|(q, g)| brute_force_knn(&db, q, 10) != **g)
        .count();
    outcome(
        mismatches == 0 && elapsed < Duration::from_secs(10),
        format!(
            "{mismatches} of 500 queries differ from the scan, {:.2?} (limit 10 s)",
            elapsed
        ),
    )
}

fn approximate_recall(db: &FeatureDatabase, queries: &[Vec<f32>]) -> Outcome {
    let mut exact = db.clone();
    exact.build_index(Backend::Exact).unwrap();
    let mut approx = db.clone();
    approx.build_index(Backend::Approximate(HnswParams::default())).unwrap();
    let mut hits = 0usize;
    for q in queries {
        let truth: Vec<usize> = exact.query_knn(q, 10).unwrap().iter().map(|n| n.record_index).collect();
        hits += approx
            .query_knn(q, 10)
            .unwrap()
            .iter()
            .filter(|n| truth.contains(&n.record_index))
            .count();
    }
    let recall = hits as f64 / (10 * queries.len()) as f64;
    outcome(recall >= 0.95, format!("recall@10 = {recall:.4} (need >= 0.95)"))
}

/// Replicates each patch feature to its pixels, averages masked pixels, normalizes.
fn per_pixel_oracle(map: &DenseFeatureMap, bitmap: &Bitmap) -> Vec<f64> {
    let p = map.patch_size();
    let mut acc = vec![0.0f64; map.dim()];
    let mut count = 0usize;
    for r in 0..bitmap.height() {
        for c in 0..bitmap.width() {
            if bitmap.get(r, c) {
                for (a, v) in acc.iter_mut().zip(map.patch(r / p, c / p)) {
                    *a += f64::from(*v);
                }
                count += 1;
            }
        }
    }
    let mean: Vec<f64> = acc.iter().map(|a| a / count as f64).collect();
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    mean.iter().map(|x| x / norm).collect()
}

fn pooling_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9001);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for i in 0..200 {
        let p = [2usize, 4, 16][i % 3];
        let (hp, wp) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let dim = rng.random_range(1..=16);
        let data: Vec<f32> = (0..hp * wp * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let map = DenseFeatureMap::new(hp, wp, dim, p, data).unwrap();
        let density = rng.random_range(0.05..0.95);
        let mut bitmap = Bitmap::from_fn(hp * p, wp * p, |_, _| rng.random_bool(density));
        if bitmap.bits().iter().all(|b| !b) {
            bitmap.set(0, 0, true);
        }
        let pooled = mask_pool(&map, &mask_to_coverage(&rle::encode(&bitmap), p).unwrap()).unwrap();
        let oracle = per_pixel_oracle(&map, &bitmap);
        for (a, b) in pooled.iter().zip(&oracle) {
            worst = worst.max((f64::from(*a) - b).abs());
        }
        cases += 1;
    }
    outcome(
        worst <= 1e-5,
        format!("{cases} cases, max componentwise deviation {worst:.2e} (limit 1e-5)"),
    )
}

fn segment(id: u32, class_id: u32) -> SegmentInfo {
    SegmentInfo {
        id,
        class_id,
        is_thing: true,
        score: 1.0,
        crowd: false,
    }
}

/// Random thing map with at most `per_class` segments of each class.
fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: u32, per_class: usize) -> PanopticMap {
    let mut labels = vec![0u32; h * w];
    let n = rng.random_range(1..=per_class * classes as usize);
    for s in 1..=n as u32 {
        let (r0, c0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (r1, c1) = (rng.random_range(r0..h) + 1, rng.random_range(c0..w) + 1);
        for r in r0..r1 {
            for c in c0..c1 {
                labels[r * w + c] = s;
            }
        }
    }
    let class_of: Vec<u32> = (0..=n).map(|s| (s % classes as usize) as u32).collect();
    relabel(h, w, &labels, |l| class_of[l as usize])
}

fn relabel(h: usize, w: usize, labels: &[u32], class: impl Fn(u32) -> u32) -> PanopticMap {
    let mut remap: HashMap<u32, u32> = HashMap::new();
    let mut segments = Vec::new();
    let ids = labels
        .iter()
        .map(|&l| {
            if l == 0 {
                return 0;
            }
            *remap.entry(l).or_insert_with(|| {
                let id = segments.len() as u32 + 1;
                segments.push(segment(id, class(l)));
                id
            })
        })
        .collect();
    PanopticMap::new(h, w, ids, segments).unwrap()
}

fn perturbed(rng: &mut ChaCha8Rng, gt: &PanopticMap, noise: f64) -> PanopticMap {
    let n = gt.segments().len() as u32;
    let labels: Vec<u32> = gt
        .ids()
        .iter()
        .map(|&id| {
            if rng.random_bool(noise) {
                rng.random_range(0..=n)
            } else {
                id
            }
        })
        .collect();
    relabel(gt.height(), gt.width(), &labels, |l| {
        gt.segment(l).map_or(0, |s| s.class_id)
    })
}

/// Most matched pairs with IoU > 0.5 over all one-to-one assignments, then
/// the largest IoU sum.
fn optimal_matching(pred: &PanopticMap, gt: &PanopticMap, class: u32) -> (u64, f64) {
    let gts: Vec<u32> = gt
        .segments()
        .iter()
        .filter(|s| s.class_id == class)
        .map(|s| s.id)
        .collect();
    let preds: Vec<u32> = pred
        .segments()
        .iter()
        .filter(|s| s.class_id == class)
        .map(|s| s.id)
        .collect();
    let iou: Vec<Vec<f64>> = gts
        .iter()
        .map(|&g| {
            preds
                .iter()
                .map(|&p| {
                    let (mut inter, mut union) = (0u64, 0u64);
                    for (&gi, &pi) in gt.ids().iter().zip(pred.ids()) {
                        let (in_g, in_p) = (gi == g, pi == p);
                        inter += u64::from(in_g && in_p);
                        // void ground truth does not count toward the union
                        union += u64::from(in_g || (in_p && gi != 0));
                    }
                    inter as f64 / union as f64
                })
                .collect()
        })
        .collect();
    fn search(i: usize, iou: &[Vec<f64>], used: &mut [bool]) -> (u64, f64) {
        if i == iou.len() {
            return (0, 0.0);
        }
        let mut best = search(i + 1, iou, used);
        for j in 0..used.len() {
            if !used[j] && iou[i][j] > 0.5 {
                used[j] = true;
                let (c, s) = search(i + 1, iou, used);
                used[j] = false;
                if (c + 1, s + iou[i][j]) > best {
                    best = (c + 1, s + iou[i][j]);
                }
            }
        }
        best
    }
    search(0, &iou, &mut vec![false; preds.len()])
}

fn pq_correctness() -> Outcome {
    // ground truth A = 5 px, B = 2 px; prediction covers 3 px of A: IoU 0.6, B missed
    let gt = PanopticMap::new(1, 8, vec![1, 1, 1, 1, 1, 0, 2, 2], vec![segment(1, 0), segment(2, 0)]).unwrap();
    let pred = PanopticMap::new(1, 8, vec![1, 1, 1, 0, 0, 0, 0, 0], vec![segment(1, 0)]).unwrap();
    let hand = panoptic_quality(&pred, &gt, 1).unwrap().pq;

    let mut rng = ChaCha8Rng::seed_from_u64(0x90);
    let mut disagreements = 0;
    for _ in 0..100 {
        let gt = random_map(&mut rng, 6, 8, 2, 5);
        let pred = perturbed(&mut rng, &gt, 0.25);
        let tally = pq_tally(&pred, &gt, 2).unwrap();
        for c in 0..2u32 {
            let (tp, sum) = optimal_matching(&pred, &gt, c);
            let t = &tally[c as usize];
            if t.tp != tp || (t.iou_sum.to_f64() - sum).abs() > 1e-12 {
                disagreements += 1;
            }
        }
    }

    let v = vocab_of(3);
    let mut imperfect = 0;
    for _ in 0..20 {
        let gt = random_map(&mut rng, 8, 8, 3, 3);
        let r = evaluate(std::slice::from_ref(&gt), std::slice::from_ref(&gt), &v).unwrap();
        if (r.pq, r.miou, r.map) != (1.0, 1.0, 1.0) {
            imperfect += 1;
        }
    }
    outcome(
        hand == 0.4 && disagreements == 0 && imperfect == 0,
        format!(
            "hand case PQ = {hand:?}; greedy vs optimal disagreements {disagreements}/200 class-instances; \
             pred=gt maps not scoring 1.0: {imperfect}/20"
        ),
    )
}

fn ensemble_arithmetic() -> Outcome {
    let sv = |v: f64| ScoreVector::new(vec![v, v]).unwrap();
    let cfg = EnsembleConfig::new(0.4, 0.7, 0.3).unwrap();
    let (oov, fin) = ensemble(&sv(0.6), &sv(0.8), &sv(0.5), &[true, false], &cfg).unwrap();
    let worked = (oov[0] - 0.66).abs() <= 1e-12 && (fin[0] - 0.564).abs() <= 1e-12 && (fin[1] - 0.612).abs() <= 1e-12;

    let mut rng = ChaCha8Rng::seed_from_u64(0xe5);
    let mut collapses = true;
    for _ in 0..1000 {
        let n = 6;
        let rand_sv =
            |rng: &mut ChaCha8Rng| ScoreVector::new((0..n).map(|_| rng.random_range(0.0..=1.0)).collect()).unwrap();
        let (clip, ret, iv) = (rand_sv(&mut rng), rand_sv(&mut rng), rand_sv(&mut rng));
        let seen: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let (a, b) = (rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0));
        let (o1, _) = ensemble(&clip, &ret, &iv, &seen, &EnsembleConfig::new(a, b, 1.0).unwrap()).unwrap();
        let (o0, _) = ensemble(&clip, &ret, &iv, &seen, &EnsembleConfig::new(a, b, 0.0).unwrap()).unwrap();
        let same = EnsembleConfig::new(a, a, rng.random_range(0.0..=1.0)).unwrap();
        let (_, f1) = ensemble(&clip, &ret, &iv, &seen, &same).unwrap();
        let flipped: Vec<bool> = seen.iter().map(|s| !s).collect();
        let (_, f2) = ensemble(&clip, &ret, &iv, &flipped, &same).unwrap();
        collapses &= o1 == ret && o0 == clip && f1 == f2;
    }
    outcome(
        worked && collapses,
        format!(
            "s_oov {:.15}, seen {:.15}, unseen {:.15}; endpoint collapses exact: {collapses}",
            oov[0], fin[0], fin[1]
        ),
    )
}

fn nearest_centroid(feature: &[f32], centroids: &[Vec<f32>]) -> usize {
    let dist = |c: &Vec<f32>| {
        feature
            .iter()
            .zip(c)
            .map(|(a, b)| f64::from(a - b).powi(2))
            .sum::<f64>()
    };
    (0..centroids.len())
        .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
        .unwrap()
}

fn synthetic_end_to_end(dir: &Path) -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| {
        let start = Instant::now();
        let spec = FixtureSpec::default();
        let files = synth::write_fixture(dir, &spec).unwrap();
        let centroids = synth::fixture(&spec).unwrap().centroids;
        let vocab = retseg::io::read_vocabulary(&files.vocab).unwrap();
        let records = pipeline::load_images(&files.records).unwrap();
        let built = pipeline::build_database(&records, &vocab, Backend::Exact).unwrap();
        let db_path = dir.join("db.rfdb");
        featdb::save(&built, &db_path).unwrap();
        let db = featdb::load_with(&db_path, Backend::default()).unwrap();
        let weights = ProjectionWeights::identity(db.dim());
        let classifier = Classifier::new(&db, &vocab, &weights, ClassifierParams::default()).unwrap();
        let queries = pipeline::load_images(&files.queries).unwrap();
        let results = pipeline::classify_images(&classifier, &queries, &vocab, &AssembleConfig::default()).unwrap();
        let elapsed = start.elapsed();

        let (mut total, mut ret_ok, mut full_ok, mut oracle_vs_truth) = (0usize, 0usize, 0usize, 0usize);
        let fixture = synth::fixture(&spec).unwrap();
        for ((img, res), scene) in queries.iter().zip(&results).zip(&fixture.queries) {
            for ((seg, out), &truth) in img.segments.iter().zip(&res.segments).zip(&scene.labels) {
                let feature = retseg::pooling::pool_segment(&img.features, &seg.mask).unwrap();
                let expected = nearest_centroid(&feature, &centroids);
                let scores = out.scores.as_ref().unwrap();
                total += 1;
                ret_ok += usize::from(scores.s_ret.argmax().unwrap().0 == expected);
                full_ok += usize::from(out.class_id == Some(expected));
                oracle_vs_truth += usize::from(expected == truth);
            }
        }
        let (ret_acc, full_acc) = (ret_ok as f64 / total as f64, full_ok as f64 / total as f64);
        outcome(
            total == 1000 && ret_acc >= 0.99 && full_acc >= 0.99 && elapsed < Duration::from_secs(30),
            format!(
                "{total} queries; retrieval top-1 {ret_acc:.4}, full pipeline top-1 {full_acc:.4} (need >= 0.99); \
                 oracle agrees with generating label on {oracle_vs_truth}; {:.2?} single-threaded (limit 30 s)",
                elapsed
            ),
        )
    })
}

fn sweep_monotone(dir: &Path) -> Outcome {
    let spec = FixtureSpec {
        classes: 10,
        records_per_class: 50,
        queries: 400,
        seed: 0x5eeb,
        text: TextEmbeddings::Random,
        seen_classes: 0,
        ..FixtureSpec::default()
    };
    let files = synth::write_fixture(dir, &spec).unwrap();
    let vocab = retseg::io::read_vocabulary(&files.vocab).unwrap();
    let records = pipeline::load_images(&files.records).unwrap();
    let db = pipeline::build_database(&records, &vocab, Backend::Exact).unwrap();
    let weights = ProjectionWeights::identity(db.dim());
    let classifier = Classifier::new(&db, &vocab, &weights, ClassifierParams::default()).unwrap();
    let queries = pipeline::load_images(&files.queries).unwrap();
    let gt = pipeline::load_ground_truth(&queries).unwrap();
    let grid = pipeline::grid(&[0.4], &[0.7], &[0.0, 0.3, 0.7, 1.0]).unwrap();
    let cfg = AssembleConfig {
        score_threshold: 0.0,
        ..AssembleConfig::default()
    };
    let rows = pipeline::sweep(&classifier, &queries, &gt, &vocab, &grid, &cfg).unwrap();
    let pq: Vec<f64> = rows.iter().map(|r| r.pq).collect();
    let monotone = pq.windows(2).all(|w| w[1] >= w[0]);
    outcome(
        monotone && rows.len() == 4,
        format!("PQ at gamma 0, 0.3, 0.7, 1.0 = {pq:.4?}"),
    )
}

fn persistence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xdb);
    let mut db = unit_database(&mut rng, 2000, 32, 7);
    let bytes = featdb::encode(&db).unwrap();
    let rfdb_exact = featdb::encode(&featdb::decode(&bytes).unwrap()).unwrap() == bytes;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("db.rfdb");
    let mut queries_identical = true;
    for backend in [Backend::Exact, Backend::Approximate(HnswParams::default())] {
        db.build_index(backend).unwrap();
        featdb::save(&db, &path).unwrap();
        let loaded = featdb::load_with(&path, backend).unwrap();
        for _ in 0..50 {
            let q = random_unit(&mut rng, 32);
            queries_identical &= db.query_knn(&q, 10).unwrap() == loaded.query_knn(&q, 10).unwrap();
        }
    }

    let mut dfmp_exact = true;
    let mut rsmk_exact = true;
    for _ in 0..50 {
        let (hp, wp, d) = (rng.random_range(1..8), rng.random_range(1..8), rng.random_range(1..20));
        let data: Vec<f32> = (0..hp * wp * d)
            .map(|_| f32::from_bits(rng.random::<u32>() & 0xbf7f_ffff))
            .collect();
        let map = DenseFeatureMap::new(hp, wp, d, 4, data).unwrap();
        let b = encode_feature_map(&map).unwrap();
        let back = decode_feature_map(&b).unwrap();
        dfmp_exact &= encode_feature_map(&back).unwrap() == b
            && back
                .data()
                .iter()
                .zip(map.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
        let bitmap = Bitmap::from_fn(hp * 4, wp * 4, |_, _| rng.random_bool(0.3));
        let mask = rle::encode(&bitmap);
        let m = encode_mask(&mask).unwrap();
        rsmk_exact &= decode_mask(&m).unwrap() == mask && encode_mask(&decode_mask(&m).unwrap()).unwrap() == m;
    }
    outcome(
        rfdb_exact && queries_identical && dfmp_exact && rsmk_exact,
        format!(
            "RFDB bytes stable {rfdb_exact}, post-load queries identical {queries_identical}, \
             DFMP bit-exact {dfmp_exact}, RSMK bit-exact {rsmk_exact}"
        ),
    )
}

fn main() -> ExitCode {
    let scratch = tempfile::tempdir().unwrap();
    let (db, queries) = knn_workload();
    let criteria: Vec<Criterion> = vec![
        (
            "exact k-NN equals brute-force scan",
            Box::new(|| exact_knn(&db, &queries)),
        ),
        (
            "approximate backend recall@10",
            Box::new(|| approximate_recall(&db, &queries)),
        ),
        ("mask pooling matches per-pixel oracle", Box::new(pooling_oracle)),
        ("panoptic quality correctness", Box::new(pq_correctness)),
        ("ensemble arithmetic", Box::new(ensemble_arithmetic)),
        (
            "synthetic end-to-end accuracy",
            Box::new(|| synthetic_end_to_end(&scratch.path().join("e2e"))),
        ),
        (
            "sweep PQ non-decreasing in gamma",
            Box::new(|| sweep_monotone(&scratch.path().join("sweep"))),
        ),
        ("persistence round trips", Box::new(persistence)),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let o = run();
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {failed} failed");
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
