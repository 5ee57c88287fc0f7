use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;
use serde_json::json;

use retseg::classify::{Classifier, ProjectionWeights};
use retseg::config::{threads_from_env, BackendKind, RunConfig};
use retseg::featdb::{self, ensure_coverage, Backend, FeatureDatabase};
use retseg::io::read_vocabulary;
use retseg::pipeline::{self, ImageInput, ImageManifest, SegmentEntry};
use retseg::synth::{write_fixture, FixtureSpec, TextEmbeddings};
use retseg::{Error, Result, Vocabulary};

#[derive(Parser)]
#[command(
    name = "retseg",
    version,
    about = "Retrieval-augmented open-vocabulary segment classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pool labelled segments from record manifests into a feature database.
    BuildDb {
        #[command(flatten)]
        common: Common,
        /// Record manifests (JSON).
        records: Vec<PathBuf>,
    },
    /// Classify the segments of one or more images.
    Classify {
        #[command(flatten)]
        common: Common,
        /// Feature map of a single image given by --mask files.
        #[arg(long)]
        features: Option<PathBuf>,
        /// Mask file (repeatable), used with --features.
        #[arg(long = "mask")]
        masks: Vec<PathBuf>,
        /// PNG rendering of the panoptic output.
        #[arg(long)]
        overlay: Option<PathBuf>,
        /// Image manifests (JSON).
        manifests: Vec<PathBuf>,
    },
    /// Score predicted panoptic maps against ground truth.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, num_args = 1.., required = true)]
        pred: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        gt: Vec<PathBuf>,
    },
    /// Evaluate a grid of blend weights on fixed inputs.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f64>>,
        /// Query manifests with ground_truth entries.
        manifests: Vec<PathBuf>,
    },
    /// Write a synthetic clustered fixture.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 0.05)]
        sigma: f64,
        #[arg(long, default_value_t = 200)]
        records_per_class: usize,
        #[arg(long, default_value_t = 1000)]
        queries: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Use random class text embeddings instead of the centroids.
        #[arg(long)]
        random_text: bool,
        /// Number of leading classes marked seen.
        #[arg(long, default_value_t = 0)]
        seen: usize,
        /// Mark every class as stuff.
        #[arg(long)]
        stuff: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Exact,
    Approx,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    db: Option<PathBuf>,
    #[arg(long)]
    fallback_db: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Projection weights (RPRJ).
    #[arg(long)]
    projection: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    #[arg(long)]
    score_threshold: Option<f64>,
    #[arg(long)]
    overlap_threshold: Option<f64>,
    #[arg(long)]
    detection_threshold: Option<f64>,
    #[arg(long)]
    match_threshold: Option<f64>,
    /// Output path (database, panoptic map or directory of maps).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let set = |slot: &mut Option<PathBuf>, v: &Option<PathBuf>| {
            if v.is_some() {
                slot.clone_from(v);
            }
        };
        set(&mut cfg.paths.db, &self.db);
        set(&mut cfg.paths.fallback_db, &self.fallback_db);
        set(&mut cfg.paths.vocab, &self.vocab);
        set(&mut cfg.paths.projection, &self.projection);
        if let Some(v) = self.alpha {
            cfg.ensemble.alpha = v;
        }
        if let Some(v) = self.beta {
            cfg.ensemble.beta = v;
        }
        if let Some(v) = self.gamma {
            cfg.ensemble.gamma = v;
        }
        if let Some(v) = self.k {
            cfg.k = v;
        }
        if let Some(v) = self.temperature {
            cfg.temperature = v;
        }
        if let Some(b) = self.backend {
            cfg.backend = match b {
                BackendArg::Exact => BackendKind::Exact,
                BackendArg::Approx => BackendKind::Approx,
            };
        }
        if let Some(v) = self.score_threshold {
            cfg.assemble.score_threshold = v;
        }
        if let Some(v) = self.overlap_threshold {
            cfg.assemble.overlap_threshold = v;
        }
        if let Some(v) = self.detection_threshold {
            cfg.assemble.detection_threshold = v;
        }
        if let Some(v) = self.match_threshold {
            cfg.match_threshold = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::InvalidConfig(format!("{flag} is required")))
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocabulary> {
    read_vocabulary(required(&cfg.paths.vocab, "--vocab")?)
}

/// Loads the database, fills target classes from the fallback database when
/// one is given, and builds the configured index.
fn load_database(cfg: &RunConfig, target: &Vocabulary) -> Result<FeatureDatabase> {
    let backend = cfg.search_backend();
    let path = required(&cfg.paths.db, "--db")?;
    let Some(fallback_path) = &cfg.paths.fallback_db else {
        return featdb::load_with(path, backend);
    };
    let mut db = featdb::decode(&retseg::io::read_file(path)?)?;
    let fallback = featdb::decode(&retseg::io::read_file(fallback_path)?)?;
    let report = ensure_coverage(&mut db, target, &fallback, cfg.match_threshold)?;
    for (name, n) in &report.filled {
        info!("filled class {name} with {n} fallback records");
    }
    for name in &report.missing {
        warn!("class {name} has no records in either database");
    }
    db.build_index(backend)?;
    Ok(db)
}

fn load_weights(cfg: &RunConfig, dim: usize) -> Result<ProjectionWeights> {
    match &cfg.paths.projection {
        Some(p) => ProjectionWeights::load(p),
        None => Ok(ProjectionWeights::identity(dim)),
    }
}

fn emit(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn build_db(common: &Common, records: &[PathBuf]) -> Result<()> {
    let cfg = common.config()?;
    let vocab = load_vocab(&cfg)?;
    let out = required(&common.out, "--out")?;
    let images = pipeline::load_images(records)?;
    let db = pipeline::build_database(&images, &vocab, Backend::Exact)?;
    featdb::save(&db, out)?;
    emit(&json!({
        "out": out,
        "records": db.len(),
        "dim": db.dim(),
        "label_counts": vocab.names().zip(db.label_counts()).collect::<Vec<_>>(),
    }))
}

fn single_image(features: &Path, masks: &[PathBuf]) -> Result<ImageInput> {
    let manifest = ImageManifest {
        features: features.to_path_buf(),
        segments: masks
            .iter()
            .map(|m| SegmentEntry {
                mask: m.clone(),
                label: None,
                confidence: 1.0,
            })
            .collect(),
        ground_truth: None,
    };
    pipeline::load_manifest(&manifest, Path::new(""), features)
}

fn output_path(out: &Path, images: usize, source: &Path, ext: &str) -> PathBuf {
    if images == 1 {
        out.to_path_buf()
    } else {
        let stem = source
            .file_stem()
            .map_or_else(|| "image".into(), |s| s.to_string_lossy());
        out.join(format!("{stem}.{ext}"))
    }
}

fn classify(
    common: &Common,
    features: &Option<PathBuf>,
    masks: &[PathBuf],
    overlay: &Option<PathBuf>,
    manifests: &[PathBuf],
) -> Result<()> {
    let cfg = common.config()?;
    let vocab = load_vocab(&cfg)?;
    let mut images = pipeline::load_images(manifests)?;
    match features {
        Some(f) => images.push(single_image(f, masks)?),
        None if !masks.is_empty() => {
            return Err(Error::InvalidConfig("--mask requires --features".into()));
        }
        None => {}
    }
    let db = load_database(&cfg, &vocab)?;
    let weights = load_weights(&cfg, db.dim())?;
    let classifier = Classifier::new(&db, &vocab, &weights, cfg.classifier_params())?;
    let results = pipeline::classify_images(&classifier, &images, &vocab, &cfg.assemble)?;
    for dir in [&common.out, overlay].into_iter().flatten() {
        if images.len() > 1 {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut report = Vec::with_capacity(images.len());
    for (img, r) in images.iter().zip(&results) {
        let mut panoptic_out = None;
        if let Some(map) = &r.panoptic {
            if let Some(out) = &common.out {
                let p = output_path(out, images.len(), &img.source, "rpan");
                map.save(&p)?;
                panoptic_out = Some(p);
            }
            if let Some(out) = overlay {
                pipeline::save_overlay(map, &output_path(out, images.len(), &img.source, "png"))?;
            }
        }
        for s in r.segments.iter().filter(|s| s.error.is_some()) {
            warn!(
                "{}: segment {} skipped: {}",
                img.source.display(),
                s.index,
                s.error.as_deref().unwrap_or("")
            );
        }
        report.push(json!({
            "source": img.source,
            "segments": r.segments,
            "panoptic": panoptic_out,
        }));
    }
    emit(&json!({ "images": report }))
}

fn evaluate(common: &Common, pred: &[PathBuf], gt: &[PathBuf]) -> Result<()> {
    let cfg = common.config()?;
    let vocab = load_vocab(&cfg)?;
    emit(&pipeline::evaluate_files(pred, gt, &vocab)?)
}

fn sweep(
    common: &Common,
    alphas: &Option<Vec<f64>>,
    betas: &Option<Vec<f64>>,
    gammas: &Option<Vec<f64>>,
    manifests: &[PathBuf],
) -> Result<()> {
    let cfg = common.config()?;
    let vocab = load_vocab(&cfg)?;
    let pick = |v: &Option<Vec<f64>>, d: f64| v.clone().unwrap_or_else(|| vec![d]);
    let configs = pipeline::grid(
        &pick(alphas, cfg.ensemble.alpha),
        &pick(betas, cfg.ensemble.beta),
        &pick(gammas, cfg.ensemble.gamma),
    )?;
    let images = pipeline::load_images(manifests)?;
    let gt = pipeline::load_ground_truth(&images)?;
    let db = load_database(&cfg, &vocab)?;
    let weights = load_weights(&cfg, db.dim())?;
    let classifier = Classifier::new(&db, &vocab, &weights, cfg.classifier_params())?;
    let rows = pipeline::sweep(&classifier, &images, &gt, &vocab, &configs, &cfg.assemble)?;
    emit(&json!({ "rows": rows }))
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = threads_from_env()? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Internal(e.to_string()))?;
    }
    match &cli.command {
        Command::BuildDb { common, records } => build_db(common, records),
        Command::Classify {
            common,
            features,
            masks,
            overlay,
            manifests,
        } => classify(common, features, masks, overlay, manifests),
        Command::Evaluate { common, pred, gt } => evaluate(common, pred, gt),
        Command::Sweep {
            common,
            alphas,
            betas,
            gammas,
            manifests,
        } => sweep(common, alphas, betas, gammas, manifests),
        Command::Synth {
            out,
            classes,
            dim,
            sigma,
            records_per_class,
            queries,
            seed,
            random_text,
            seen,
            stuff,
        } => {
            let spec = FixtureSpec {
                classes: *classes,
                dim: *dim,
                sigma: *sigma,
                records_per_class: *records_per_class,
                queries: *queries,
                seed: *seed,
                text: if *random_text {
                    TextEmbeddings::Random
                } else {
                    TextEmbeddings::Centroids
                },
                seen_classes: *seen,
                things: !*stuff,
            };
            emit(&write_fixture(out, &spec)?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_invalid_input() { 2 } else { 1 })
        }
    }
}
