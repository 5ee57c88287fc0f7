//! Run configuration: built-in defaults, optionally overlaid by a TOML file,
//! then by command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classify::{ClassifierParams, DEFAULT_TEMPERATURE};
use crate::error::{Error, Result};
use crate::featdb::{Backend, HnswParams, DEFAULT_K, DEFAULT_MATCH_THRESHOLD};
use crate::io::read_file;
use crate::panoptic::AssembleConfig;
use crate::types::EnsembleConfig;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "RETSEG_THREADS";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Exact,
    #[default]
    Approx,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub db: Option<PathBuf>,
    pub fallback_db: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    /// Projection weights (RPRJ); identity when absent.
    pub projection: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub ensemble: EnsembleConfig,
    pub k: usize,
    pub temperature: f64,
    pub assemble: AssembleConfig,
    pub backend: BackendKind,
    pub hnsw: HnswParams,
    /// Cosine a fallback class must exceed to stand in for a target class.
    pub match_threshold: f64,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            ensemble: EnsembleConfig::default(),
            k: DEFAULT_K,
            temperature: DEFAULT_TEMPERATURE,
            assemble: AssembleConfig::default(),
            backend: BackendKind::default(),
            hnsw: HnswParams::default(),
            match_threshold: DEFAULT_MATCH_THRESHOLD,
            paths: Paths::default(),
        }
    }
}

fn unit_range(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{name}={v} outside [0, 1]")))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML file; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text =
            String::from_utf8(bytes).map_err(|_| Error::InvalidConfig(format!("{} is not UTF-8", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.paths.db,
            &mut cfg.paths.fallback_db,
            &mut cfg.paths.vocab,
            &mut cfg.paths.projection,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.ensemble.validate()?;
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        unit_range("score_threshold", self.assemble.score_threshold)?;
        unit_range("overlap_threshold", self.assemble.overlap_threshold)?;
        unit_range("detection_threshold", self.assemble.detection_threshold)?;
        if !(-1.0..=1.0).contains(&self.match_threshold) {
            return Err(Error::InvalidConfig(format!(
                "match_threshold={} outside [-1, 1]",
                self.match_threshold
            )));
        }
        self.hnsw.validate()
    }

    pub fn classifier_params(&self) -> ClassifierParams {
        ClassifierParams {
            ensemble: self.ensemble,
            k: self.k,
            temperature: self.temperature,
        }
    }

    pub fn search_backend(&self) -> Backend {
        match self.backend {
            BackendKind::Exact => Backend::Exact,
            BackendKind::Approx => Backend::Approximate(self.hnsw),
        }
    }
}

/// Thread cap from [`THREADS_ENV`], if set to a positive integer.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::InvalidConfig(format!(
                "{THREADS_ENV}={v} is not a positive integer"
            ))),
        },
    }
}
