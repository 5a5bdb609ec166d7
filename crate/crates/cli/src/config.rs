use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cag_core::backends::{BackendPolicy, RoleModels};
use cag_core::calibration::{BucketScheme, DecisionConfig};
use cag_core::curation::DEFAULT_KEEP_THRESHOLD;
use cag_core::verification::DEFAULT_TOP_K;
use cag_core::ReliabilityLabel;
use serde::{Deserialize, Serialize};

use crate::args::GlobalArgs;

/// Binary threshold used when neither config nor flags choose one.
pub const DEFAULT_TAU: f64 = 0.4;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    /// OpenAI-compatible base URL; `CAG_API_BASE` is used when unset.
    pub endpoint: Option<String>,
    /// JSON search endpoint; `CAG_SEARCH_URL` is used when unset.
    pub search_endpoint: Option<String>,
    pub policy: BackendPolicy,
    pub top_k: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            endpoint: None,
            search_endpoint: None,
            policy: BackendPolicy::default(),
            top_k: DEFAULT_TOP_K,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BucketConfig {
    pub tau: Option<f64>,
    pub thresholds: Option<Vec<f64>>,
    pub labels: Option<Vec<ReliabilityLabel>>,
}

impl Default for BucketConfig {
    fn default() -> Self {
        BucketConfig {
            tau: Some(DEFAULT_TAU),
            thresholds: None,
            labels: None,
        }
    }
}

impl BucketConfig {
    pub fn scheme(&self) -> Result<BucketScheme> {
        let scheme = match (&self.thresholds, &self.labels, self.tau) {
            (Some(t), Some(l), _) => BucketScheme::new(t.clone(), l.clone())?,
            (Some(_), None, _) => bail!("bucket.thresholds needs bucket.labels"),
            (None, _, Some(tau)) => BucketScheme::binary(tau)?,
            (None, _, None) => BucketScheme::binary(DEFAULT_TAU)?,
        };
        Ok(scheme)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub prompts: Option<PathBuf>,
    pub fixtures: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub backend: BackendConfig,
    pub models: RoleModels,
    pub bucket: BucketConfig,
    pub decision: DecisionConfig,
    pub workers: usize,
    pub seed: u64,
    pub keep_threshold: u8,
    pub paths: PathsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            backend: BackendConfig::default(),
            models: RoleModels::default(),
            bucket: BucketConfig::default(),
            decision: DecisionConfig {
                u1: 1.0,
                u2: 1.0,
                epsilon: 0.0,
            },
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            seed: 0,
            keep_threshold: DEFAULT_KEEP_THRESHOLD,
            paths: PathsConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("--config: cannot read {}", path.display()))?;
        serde_json::from_str(&text)
            .with_context(|| format!("--config: invalid config {}", path.display()))
    }

    /// Config file (if any), then flags on top.
    pub fn resolve(global: &GlobalArgs) -> Result<Self> {
        let mut cfg = match &global.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = global.seed {
            cfg.seed = seed;
        }
        if let Some(workers) = global.workers {
            cfg.workers = workers;
        }
        if let Some(dir) = &global.fixtures {
            cfg.paths.fixtures = Some(dir.clone());
        }
        if let Some(dir) = &global.out_dir {
            cfg.paths.out_dir = Some(dir.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            bail!("--workers must be at least 1");
        }
        if self.backend.top_k == 0 {
            bail!("backend.top_k must be at least 1");
        }
        if self.keep_threshold > 5 {
            bail!("keep_threshold must be in 0..=5");
        }
        self.backend.policy.validate()?;
        self.decision.validate()?;
        self.bucket.scheme()?;
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths
            .out_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}
