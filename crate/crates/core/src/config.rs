//! Pipeline configuration, read from TOML.
//!
//! ```
//! use curate_core::config::PipelineConfig;
//!
//! let cfg = PipelineConfig::from_toml_str(
//!     r#"
//!     corpus = "alpaca.json"
//!     seed = 7
//!
//!     [clustering]
//!     m = 40
//!
//!     [pairing]
//!     target_size = 240
//!     "#,
//! )
//! .unwrap();
//! assert_eq!(cfg.clustering.m, 40);
//! assert_eq!(cfg.gate.alpha, 0.75);
//! assert!(cfg.pairing.keep_singletons);
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::PerplexityDirection;
use crate::clustering::{DEFAULT_CLUSTERS, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crate::embedding::{EmbeddingKind, EmbeddingProviderConfig, TextMode};
use crate::hashing::sha256_hex;
use crate::merging::{GateConfig, MergerConfig, MergerKind};
use crate::scoring::{LogprobEndpointConfig, ScorerConfig, ScorerKind};
use crate::selection::{Allocation, SelectionBudget};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringConfig {
    pub m: usize,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            m: DEFAULT_CLUSTERS,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairingConfig {
    /// Fixed similarity threshold; ignored when `target_size` is set.
    pub tau: f64,
    /// Expected post-merge size to tune `tau` towards.
    pub target_size: Option<usize>,
    pub keep_singletons: bool,
}

impl Default for PairingConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            target_size: None,
            keep_singletons: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Cluster count for the farthest-from-centroid baseline.
    pub groups: usize,
    pub direction: PerplexityDirection,
    /// Endpoint for token log-probabilities; the offline mock is used when
    /// absent or under `--mock`.
    pub logprobs: Option<LogprobEndpointConfig>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            groups: DEFAULT_CLUSTERS,
            direction: PerplexityDirection::Lowest,
            logprobs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Seed for k-means and the random baseline.
    pub seed: u64,
    pub text_mode: TextMode,
    /// Write the `_curate` metadata (ids, provenance) into saved corpora.
    pub write_metadata: bool,
    pub embedding: EmbeddingProviderConfig,
    pub clustering: ClusteringConfig,
    pub selection: SelectionBudget,
    pub pairing: PairingConfig,
    pub merger: MergerConfig,
    pub scorer: ScorerConfig,
    pub gate: GateConfig,
    pub baseline: BaselineConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            output_dir: PathBuf::from("curate-out"),
            seed: 0,
            text_mode: TextMode::InstructionOnly,
            write_metadata: true,
            embedding: EmbeddingProviderConfig::default(),
            clustering: ClusteringConfig::default(),
            selection: SelectionBudget::default(),
            pairing: PairingConfig::default(),
            merger: MergerConfig::default(),
            scorer: ScorerConfig::default(),
            gate: GateConfig::default(),
            baseline: BaselineConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// Forces the offline providers everywhere.
    pub fn mock(mut self) -> Self {
        self.embedding.kind = EmbeddingKind::DeterministicTest;
        self.scorer.kind = ScorerKind::DeterministicMock;
        self.merger.kind = MergerKind::DeterministicMock;
        self.baseline.logprobs = None;
        self
    }

    /// SHA-256 of the canonical JSON form; names the config in reports.
    pub fn config_hash(&self) -> String {
        sha256_hex(serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        self.embedding.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.scorer.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.merger.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.gate.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.clustering.m == 0 {
            return invalid("clustering.m must be at least 1".into());
        }
        if !(self.clustering.tol.is_finite() && self.clustering.tol > 0.0) {
            return invalid(format!("clustering.tol {} must be finite and > 0", self.clustering.tol));
        }
        match self.selection.allocation {
            Allocation::ProportionalFraction { fraction } if !(fraction > 0.0 && fraction <= 1.0) => {
                return invalid(format!("selection fraction {fraction} outside (0, 1]"));
            }
            Allocation::ProportionalToClusterSize { total_target: 0 } | Allocation::UniformK { k: 0 } => {
                return invalid("selection budget must be positive".into());
            }
            _ => {}
        }
        if !(self.pairing.tau > -1.0 && self.pairing.tau <= 1.0) {
            return invalid(format!("pairing.tau {} outside (-1, 1]", self.pairing.tau));
        }
        if let Some(lp) = &self.baseline.logprobs {
            lp.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if self.baseline.groups == 0 {
            return invalid("baseline.groups must be at least 1".into());
        }
        if self.pairing.target_size == Some(0) {
            return invalid("pairing.target_size must be positive".into());
        }
        Ok(())
    }

    /// The corpus path, which is required for running.
    pub fn corpus_path(&self) -> Result<&Path, ConfigError> {
        self.corpus
            .as_deref()
            .ok_or_else(|| ConfigError::Invalid("no corpus path given".into()))
    }
}
