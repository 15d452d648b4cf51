//! Pipeline configuration: a single TOML document plus env vars for secrets.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augmenter::DEFAULT_FORBIDDEN;
use crate::gateway::BackendConfig;
use crate::sampler::DEFAULT_TAXONOMY;
use crate::util::sha256_hex;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Model roles the routing table distinguishes.
pub const ROLE_AUGMENTER: &str = "augmenter";
pub const ROLE_JUDGE: &str = "judge";
pub const ROLE_SCORER: &str = "scorer";

/// role -> (language -> model), with a `default` language fallback.
///
/// The default table routes Chinese augmentation to `qwen-max` and everything
/// else to `gpt-4`, judging to `gpt-4-turbo` and scoring to `llama3-8b`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelRouting(pub BTreeMap<String, BTreeMap<String, String>>);

impl Default for ModelRouting {
    fn default() -> Self {
        let mut table = BTreeMap::new();
        let mut augmenter = BTreeMap::new();
        augmenter.insert("zh".to_string(), "qwen-max".to_string());
        augmenter.insert("default".to_string(), "gpt-4".to_string());
        table.insert(ROLE_AUGMENTER.to_string(), augmenter);
        let mut judge = BTreeMap::new();
        judge.insert("default".to_string(), "gpt-4-turbo".to_string());
        table.insert(ROLE_JUDGE.to_string(), judge);
        let mut scorer = BTreeMap::new();
        scorer.insert("default".to_string(), "llama3-8b".to_string());
        table.insert(ROLE_SCORER.to_string(), scorer);
        Self(table)
    }
}

impl ModelRouting {
    pub fn model_for(&self, role: &str, language: &str) -> &str {
        self.0
            .get(role)
            .and_then(|langs| langs.get(language).or_else(|| langs.get("default")))
            .map(String::as_str)
            .unwrap_or("gpt-4")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub backend: BackendConfig,
    pub model_routing: ModelRouting,
    pub expansion_n: usize,
    pub shuffle_frac: f64,
    pub filter_threshold: f64,
    pub rng_seed: u64,
    pub taxonomy: Vec<String>,
    pub template_dir: Option<PathBuf>,
    pub forbidden_strings: Vec<String>,
    pub expansion_retry_budget: usize,
    /// Run both judge orders and de-swap (position-bias debiasing).
    pub judge_debias: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            backend: BackendConfig::default(),
            model_routing: ModelRouting::default(),
            expansion_n: 2,
            shuffle_frac: crate::trainset::DEFAULT_SHUFFLE_FRAC,
            filter_threshold: 6.0,
            rng_seed: 0,
            taxonomy: DEFAULT_TAXONOMY.iter().map(|s| s.to_string()).collect(),
            template_dir: None,
            forbidden_strings: DEFAULT_FORBIDDEN.iter().map(|s| s.to_string()).collect(),
            expansion_retry_budget: 2,
            judge_debias: true,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let config: Self = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.shuffle_frac) {
            return Err(ConfigError::Invalid(format!(
                "shuffle_frac {} outside [0, 1]",
                self.shuffle_frac
            )));
        }
        if self.expansion_n < 1 {
            return Err(ConfigError::Invalid("expansion_n must be >= 1".into()));
        }
        if !(1.0..=10.0).contains(&self.filter_threshold) {
            return Err(ConfigError::Invalid(format!(
                "filter_threshold {} outside [1, 10]",
                self.filter_threshold
            )));
        }
        if self.taxonomy.is_empty() {
            return Err(ConfigError::Invalid("taxonomy must not be empty".into()));
        }
        Ok(())
    }

    /// Stable digest over the whole configuration.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        sha256_hex(canonical.as_bytes())
    }
}
