//! Run configuration shared by every pipeline stage, read from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::fusion::{Backend, BackendError, ChatClient};
use crate::instructions::Variant;
use crate::jsonl::sha256_hex;
use crate::metrics::DEFAULT_KS;
use crate::store::DEFAULT_SEQUENCE_CAP;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mock" => Ok(BackendKind::Mock),
            "http" => Ok(BackendKind::Http),
            other => Err(format!("unknown backend kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    #[serde(default)]
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default = "default_model")]
    pub model_name: String,
}

fn default_model() -> String {
    "mock".into()
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint: None,
            model_name: default_model(),
        }
    }
}

impl BackendConfig {
    /// An http backend reads its bearer token from `HKFR_API_KEY`.
    pub fn build(&self) -> Result<Backend, BackendError> {
        match self.kind {
            BackendKind::Mock => Ok(Backend::mock(&self.model_name)),
            BackendKind::Http => {
                let endpoint = self.endpoint.as_deref().ok_or_else(|| {
                    BackendError::InvalidRequest("http backend requires an endpoint".into())
                })?;
                Ok(Backend::http(
                    ChatClient::from_env(endpoint)?,
                    &self.model_name,
                ))
            }
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Behavior store root; `<work dir>/store` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub store_path: Option<PathBuf>,
    /// The tuned model.
    pub backend: BackendConfig,
    /// Untuned model for the no-instruction-tuning comparison.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_backend: Option<BackendConfig>,
    pub concurrency: usize,
    pub sequence_cap: usize,
    pub cutoff_timestamp: i64,
    pub ks: Vec<usize>,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            store_path: None,
            backend: BackendConfig::default(),
            base_backend: None,
            concurrency: 4,
            sequence_cap: DEFAULT_SEQUENCE_CAP,
            cutoff_timestamp: crate::DEFAULT_CUTOFF_TIMESTAMP,
            ks: DEFAULT_KS.to_vec(),
            variant: Variant::Full,
            seed: 7,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.concurrency == 0 {
            return Err(ConfigError::Invalid(
                "concurrency must be at least 1".into(),
            ));
        }
        if self.sequence_cap == 0 {
            return Err(ConfigError::Invalid(
                "sequence_cap must be at least 1".into(),
            ));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(ConfigError::Invalid(
                "ks must be non-empty and positive".into(),
            ));
        }
        for (name, b) in [
            ("backend", Some(&self.backend)),
            ("base_backend", self.base_backend.as_ref()),
        ] {
            if let Some(b) = b {
                if b.kind == BackendKind::Http && b.endpoint.as_deref().is_none_or(str::is_empty) {
                    return Err(ConfigError::Invalid(format!(
                        "{name}: http backend requires endpoint"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form; logged by every stage.
    pub fn digest(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    /// Longest list requested from the recommender.
    pub fn max_k(&self) -> usize {
        self.ks.iter().copied().max().unwrap_or(DEFAULT_KS[1])
    }

    pub fn store_root(&self, work_dir: &Path) -> PathBuf {
        self.store_path
            .clone()
            .unwrap_or_else(|| work_dir.join("store"))
    }
}
