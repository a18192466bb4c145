//! Run configuration: a TOML file with strict keys.
//!
//! Unknown keys are rejected so fixture drift is caught early, and the
//! rng seed is mandatory (no entropy default) so every published
//! dataset is reproducible. Relative paths are resolved against the
//! config file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::pipeline::{PoolMode, StageConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error("config key {key}: {detail}")]
    Invalid { key: &'static str, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderMode {
    Http,
    Replay,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub mode: ProviderMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(default = "defaults::concurrency")]
    pub max_concurrency: usize,
    #[serde(default = "defaults::attempts")]
    pub retry_max_attempts: u32,
    #[serde(default = "defaults::base_delay")]
    pub retry_base_delay_ms: u64,
    #[serde(default = "defaults::max_delay")]
    pub retry_max_delay_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay_path: Option<PathBuf>,
}

mod defaults {
    pub fn concurrency() -> usize {
        4
    }
    pub fn attempts() -> u32 {
        5
    }
    pub fn base_delay() -> u64 {
        1_000
    }
    pub fn max_delay() -> u64 {
        60_000
    }
    pub fn max_pairs() -> u32 {
        5
    }
    pub fn eval_sub_count() -> u32 {
        4
    }
    pub fn parse_retry_limit() -> u32 {
        1
    }
    pub fn split() -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolModeConfig {
    #[default]
    OrderedWithSeed,
    OrderedVariantsOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    #[serde(default = "defaults::max_pairs")]
    pub max_pairs_per_seed: u32,
    #[serde(default = "defaults::eval_sub_count")]
    pub eval_sub_count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_seed_cap: Option<u32>,
    pub rng_seed: u64,
    #[serde(default = "defaults::parse_retry_limit")]
    pub parse_retry_limit: u32,
    #[serde(default)]
    pub pool_mode: PoolModeConfig,
    #[serde(default = "defaults::split")]
    pub split_eval_from_train: bool,
}

impl StageSection {
    pub fn to_stage_config(&self) -> StageConfig {
        StageConfig {
            max_pairs_per_seed: self.max_pairs_per_seed,
            eval_sub_count: self.eval_sub_count,
            eval_seed_cap: self.eval_seed_cap,
            rng_seed: self.rng_seed,
            parse_retry_limit: self.parse_retry_limit,
            pool_mode: match self.pool_mode {
                PoolModeConfig::OrderedWithSeed => PoolMode::OrderedWithSeed,
                PoolModeConfig::OrderedVariantsOnly => PoolMode::OrderedVariantsOnly,
            },
            split_eval_from_train: self.split_eval_from_train,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingMode {
    File,
    Endpoint,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub mode: EmbeddingMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub provider: ProviderConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_provider: Option<ProviderConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_provider: Option<ProviderConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingConfig>,
    pub stage: StageSection,
    #[serde(default)]
    pub paths: PathsSection,
}

impl Config {
    /// The judge falls back to the pipeline provider when unset.
    pub fn judge(&self) -> &ProviderConfig {
        self.judge_provider.as_ref().unwrap_or(&self.provider)
    }

    /// The candidate falls back to the pipeline provider when unset.
    pub fn candidate(&self) -> &ProviderConfig {
        self.candidate_provider.as_ref().unwrap_or(&self.provider)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (section, provider) in [
            ("provider", Some(&self.provider)),
            ("judge_provider", self.judge_provider.as_ref()),
            ("candidate_provider", self.candidate_provider.as_ref()),
        ] {
            let Some(provider) = provider else { continue };
            if provider.mode == ProviderMode::Http && provider.base_url.is_none() {
                return Err(ConfigError::Invalid {
                    key: "base_url",
                    detail: format!("{section}: required when mode = \"http\""),
                });
            }
            if provider.max_concurrency == 0 {
                return Err(ConfigError::Invalid {
                    key: "max_concurrency",
                    detail: format!("{section}: must be at least 1"),
                });
            }
            if provider.retry_max_attempts == 0 {
                return Err(ConfigError::Invalid {
                    key: "retry_max_attempts",
                    detail: format!("{section}: must be at least 1"),
                });
            }
            if provider.temperature.is_nan() || provider.temperature < 0.0 {
                return Err(ConfigError::Invalid {
                    key: "temperature",
                    detail: format!("{section}: must be >= 0"),
                });
            }
        }
        if self.stage.max_pairs_per_seed == 0 {
            return Err(ConfigError::Invalid {
                key: "max_pairs_per_seed",
                detail: "must be at least 1".into(),
            });
        }
        if self.stage.eval_sub_count == 0 {
            return Err(ConfigError::Invalid {
                key: "eval_sub_count",
                detail: "must be at least 1".into(),
            });
        }
        if let Some(embedding) = &self.embedding {
            match embedding.mode {
                EmbeddingMode::File if embedding.path.is_none() => {
                    return Err(ConfigError::Invalid {
                        key: "embedding.path",
                        detail: "required when mode = \"file\"".into(),
                    });
                }
                EmbeddingMode::Endpoint if embedding.base_url.is_none() => {
                    return Err(ConfigError::Invalid {
                        key: "embedding.base_url",
                        detail: "required when mode = \"endpoint\"".into(),
                    });
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Hash of the effective configuration (after flag overrides);
    /// changing any key invalidates every manifest stage.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// The effective config as JSON, echoed into the run manifest.
    pub fn as_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn resolve(base: &Path, path: &mut Option<PathBuf>) {
    if let Some(p) = path {
        if p.is_relative() {
            *p = base.join(&p);
        }
    }
}

/// Loads and validates a config file. Missing required keys and type
/// mismatches surface with the offending key named by the TOML parser.
pub fn load_config(path: &Path) -> Result<Config, ConfigError> {
    let body = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut config: Config = toml::from_str(&body).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    resolve(base, &mut config.provider.cache_dir);
    resolve(base, &mut config.provider.replay_path);
    if let Some(provider) = config.judge_provider.as_mut() {
        resolve(base, &mut provider.cache_dir);
        resolve(base, &mut provider.replay_path);
    }
    if let Some(provider) = config.candidate_provider.as_mut() {
        resolve(base, &mut provider.cache_dir);
        resolve(base, &mut provider.replay_path);
    }
    if let Some(embedding) = &mut config.embedding {
        resolve(base, &mut embedding.path);
    }
    resolve(base, &mut config.paths.run_dir);
    resolve(base, &mut config.paths.seeds);
    config.validate()?;
    Ok(config)
}
