//! Run configuration files.
//!
//! A config file is either a bare model description or an object with a
//! `model` key plus command-level fields.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spikelab::model::ModelConfig;

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_DRAWS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

/// Every optional field falls back to the default documented on the flag.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub reps: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub n_values: Option<Vec<usize>>,
    #[serde(default)]
    pub d_over_n: Option<f64>,
    #[serde(default)]
    pub draws: Option<usize>,
    #[serde(default)]
    pub monitored_noise: Option<usize>,
    /// Treat the sample size as fixed (random limits).
    #[serde(default)]
    pub n_fixed: Option<bool>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub format: Option<Format>,
}

impl RunConfig {
    fn bare(model: ModelConfig) -> Self {
        Self {
            model,
            reps: None,
            seed: None,
            n_values: None,
            d_over_n: None,
            draws: None,
            monitored_noise: None,
            n_fixed: None,
            out: None,
            format: None,
        }
    }
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn parse(text: &str, origin: &str) -> Result<RunConfig, ConfigError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| ConfigError(format!("{origin}: invalid JSON: {e}")))?;
    let wrapped = value.as_object().is_some_and(|o| o.contains_key("model"));
    if wrapped {
        serde_json::from_value(value).map_err(|e| ConfigError(format!("{origin}: {e}")))
    } else {
        serde_json::from_value(value)
            .map(RunConfig::bare)
            .map_err(|e| ConfigError(format!("{origin}: {e}")))
    }
}

pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    parse(&text, &path.display().to_string())
}
