//! Run configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditioning::{BundleOptions, DEFAULT_INSTRUCTION, DEFAULT_NEGATIVE_PROMPT};
use crate::retrieval::{Cardinalities, RetrievalParams, DEFAULT_K, DEFAULT_N, DEFAULT_SUFFIX};

/// Environment variable naming a JSON [`RunConfig`] file.
pub const CONFIG_ENV: &str = "FAIRRAG_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("n must be >= k >= 1 (n={n}, k={k})")]
    InvalidNk { n: usize, k: usize },
    #[error("cannot read config {path}: {msg}")]
    Read { path: String, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n: usize,
    pub k: usize,
    pub seed: u64,
    pub cardinalities: Cardinalities,
    pub suffix: String,
    pub instruction: String,
    pub negative_prompt: Option<String>,
    pub debiased_query: bool,
    pub balanced_sampling: bool,
    pub text_instruction: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n: DEFAULT_N,
            k: DEFAULT_K,
            seed: 0,
            cardinalities: Cardinalities::default(),
            suffix: DEFAULT_SUFFIX.to_string(),
            instruction: DEFAULT_INSTRUCTION.to_string(),
            negative_prompt: Some(DEFAULT_NEGATIVE_PROMPT.to_string()),
            debiased_query: true,
            balanced_sampling: true,
            text_instruction: true,
        }
    }
}

impl RunConfig {
    /// Everything off: plain query, first K by similarity, no instruction.
    pub fn base_rag() -> Self {
        Self {
            debiased_query: false,
            balanced_sampling: false,
            text_instruction: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.k == 0 || self.n < self.k {
            return Err(ConfigError::InvalidNk {
                n: self.n,
                k: self.k,
            });
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Read {
            path: "<inline>".into(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let err = |msg: String| ConfigError::Read {
            path: path.display().to_string(),
            msg,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }

    /// Config from `$FAIRRAG_CONFIG` if set, else defaults.
    pub fn from_env() -> Result<Self, ConfigError> {
        match std::env::var_os(CONFIG_ENV) {
            Some(p) if !p.is_empty() => Self::load(p),
            _ => Ok(Self::default()),
        }
    }

    /// Suffix actually appended to retrieval queries.
    pub fn effective_suffix(&self) -> &str {
        if self.debiased_query {
            &self.suffix
        } else {
            ""
        }
    }

    pub fn retrieval_params(&self) -> RetrievalParams {
        RetrievalParams {
            n: self.n,
            k: self.k,
            cardinalities: self.cardinalities,
            balanced_sampling: self.balanced_sampling,
        }
    }

    pub fn bundle_options(&self) -> BundleOptions {
        BundleOptions {
            instruction: if self.text_instruction {
                self.instruction.clone()
            } else {
                String::new()
            },
            negative_prompt: self.negative_prompt.clone(),
        }
    }
}
