// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::clustering::NoisePolicy;
use crate::refinement::RefineConfig;
use crate::seed::sha256_hex;
use crate::store::ExemplarSizes;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config value: {0}")]
    Invalid(String),
}

/// Offline stand-ins for the remote services.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockConfig {
    pub agents: bool,
    pub sim: bool,
    /// Defaults to following `agents`.
    pub embeddings: Option<bool>,
    /// Distractor words the hypothesis mock adds per neuron.
    pub spurious: usize,
    /// Synthetic scenario whose neurons serve as the mock agents' oracle.
    pub scenario: Option<PathBuf>,
}

impl MockConfig {
    pub fn embeddings(&self) -> bool {
        self.embeddings.unwrap_or(self.agents)
    }
}

/// Non-secret settings of the remote backends. URLs and keys come from the
/// environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    pub chat_model: String,
    pub embedding_model: String,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            chat_model: "gpt-4o".into(),
            embedding_model: "text-embedding-3-small".into(),
            timeout_secs: 120,
            max_in_flight: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dump: PathBuf,
    /// Layers to analyse; empty means the model preset or every dump layer.
    pub layers: Vec<u32>,
    /// Neurons per layer, ranked by activation frequency.
    pub neurons: usize,
    pub exemplars: ExemplarSizes,
    pub tau: f64,
    pub min_cluster_size: usize,
    pub noise_policy: NoisePolicy,
    pub refine: bool,
    pub refinement: RefineConfig,
    pub temperature: f64,
    pub seed: u64,
    /// Neuron-level worker threads; 0 uses every core.
    pub workers: usize,
    pub prompts_dir: Option<PathBuf>,
    pub mock: MockConfig,
    pub remote: RemoteConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dump: PathBuf::new(),
            layers: Vec::new(),
            neurons: 200,
            exemplars: ExemplarSizes::default(),
            tau: 0.5,
            min_cluster_size: 2,
            noise_policy: NoisePolicy::Discard,
            refine: true,
            refinement: RefineConfig::default(),
            temperature: crate::agents::DEFAULT_TEMPERATURE,
            seed: 0,
            workers: 0,
            prompts_dir: None,
            mock: MockConfig::default(),
            remote: RemoteConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses without range checks, so overrides can be applied first.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg = Self::parse(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and parses a config file; call [`RunConfig::validate`] once
    /// overrides are applied.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.to_path_buf(), e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if self.dump.as_os_str().is_empty() {
            return bad("dump path is required");
        }
        if self.neurons == 0 {
            return bad("neurons must be at least 1");
        }
        if self.exemplars.hypothesis == 0 {
            return bad("exemplars.hypothesis must be at least 1");
        }
        if self.exemplars.validation_top + self.exemplars.validation_random < 2 {
            return bad("the validation set needs at least 2 exemplars");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must be in (0, 1]");
        }
        if self.min_cluster_size < 2 {
            return bad("min_cluster_size must be at least 2");
        }
        if self.refinement.n_candidates == 0 {
            return bad("refinement.n_candidates must be at least 1");
        }
        if !(self.refinement.eps >= 0.0 && self.refinement.eps.is_finite()) {
            return bad("refinement.eps must be a non-negative number");
        }
        if self.refinement.patience == 0 {
            return bad("refinement.patience must be at least 1");
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return bad("temperature must be in [0, 2]");
        }
        if self.remote.max_in_flight == 0 || self.remote.timeout_secs == 0 {
            return bad("remote.max_in_flight and remote.timeout_secs must be positive");
        }
        Ok(())
    }

    /// Refinement settings actually used, honouring `refine = false`.
    pub fn effective_refinement(&self) -> RefineConfig {
        if self.refine {
            self.refinement
        } else {
            RefineConfig {
                max_iter: 0,
                ..self.refinement
            }
        }
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }
}

/// Layers analysed for well-known model families.
pub fn preset_layers(model_id: &str) -> Option<&'static [u32]> {
    let m = model_id.to_lowercase();
    if m.contains("llama") {
        Some(&[5, 10, 20, 31])
    } else if m.contains("gemma") || m.contains("qwen") {
        Some(&[5, 9, 18, 25])
    } else {
        None
    }
}
