// SPDX-License-Identifier: MIT OR Apache-2.0

//! TOML config files. Unknown keys are rejected; every field has a default,
//! so an empty file is valid.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tarot_core::bayesopt::{OptRunConfig, SearchMechanism};
use tarot_core::model::{AdamConfig, ModelConfig};
use tarot_core::objectives::TaskKind;
use tarot_core::taskforge::{GenTaskSpec, TaskSpec};

use crate::error::{CliError, Result};

/// Parses `path` (or defaults when absent) and returns it with the file's
/// bytes, which go into the run hash.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<(T, Option<Vec<u8>>)> {
    let Some(path) = path else {
        return Ok((T::default(), None));
    };
    let bytes = std::fs::read(path).map_err(|e| CliError::io(&path.display().to_string(), e))?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|_| CliError::validation(format!("{}: not UTF-8", path.display())))?;
    let value = toml::from_str(text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    Ok((value, Some(bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenDataFile {
    pub kind: TaskKind,
    pub classification: TaskSpec,
    pub generation: GenTaskSpec,
}

impl Default for GenDataFile {
    fn default() -> Self {
        Self {
            kind: TaskKind::Classification,
            classification: TaskSpec::default(),
            generation: GenTaskSpec::default(),
        }
    }
}

/// Model shape; defaults match the generated tasks' 64-token vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub vocab_size: usize,
    pub d_ff: usize,
    pub rope_base: f64,
    pub max_seq: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 8,
            vocab_size: 64,
            d_ff: 128,
            rope_base: 10_000.0,
            max_seq: 64,
        }
    }
}

impl From<ModelSection> for ModelConfig {
    fn from(m: ModelSection) -> Self {
        ModelConfig {
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_layers: m.n_layers,
            vocab_size: m.vocab_size,
            d_ff: m.d_ff,
            rope_base: m.rope_base,
            max_seq: m.max_seq,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 8,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainFile {
    pub model: ModelSection,
    pub train: TrainSection,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveName {
    /// Zero-shot sum of label probabilities.
    #[default]
    Class,
    /// Label probabilities with a fixed number of demonstrations.
    Fewshot,
    /// Label probabilities with a random number of demonstrations per query.
    FewshotMixture,
    /// Summed scorer values of greedy continuations.
    Gen,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MechanismName {
    #[default]
    Rotation,
    Rescaling,
}

impl From<MechanismName> for SearchMechanism {
    fn from(m: MechanismName) -> Self {
        match m {
            MechanismName::Rotation => SearchMechanism::Rotation,
            MechanismName::Rescaling => SearchMechanism::Rescaling,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeFile {
    pub mechanism: MechanismName,
    pub objective: ObjectiveName,
    /// Layers to intervene on; the first half of the model when absent.
    pub layers: Option<Vec<usize>>,
    /// Demonstrations per query for the `fewshot` objective.
    pub shots: usize,
    /// Continuation length for the `gen` objective.
    pub max_new_tokens: usize,
    pub bayesopt: OptRunConfig,
}

impl Default for OptimizeFile {
    fn default() -> Self {
        Self {
            mechanism: MechanismName::Rotation,
            objective: ObjectiveName::FewshotMixture,
            layers: None,
            shots: 6,
            max_new_tokens: 4,
            bayesopt: OptRunConfig::default(),
        }
    }
}
