// SPDX-License-Identifier: Apache-2.0

//! Shared domain types: neurons, text segments and their activations.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Upper end of the normalized activation scale handed to simulators.
pub const NORMALIZED_MAX: f64 = 10.0;

/// Identifies one MLP neuron within a run.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeuronRef {
    pub model_id: String,
    pub layer: u32,
    pub index: u32,
}

impl NeuronRef {
    pub fn new(model_id: impl Into<String>, layer: u32, index: u32) -> Self {
        Self {
            model_id: model_id.into(),
            layer,
            index,
        }
    }
}

impl fmt::Display for NeuronRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/L{}/N{}", self.model_id, self.layer, self.index)
    }
}

/// A tokenized corpus segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextSegment {
    pub segment_id: String,
    pub text: String,
    pub tokens: Vec<String>,
}

/// Per-token activations of one neuron over one segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub neuron: NeuronRef,
    pub segment_id: String,
    pub per_token: Vec<f64>,
    pub max_value: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("activation record has no tokens")]
    EmptyRecord,
    #[error("neuron never activates positively (max {0})")]
    DegenerateNeuron(f64),
}

impl ActivationRecord {
    /// Builds a record, computing `max_value` from the token activations.
    pub fn new(
        neuron: NeuronRef,
        segment_id: impl Into<String>,
        per_token: Vec<f64>,
    ) -> Result<Self, ModelError> {
        let max_value = per_token
            .iter()
            .copied()
            .reduce(f64::max)
            .ok_or(ModelError::EmptyRecord)?;
        Ok(Self {
            neuron,
            segment_id: segment_id.into(),
            per_token,
            max_value,
        })
    }
}

/// Activations rescaled onto `[0, 10]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedActivation {
    pub values: Vec<f64>,
}

/// Segment-level activation: the maximum over token activations.
pub fn segment_activation(rec: &ActivationRecord) -> f64 {
    rec.per_token
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Maps raw activations onto `[0, 10]` relative to the neuron's corpus maximum.
/// Negative activations map to zero.
pub fn normalize_activations(
    per_token: &[f64],
    neuron_max: f64,
) -> Result<NormalizedActivation, ModelError> {
    if !(neuron_max > 0.0) {
        return Err(ModelError::DegenerateNeuron(neuron_max));
    }
    let values = per_token
        .iter()
        .map(|&v| normalize_value(v, neuron_max))
        .collect();
    Ok(NormalizedActivation { values })
}

/// Scalar form of [`normalize_activations`]; `neuron_max` must be positive.
pub(crate) fn normalize_value(v: f64, neuron_max: f64) -> f64 {
    (v.max(0.0) / neuron_max * NORMALIZED_MAX).min(NORMALIZED_MAX)
}
