// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use crate::agents::AtomicComponent;
use crate::clustering::SemanticCluster;
use crate::model::NeuronRef;
use crate::refinement::{FinalExplanation, RefinementTrajectory};
use crate::store::ExemplarSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarSummary {
    pub neuron_max: f64,
    pub hypothesis: Vec<String>,
    pub validation: Vec<String>,
    pub hypothesis_min_activation: f64,
}

impl ExemplarSummary {
    pub fn of(set: &ExemplarSet) -> Self {
        Self {
            neuron_max: set.neuron_max,
            hypothesis: set.hypothesis_set.iter().map(|e| e.segment.segment_id.clone()).collect(),
            validation: set.validation_set.iter().map(|e| e.segment.segment_id.clone()).collect(),
            hypothesis_min_activation: set
                .hypothesis_set
                .iter()
                .map(|e| e.activation())
                .fold(f64::INFINITY, f64::min),
        }
    }
}

/// Cluster membership by component id; embeddings live on the components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub cluster_id: usize,
    pub members: Vec<String>,
    pub representative: String,
    pub representative_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronReport {
    pub neuron: NeuronRef,
    pub exemplars: ExemplarSummary,
    pub raw_explanation: String,
    pub components: Vec<AtomicComponent>,
    pub clusters: Vec<ClusterRecord>,
    pub trajectories: Vec<RefinementTrajectory>,
    pub finals: Vec<FinalExplanation>,
    /// Number of semantic clusters.
    pub number: usize,
    /// Mean of the per-cluster final scores.
    pub mean_final_score: f64,
}

impl NeuronReport {
    pub fn new(
        neuron: NeuronRef,
        exemplars: ExemplarSummary,
        raw_explanation: String,
        components: Vec<AtomicComponent>,
        clusters: &[SemanticCluster],
        trajectories: Vec<RefinementTrajectory>,
    ) -> Self {
        let finals: Vec<FinalExplanation> = trajectories.iter().map(|t| t.final_explanation.clone()).collect();
        let mean_final_score = mean(finals.iter().map(|f| f.score));
        Self {
            neuron,
            exemplars,
            raw_explanation,
            components,
            clusters: clusters
                .iter()
                .map(|c| ClusterRecord {
                    cluster_id: c.cluster_id,
                    members: c.members.iter().map(|m| m.component_id.clone()).collect(),
                    representative: c.representative.component_id.clone(),
                    representative_text: c.representative.text.clone(),
                })
                .collect(),
            number: clusters.len(),
            trajectories,
            finals,
            mean_final_score,
        }
    }

    /// Rebuilds the semantic clusters (with centroids) from the stored
    /// components.
    pub fn semantic_clusters(&self) -> Vec<SemanticCluster> {
        self.clusters
            .iter()
            .map(|c| {
                let members = c
                    .members
                    .iter()
                    .filter_map(|id| self.components.iter().find(|m| &m.component_id == id).cloned())
                    .collect();
                SemanticCluster::from_members(c.cluster_id, members)
            })
            .collect()
    }

    /// Checks the report's internal consistency.
    pub fn check(&self) -> Result<(), String> {
        if self.number != self.clusters.len() || self.number != self.trajectories.len() {
            return Err(format!(
                "number {} vs {} clusters and {} trajectories",
                self.number,
                self.clusters.len(),
                self.trajectories.len()
            ));
        }
        let m = mean(self.finals.iter().map(|f| f.score));
        if (m - self.mean_final_score).abs() > 1e-12 && !(m.is_nan() && self.mean_final_score.is_nan()) {
            return Err(format!("mean final score {} but finals average {m}", self.mean_final_score));
        }
        for t in &self.trajectories {
            if !t.history.iter().any(|h| h.text == t.final_explanation.text) {
                return Err(format!("cluster {} final text missing from its history", t.cluster_id));
            }
        }
        Ok(())
    }
}

pub(crate) fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
