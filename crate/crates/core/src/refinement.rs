// SPDX-License-Identifier: Apache-2.0

//! Iterative best-of-n refinement of one cluster's explanation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{Agents, HistoryEntry};
use crate::clustering::SemanticCluster;
use crate::scoring::{score_on_set, ScoreError, Simulator};
use crate::seed::derive_seed;
use crate::store::ExemplarSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub max_iter: usize,
    pub n_candidates: usize,
    /// Smallest best-so-far gain that counts as progress.
    pub eps: f64,
    /// Iterations without progress before stopping.
    pub patience: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            max_iter: 5,
            n_candidates: 8,
            eps: 0.01,
            patience: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    Converged,
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalExplanation {
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrajectory {
    pub cluster_id: usize,
    pub history: Vec<HistoryEntry>,
    #[serde(rename = "final")]
    pub final_explanation: FinalExplanation,
    pub stop_reason: StopReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RefinementTrajectory {
    /// Running maximum of the history scores.
    pub fn best_so_far(&self) -> Vec<f64> {
        self.history
            .iter()
            .scan(f64::NEG_INFINITY, |best, h| {
                *best = best.max(h.score);
                Some(*best)
            })
            .collect()
    }

    fn finish(cluster_id: usize, history: Vec<HistoryEntry>, stop_reason: StopReason, error: Option<String>) -> Self {
        let mut best = &history[0];
        for h in &history[1..] {
            if h.score > best.score {
                best = h;
            }
        }
        let final_explanation = FinalExplanation {
            text: best.text.clone(),
            score: best.score,
        };
        Self {
            cluster_id,
            history,
            final_explanation,
            stop_reason,
            error,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RefineError {
    #[error("scoring the representative failed: {0}")]
    Initial(#[from] ScoreError),
}

/// Runs the refinement loop for one cluster. Only a failure to score the
/// representative is an error; later backend or simulator failures end the
/// trajectory early with [`StopReason::Degenerate`].
pub fn refine_cluster(
    agents: &Agents<'_>,
    sim: &dyn Simulator,
    cluster: &SemanticCluster,
    exemplars: &ExemplarSet,
    cfg: &RefineConfig,
    seed: u64,
) -> Result<RefinementTrajectory, RefineError> {
    let start = cluster.representative.text.clone();
    let s0 = score_on_set(sim, &start, exemplars)?.r;
    let mut history = vec![HistoryEntry {
        iteration: 0,
        text: start,
        score: s0,
    }];
    let mut best = s0;
    let mut stall = 0;
    let mut stop = StopReason::MaxIterations;
    let mut error = None;

    for t in 1..=cfg.max_iter {
        let iter_seed = derive_seed(seed, &["iteration", &t.to_string()]);
        let candidates = match agents.refine_candidates(&history, cfg.n_candidates, iter_seed) {
            Ok(c) => c,
            Err(e) => {
                stop = StopReason::Degenerate;
                error = Some(e.to_string());
                break;
            }
        };
        let scored: Result<Vec<f64>, ScoreError> = candidates
            .par_iter()
            .map(|c| score_on_set(sim, c, exemplars).map(|s| s.r))
            .collect();
        let scores = match scored {
            Ok(s) => s,
            Err(e) => {
                stop = StopReason::Degenerate;
                error = Some(e.to_string());
                break;
            }
        };
        let mut pick = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[pick] {
                pick = i;
            }
        }
        history.push(HistoryEntry {
            iteration: t,
            text: candidates[pick].clone(),
            score: scores[pick],
        });
        let new_best = best.max(scores[pick]);
        if new_best - best < cfg.eps {
            stall += 1;
        } else {
            stall = 0;
        }
        best = new_best;
        if stall >= cfg.patience {
            stop = StopReason::Converged;
            break;
        }
    }
    Ok(RefinementTrajectory::finish(cluster.cluster_id, history, stop, error))
}

/// Mean best-so-far score at each iteration `0..=max_iter`. Trajectories
/// that stopped early carry their final best forward.
pub fn convergence_table(trajectories: &[RefinementTrajectory], max_iter: usize) -> Vec<f64> {
    if trajectories.is_empty() {
        return Vec::new();
    }
    let curves: Vec<Vec<f64>> = trajectories.iter().map(RefinementTrajectory::best_so_far).collect();
    (0..=max_iter)
        .map(|t| {
            curves
                .iter()
                .map(|c| c[t.min(c.len() - 1)])
                .sum::<f64>()
                / curves.len() as f64
        })
        .collect()
}
