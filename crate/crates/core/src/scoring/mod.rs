// SPDX-License-Identifier: Apache-2.0

//! Explanation scoring: simulate activations from an explanation and
//! correlate them with the neuron's true activations.

mod simulator;

pub use simulator::{format_triggers, parse_triggers, MockSimulator, Simulator, SimulatorError};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::normalize_value;
use crate::pipeline::NeuronReport;
use crate::store::{Exemplar, ExemplarSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreResult {
    pub r: f64,
    pub n_points: usize,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScoreError {
    #[error("sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least two points, got {0}")]
    TooFewPoints(usize),
    #[error(transparent)]
    Simulator(#[from] SimulatorError),
}

/// Pearson correlation with population moments. A zero-variance input
/// yields `r = 0` flagged as degenerate.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<ScoreResult, ScoreError> {
    if xs.len() != ys.len() {
        return Err(ScoreError::LengthMismatch(xs.len(), ys.len()));
    }
    let n = xs.len();
    if n < 2 {
        return Err(ScoreError::TooFewPoints(n));
    }
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    let degenerate = ScoreResult {
        r: 0.0,
        n_points: n,
        degenerate: true,
    };
    if constant(xs) || constant(ys) {
        return Ok(degenerate);
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(degenerate);
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    Ok(ScoreResult {
        r,
        n_points: n,
        degenerate: false,
    })
}

/// Correlates per-segment predicted maxima with normalized true maxima over
/// the validation exemplars.
pub fn score_explanation(
    sim: &dyn Simulator,
    explanation: &str,
    validation: &[Exemplar],
    neuron_max: f64,
) -> Result<ScoreResult, ScoreError> {
    if validation.len() < 2 {
        return Err(ScoreError::TooFewPoints(validation.len()));
    }
    let segments: Vec<_> = validation.iter().map(|e| e.segment.clone()).collect();
    let predicted = sim.simulate(explanation, &segments)?;
    if predicted.len() != segments.len() {
        return Err(SimulatorError::Failed {
            segment_id: None,
            message: format!(
                "{} prediction rows for {} segments",
                predicted.len(),
                segments.len()
            ),
        }
        .into());
    }
    let mut pred = Vec::with_capacity(segments.len());
    for (row, seg) in predicted.iter().zip(&segments) {
        if row.len() != seg.tokens.len() || row.iter().any(|v| !v.is_finite()) {
            return Err(SimulatorError::Failed {
                segment_id: Some(seg.segment_id.clone()),
                message: format!(
                    "{} predictions for {} tokens",
                    row.len(),
                    seg.tokens.len()
                ),
            }
            .into());
        }
        pred.push(row.iter().map(|v| v.clamp(0.0, 10.0)).fold(0.0, f64::max));
    }
    let truth: Vec<f64> = validation
        .iter()
        .map(|e| normalize_value(e.activation(), neuron_max))
        .collect();
    pearson(&pred, &truth)
}

pub fn score_on_set(
    sim: &dyn Simulator,
    explanation: &str,
    set: &ExemplarSet,
) -> Result<ScoreResult, ScoreError> {
    score_explanation(sim, explanation, &set.validation_set, set.neuron_max)
}

/// Mean number of semantic clusters per neuron; `None` for no reports.
pub fn number_metric(reports: &[NeuronReport]) -> Option<f64> {
    if reports.is_empty() {
        return None;
    }
    Some(reports.iter().map(|r| r.number as f64).sum::<f64>() / reports.len() as f64)
}
