// SPDX-License-Identifier: Apache-2.0

use regex::Regex;
use std::collections::BTreeMap;
use std::sync::OnceLock;
use thiserror::Error;

use crate::model::{TextSegment, NORMALIZED_MAX};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimulatorError {
    #[error("simulator failed{}: {message}", segment_id.as_ref().map(|s| format!(" on segment {s}")).unwrap_or_default())]
    Failed {
        segment_id: Option<String>,
        message: String,
    },
}

/// Predicts per-token activations on the `[0, 10]` scale conditioned on an
/// explanation. Implementations must be safe to call concurrently.
pub trait Simulator: Send + Sync {
    fn simulate(
        &self,
        explanation: &str,
        segments: &[TextSegment],
    ) -> Result<Vec<Vec<f64>>, SimulatorError>;
}

fn trigger_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"TRIGGERS\[([^\]]*)\]").expect("valid regex"))
}

/// Parses the first `TRIGGERS[w1|w2:4.5|...]` block. Words are lowercased;
/// a missing weight means the top of the scale.
pub fn parse_triggers(text: &str) -> Option<BTreeMap<String, f64>> {
    let caps = trigger_re().captures(text)?;
    let mut out = BTreeMap::new();
    for entry in caps[1].split('|') {
        let entry = entry.trim();
        if entry.is_empty() {
            continue;
        }
        let (word, weight) = match entry.rsplit_once(':') {
            Some((w, v)) => match v.trim().parse::<f64>() {
                Ok(x) if x.is_finite() => (w, x.clamp(0.0, NORMALIZED_MAX)),
                _ => (entry, NORMALIZED_MAX),
            },
            None => (entry, NORMALIZED_MAX),
        };
        out.insert(word.trim().to_lowercase(), weight);
    }
    Some(out)
}

/// Inverse of [`parse_triggers`]; full-scale weights are left implicit.
pub fn format_triggers(triggers: &BTreeMap<String, f64>) -> String {
    let body: Vec<String> = triggers
        .iter()
        .map(|(w, &v)| {
            if v == NORMALIZED_MAX {
                w.clone()
            } else {
                format!("{w}:{v}")
            }
        })
        .collect();
    format!("TRIGGERS[{}]", body.join("|"))
}

/// Keyword simulator for mock runs: a token scores its trigger weight when it
/// appears in the explanation's trigger block, zero otherwise.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockSimulator;

impl Simulator for MockSimulator {
    fn simulate(
        &self,
        explanation: &str,
        segments: &[TextSegment],
    ) -> Result<Vec<Vec<f64>>, SimulatorError> {
        let triggers = parse_triggers(explanation).unwrap_or_default();
        Ok(segments
            .iter()
            .map(|s| {
                s.tokens
                    .iter()
                    .map(|t| {
                        triggers
                            .get(&t.trim().to_lowercase())
                            .copied()
                            .unwrap_or(0.0)
                    })
                    .collect()
            })
            .collect())
    }
}
