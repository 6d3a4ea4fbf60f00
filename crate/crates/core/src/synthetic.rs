// SPDX-License-Identifier: Apache-2.0

//! Ground-truth polysemantic neurons and seeded corpus synthesis.
//!
//! A synthetic neuron is a union of keyword modes: a token activates the
//! neuron with the mode's weight when it is one of that mode's triggers.
//! Because the activation function is known exactly, every stage of the
//! pipeline can be checked against it.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;
use thiserror::Error;

use crate::model::{normalize_value, ActivationRecord, NeuronRef, TextSegment};
use crate::scoring::{Simulator, SimulatorError};
use crate::store::{ActivationDump, DumpHeader, DumpRecord, Exemplar};

pub const SCENARIO_FORMAT: &str = "neuronscope-synth/1";
pub const MIN_SEGMENT_TOKENS: usize = 8;
pub const MAX_SEGMENT_TOKENS: usize = 24;
pub const MIN_DISTRACTORS: usize = 8;
/// Fraction of segments each mode must appear in.
pub const COVERAGE_FLOOR: f64 = 0.05;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("vocabulary too small: {0}")]
    VocabTooSmall(String),
    #[error("invalid synthetic neuron: {0}")]
    InvalidNeuron(String),
    #[error("infeasible corpus: {0}")]
    Infeasible(String),
    #[error("scenario file: {0}")]
    Scenario(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn default_rate() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticMode {
    pub mode_id: String,
    pub triggers: BTreeSet<String>,
    pub weight: f64,
    /// Relative frequency with which the corpus generator plants this mode.
    #[serde(default = "default_rate")]
    pub rate: f64,
}

impl SyntheticMode {
    pub fn new(mode_id: &str, triggers: &[&str], weight: f64) -> Self {
        Self {
            mode_id: mode_id.to_string(),
            triggers: triggers.iter().map(|t| t.to_string()).collect(),
            weight,
            rate: 1.0,
        }
    }

    pub fn with_rate(mut self, rate: f64) -> Self {
        self.rate = rate;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticNeuron {
    pub neuron: NeuronRef,
    pub modes: Vec<SyntheticMode>,
}

impl SyntheticNeuron {
    pub fn new(neuron: NeuronRef, modes: Vec<SyntheticMode>) -> Result<Self, SynthError> {
        let n = Self { neuron, modes };
        n.validate()?;
        Ok(n)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidNeuron(format!("{}: {m}", self.neuron)));
        if self.modes.is_empty() {
            return bad("needs at least one mode".into());
        }
        let mut seen = HashSet::new();
        for m in &self.modes {
            if !(m.weight > 0.0 && m.weight <= 10.0) {
                return bad(format!("mode {} weight {} outside (0, 10]", m.mode_id, m.weight));
            }
            if !(m.rate > 0.0 && m.rate.is_finite()) {
                return bad(format!("mode {} rate must be positive", m.mode_id));
            }
            if m.triggers.is_empty() {
                return bad(format!("mode {} has no triggers", m.mode_id));
            }
            for t in &m.triggers {
                if t.is_empty() || t.chars().any(|c| c.is_uppercase() || c.is_whitespace()) {
                    return bad(format!("trigger {t:?} must be a lowercase word"));
                }
                if !seen.insert(t.as_str()) {
                    return bad(format!("trigger {t:?} appears in two modes"));
                }
            }
        }
        Ok(())
    }

    pub fn mode_of(&self, token: &str) -> Option<&SyntheticMode> {
        let t = token.trim().to_lowercase();
        self.modes.iter().find(|m| m.triggers.contains(&t))
    }

    pub fn token_activation(&self, token: &str) -> f64 {
        self.mode_of(token).map_or(0.0, |m| m.weight)
    }

    pub fn max_weight(&self) -> f64 {
        self.modes.iter().map(|m| m.weight).fold(0.0, f64::max)
    }

    pub fn all_triggers(&self) -> impl Iterator<Item = &String> {
        self.modes.iter().flat_map(|m| m.triggers.iter())
    }
}

/// Exact activation of a synthetic neuron on a segment.
pub fn synth_activation(neuron: &SyntheticNeuron, segment: &TextSegment) -> ActivationRecord {
    let per_token: Vec<f64> = segment
        .tokens
        .iter()
        .map(|t| neuron.token_activation(t))
        .collect();
    let max_value = per_token.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    ActivationRecord {
        neuron: neuron.neuron.clone(),
        segment_id: segment.segment_id.clone(),
        per_token,
        max_value,
    }
}

/// Number of modes triggered in at least two of the given exemplars.
pub fn observed_modes(neuron: &SyntheticNeuron, exemplars: &[Exemplar]) -> usize {
    neuron
        .modes
        .iter()
        .filter(|m| {
            exemplars
                .iter()
                .filter(|e| {
                    e.segment
                        .tokens
                        .iter()
                        .any(|t| m.triggers.contains(&t.trim().to_lowercase()))
                })
                .count()
                >= 2
        })
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusParams {
    pub model_id: String,
    pub n_segments: usize,
    /// Probability that a segment plants one mode of a given neuron.
    pub fire_rate: f64,
    pub seed: u64,
}

/// Generates a seeded corpus where every mode of every neuron appears in at
/// least `ceil(n_segments * 0.05)` segments, and returns it as a dump.
pub fn synth_corpus(
    neurons: &[SyntheticNeuron],
    vocab: &[String],
    params: &CorpusParams,
) -> Result<ActivationDump, SynthError> {
    if params.n_segments == 0 {
        return Err(SynthError::Infeasible("n_segments must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&params.fire_rate) {
        return Err(SynthError::Infeasible("fire_rate must lie in [0, 1]".into()));
    }
    let mut ids = HashSet::new();
    for n in neurons {
        n.validate()?;
        if !ids.insert((n.neuron.layer, n.neuron.index)) {
            return Err(SynthError::InvalidNeuron(format!("{} listed twice", n.neuron)));
        }
    }
    let vocab_set: BTreeSet<&str> = vocab.iter().map(String::as_str).collect();
    let triggers: BTreeSet<&str> = neurons
        .iter()
        .flat_map(|n| n.all_triggers().map(String::as_str))
        .collect();
    if let Some(missing) = triggers.iter().find(|t| !vocab_set.contains(*t)) {
        return Err(SynthError::VocabTooSmall(format!(
            "trigger {missing:?} missing from vocabulary"
        )));
    }
    let distractors: Vec<&str> = vocab_set.difference(&triggers).copied().collect();
    if distractors.len() < MIN_DISTRACTORS {
        return Err(SynthError::VocabTooSmall(format!(
            "{} distractor words, need at least {MIN_DISTRACTORS}",
            distractors.len()
        )));
    }

    let n_seg = params.n_segments;
    let floor = (n_seg as f64 * COVERAGE_FLOOR).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    // plan[s][j] = planted mode of neuron j in segment s
    let mut plan: Vec<Vec<Option<usize>>> = vec![vec![None; neurons.len()]; n_seg];
    for row in plan.iter_mut() {
        for (j, n) in neurons.iter().enumerate() {
            if rng.random_bool(params.fire_rate) {
                let total: f64 = n.modes.iter().map(|m| m.rate).sum();
                let mut pick = rng.random::<f64>() * total;
                let mut chosen = n.modes.len() - 1;
                for (k, m) in n.modes.iter().enumerate() {
                    if pick < m.rate {
                        chosen = k;
                        break;
                    }
                    pick -= m.rate;
                }
                row[j] = Some(chosen);
            }
        }
    }

    // Lift every mode to the coverage floor using segments where the neuron
    // is silent, then segments holding a surplus mode.
    for (j, n) in neurons.iter().enumerate() {
        if n.modes.len() * floor > n_seg {
            return Err(SynthError::Infeasible(format!(
                "{} has {} modes; {} segments cannot give each {floor}",
                n.neuron,
                n.modes.len(),
                n_seg
            )));
        }
        let mut order: Vec<usize> = (0..n_seg).collect();
        order.shuffle(&mut rng);
        for k in 0..n.modes.len() {
            let count = |plan: &Vec<Vec<Option<usize>>>, k: usize| {
                plan.iter().filter(|r| r[j] == Some(k)).count()
            };
            let mut have = count(&plan, k);
            for &s in &order {
                if have >= floor {
                    break;
                }
                if plan[s][j].is_none() {
                    plan[s][j] = Some(k);
                    have += 1;
                }
            }
            for &s in &order {
                if have >= floor {
                    break;
                }
                if let Some(other) = plan[s][j] {
                    if other != k && count(&plan, other) > floor {
                        plan[s][j] = Some(k);
                        have += 1;
                    }
                }
            }
        }
    }

    let layers: BTreeSet<u32> = neurons.iter().map(|n| n.neuron.layer).collect();
    let mut dump = ActivationDump::new(DumpHeader::new(
        params.model_id.clone(),
        layers.iter().copied().collect(),
        "whitespace",
    ));

    for (s, row) in plan.iter().enumerate() {
        let mut planted: Vec<&str> = Vec::new();
        for (j, slot) in row.iter().enumerate() {
            if let Some(k) = slot {
                let trig: Vec<&str> = neurons[j].modes[*k].triggers.iter().map(String::as_str).collect();
                let take = if trig.len() >= 2 && rng.random_bool(0.5) { 2 } else { 1 };
                planted.extend(trig.choose_multiple(&mut rng, take).copied());
            }
        }
        if planted.len() > MAX_SEGMENT_TOKENS {
            return Err(SynthError::Infeasible(format!(
                "segment {s} needs {} trigger slots",
                planted.len()
            )));
        }
        let len = rng
            .random_range(MIN_SEGMENT_TOKENS..=MAX_SEGMENT_TOKENS)
            .max(planted.len());
        let mut tokens: Vec<String> = (0..len)
            .map(|_| distractors.choose(&mut rng).unwrap().to_string())
            .collect();
        let positions = rand::seq::index::sample(&mut rng, len, planted.len());
        for (pos, word) in positions.iter().zip(&planted) {
            tokens[pos] = word.to_string();
        }
        let segment = TextSegment {
            segment_id: format!("seg{s:05}"),
            text: tokens.join(" "),
            tokens,
        };
        for &layer in &layers {
            let acts: BTreeMap<u32, Vec<f64>> = neurons
                .iter()
                .filter(|n| n.neuron.layer == layer)
                .map(|n| (n.neuron.index, synth_activation(n, &segment).per_token))
                .collect();
            dump.records.push(DumpRecord {
                segment_id: segment.segment_id.clone(),
                text: segment.text.clone(),
                tokens: segment.tokens.clone(),
                layer,
                acts,
            });
        }
    }
    Ok(dump)
}

/// Deterministic pronounceable filler words that avoid every trigger.
pub fn distractor_words(n: usize, avoid: &BTreeSet<String>, seed: u64) -> Vec<String> {
    const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
    const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeSet::new();
    while out.len() < n {
        let syllables = rng.random_range(2..=3);
        let w: String = (0..syllables)
            .map(|_| {
                format!(
                    "{}{}",
                    ONSETS.choose(&mut rng).unwrap(),
                    VOWELS.choose(&mut rng).unwrap()
                )
            })
            .collect();
        if !avoid.contains(&w) {
            out.insert(w);
        }
    }
    out.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioNeuron {
    pub layer: u32,
    pub index: u32,
    pub modes: Vec<SyntheticMode>,
}

/// Contents of a `*.synth` scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub format: String,
    pub model_id: String,
    pub n_segments: usize,
    pub seed: u64,
    #[serde(default = "default_fire_rate")]
    pub fire_rate: f64,
    /// Explicit vocabulary; generated from `n_distractors` when absent.
    #[serde(default)]
    pub vocab: Option<Vec<String>>,
    #[serde(default = "default_distractors")]
    pub n_distractors: usize,
    pub neurons: Vec<ScenarioNeuron>,
}

fn default_fire_rate() -> f64 {
    0.4
}

fn default_distractors() -> usize {
    200
}

impl Scenario {
    pub fn synthetic_neurons(&self) -> Result<Vec<SyntheticNeuron>, SynthError> {
        self.neurons
            .iter()
            .map(|n| {
                SyntheticNeuron::new(
                    NeuronRef::new(self.model_id.clone(), n.layer, n.index),
                    n.modes.clone(),
                )
            })
            .collect()
    }

    pub fn vocabulary(&self) -> Vec<String> {
        match &self.vocab {
            Some(v) => v.clone(),
            None => {
                let triggers: BTreeSet<String> = self
                    .neurons
                    .iter()
                    .flat_map(|n| n.modes.iter().flat_map(|m| m.triggers.iter().cloned()))
                    .collect();
                let mut v = distractor_words(self.n_distractors, &triggers, self.seed ^ 0x5eed);
                v.extend(triggers);
                v.sort();
                v
            }
        }
    }

    pub fn corpus_params(&self) -> CorpusParams {
        CorpusParams {
            model_id: self.model_id.clone(),
            n_segments: self.n_segments,
            fire_rate: self.fire_rate,
            seed: self.seed,
        }
    }

    pub fn materialize(&self) -> Result<ActivationDump, SynthError> {
        synth_corpus(&self.synthetic_neurons()?, &self.vocabulary(), &self.corpus_params())
    }

    pub fn from_json(text: &str) -> Result<Self, SynthError> {
        let s: Scenario =
            serde_json::from_str(text).map_err(|e| SynthError::Scenario(e.to_string()))?;
        if s.format != SCENARIO_FORMAT {
            return Err(SynthError::Scenario(format!(
                "unsupported format {:?} (expected {SCENARIO_FORMAT:?})",
                s.format
            )));
        }
        Ok(s)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, SynthError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }
}

/// Simulator that knows the neuron exactly; predicts its normalized activation.
#[derive(Debug, Clone)]
pub struct OracleSimulator {
    pub neuron: SyntheticNeuron,
}

impl Simulator for OracleSimulator {
    fn simulate(
        &self,
        _explanation: &str,
        segments: &[TextSegment],
    ) -> Result<Vec<Vec<f64>>, SimulatorError> {
        let max = self.neuron.max_weight();
        Ok(segments
            .iter()
            .map(|s| {
                s.tokens
                    .iter()
                    .map(|t| normalize_value(self.neuron.token_activation(t), max))
                    .collect()
            })
            .collect())
    }
}
