// SPDX-License-Identifier: Apache-2.0

//! Deterministic offline chat backend.
//!
//! Explanations produced here carry a `TRIGGERS[...]` block that
//! [`MockSimulator`](crate::scoring::MockSimulator) reads, so the whole
//! pipeline can run and be scored without any model.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};

use super::{split_sentences, AgentKind, ChatBackend, ChatRequest};
use crate::backend::BackendError;
use crate::scoring::{format_triggers, parse_triggers};
use crate::seed::derive_seed;
use crate::store::{highlighted_spans, strip_highlights};
use crate::synthetic::{SyntheticMode, SyntheticNeuron};

/// Probability that a refinement sample applies an oracle-guided edit rather
/// than a random one.
const GUIDED_EDIT_PROB: f64 = 0.75;

#[derive(Debug, Clone, Default)]
pub struct MockChat {
    oracle: Option<SyntheticNeuron>,
    spurious: usize,
}

impl MockChat {
    pub fn new() -> Self {
        Self::default()
    }

    /// Ground truth used to group highlighted words by mode and to bias
    /// refinement edits.
    pub fn with_oracle(mut self, oracle: SyntheticNeuron) -> Self {
        self.oracle = Some(oracle);
        self
    }

    /// Number of distractor words the hypothesis mock attaches to its
    /// sentences.
    pub fn with_spurious(mut self, n: usize) -> Self {
        self.spurious = n;
        self
    }

    fn hypothesis(&self, user: &str, seed: u64) -> String {
        let excerpts: Vec<&str> = user
            .lines()
            .filter_map(|l| l.strip_prefix("Excerpt "))
            .filter_map(|l| l.split_once(": ").map(|(_, body)| body))
            .collect();

        let mut groups: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        let mut per_excerpt: Vec<BTreeSet<String>> = Vec::new();
        let mut highlighted_all = BTreeSet::new();
        let mut plain = BTreeSet::new();
        for ex in &excerpts {
            let hot: BTreeSet<String> = highlighted_spans(ex)
                .iter()
                .flat_map(|s| s.split_whitespace())
                .filter_map(clean_word)
                .collect();
            let mut keys = BTreeSet::new();
            for w in &hot {
                let key = self.group_key(w);
                groups.entry(key.clone()).or_default().insert(w.clone());
                keys.insert(key);
            }
            plain.extend(strip_highlights(ex).split_whitespace().filter_map(clean_word));
            highlighted_all.extend(hot);
            per_excerpt.push(keys);
        }
        if groups.is_empty() {
            return "This neuron activates when no specific pattern is visible.".into();
        }

        let mut pool: Vec<String> = plain
            .into_iter()
            .filter(|w| !highlighted_all.contains(w))
            .filter(|w| self.oracle.as_ref().is_none_or(|o| o.mode_of(w).is_none()))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["spurious"]));
        pool.shuffle(&mut rng);
        let mut triggers: BTreeMap<&String, BTreeMap<String, f64>> = groups
            .iter()
            .map(|(k, words)| (k, words.iter().map(|w| (w.clone(), 10.0)).collect()))
            .collect();
        let keys: Vec<&String> = groups.keys().collect();
        for (i, w) in pool.into_iter().take(self.spurious).enumerate() {
            triggers
                .get_mut(keys[i % keys.len()])
                .expect("known group")
                .insert(w, 10.0);
        }
        let sentence: BTreeMap<&String, String> = triggers
            .iter()
            .map(|(k, t)| (*k, render_explanation(t)))
            .collect();

        per_excerpt
            .iter()
            .flat_map(|keys| keys.iter().map(|k| sentence[k].clone()))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn group_key(&self, word: &str) -> String {
        match self.oracle.as_ref().and_then(|o| o.mode_of(word)) {
            Some(m) => format!("mode:{}", m.mode_id),
            None => format!("word:{word}"),
        }
    }

    fn decomposition(&self, user: &str) -> String {
        let body = user.replace(super::REPAIR_SUFFIX, "");
        serde_json::to_string(&split_sentences(&body)).expect("strings serialize")
    }

    fn refinement(&self, user: &str, n: usize, seed: u64) -> Vec<String> {
        let base = parse_triggers(user).unwrap_or_default();
        (0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["candidate", &i.to_string()]));
                let edits = self.guided_edits(&base);
                let mut t = base.clone();
                if !edits.is_empty() && rng.random_bool(GUIDED_EDIT_PROB) {
                    apply_edit(&mut t, edits.choose(&mut rng).expect("non-empty"));
                } else if t.len() > 1 {
                    let words: Vec<String> = t.keys().cloned().collect();
                    t.remove(words.choose(&mut rng).expect("non-empty"));
                }
                render_explanation(&t)
            })
            .collect()
    }

    fn guided_edits(&self, triggers: &BTreeMap<String, f64>) -> Vec<Edit> {
        let Some(oracle) = &self.oracle else {
            return Vec::new();
        };
        let mut edits: Vec<Edit> = triggers
            .keys()
            .filter(|w| oracle.mode_of(w).is_none())
            .map(|w| Edit::Remove(w.clone()))
            .collect();
        let max = oracle.max_weight();
        for mode in &oracle.modes {
            let target = target_weight(mode, max);
            let missing = mode.triggers.iter().any(|w| !triggers.contains_key(w));
            let off = mode
                .triggers
                .iter()
                .any(|w| triggers.get(w).is_some_and(|&v| v != target));
            if missing || off {
                edits.push(Edit::SetMode(
                    mode.triggers.iter().map(|w| (w.clone(), target)).collect(),
                ));
            }
        }
        edits
    }
}

#[derive(Debug, Clone)]
enum Edit {
    Remove(String),
    SetMode(Vec<(String, f64)>),
}

fn apply_edit(t: &mut BTreeMap<String, f64>, edit: &Edit) {
    match edit {
        Edit::Remove(w) => {
            t.remove(w);
        }
        Edit::SetMode(words) => t.extend(words.iter().cloned()),
    }
}

fn target_weight(mode: &SyntheticMode, max: f64) -> f64 {
    mode.weight / max * 10.0
}

fn clean_word(w: &str) -> Option<String> {
    let w: String = w
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || *c == '-' || *c == '_' || *c == '\'')
        .collect();
    (!w.is_empty()).then_some(w)
}

fn render_explanation(t: &BTreeMap<String, f64>) -> String {
    if t.is_empty() {
        return "This neuron activates when none of the usual cues appear TRIGGERS[].".into();
    }
    let quoted: Vec<String> = t.keys().map(|w| format!("\"{w}\"")).collect();
    format!(
        "This neuron activates when the text mentions {} {}.",
        quoted.join(" or "),
        format_triggers(t)
    )
}

impl ChatBackend for MockChat {
    fn generate(&self, req: &ChatRequest) -> Result<Vec<String>, BackendError> {
        Ok(match req.agent {
            AgentKind::Hypothesis => vec![self.hypothesis(&req.user, req.seed); req.n_samples],
            AgentKind::Decomposition => vec![self.decomposition(&req.user); req.n_samples],
            AgentKind::Refinement => self.refinement(&req.user, req.n_samples, req.seed),
        })
    }
}
