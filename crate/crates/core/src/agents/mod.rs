// SPDX-License-Identifier: Apache-2.0

//! The hypothesis, decomposition and refinement agents.

pub mod mock;
mod prompts;

pub use prompts::{PromptError, Prompts, Template};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, Throttle};
use crate::model::NeuronRef;
use crate::seed::derive_seed;
use crate::store::Exemplar;

pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const REPAIR_SUFFIX: &str = "Output must be a JSON array of strings only.";
pub const SENTENCE_PREFIXES: [&str; 2] = ["This neuron activates when", "This neuron fires when"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Hypothesis,
    Decomposition,
    Refinement,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    /// Which agent is calling. Remote backends ignore it; mocks dispatch on it.
    pub agent: AgentKind,
    pub system: String,
    pub user: String,
    pub n_samples: usize,
    pub temperature: f64,
    pub seed: u64,
}

/// A text-generation endpoint. Must return exactly `n_samples` completions
/// and tolerate concurrent calls.
pub trait ChatBackend: Send + Sync {
    fn generate(&self, req: &ChatRequest) -> Result<Vec<String>, BackendError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<T> {
    fn generate(&self, req: &ChatRequest) -> Result<Vec<String>, BackendError> {
        (**self).generate(req)
    }
}

/// Wraps a backend so that at most `limit` requests are in flight.
pub struct Throttled<B> {
    inner: B,
    throttle: Throttle,
}

impl<B> Throttled<B> {
    pub fn new(inner: B, limit: usize) -> Self {
        Self {
            inner,
            throttle: Throttle::new(limit),
        }
    }
}

impl<B: ChatBackend> ChatBackend for Throttled<B> {
    fn generate(&self, req: &ChatRequest) -> Result<Vec<String>, BackendError> {
        let _permit = self.throttle.acquire();
        self.inner.generate(req)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawExplanation {
    pub neuron: NeuronRef,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicComponent {
    pub component_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl AtomicComponent {
    pub fn new(component_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            component_id: component_id.into(),
            text: text.into(),
            embedding: None,
        }
    }
}

/// One scored entry of a refinement history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgentError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("backend returned an empty completion")]
    EmptyCompletion,
    #[error("could not parse decomposition output: {0}")]
    Parse(String),
    #[error("invalid agent input: {0}")]
    Precondition(String),
}

pub fn is_component_sentence(text: &str) -> bool {
    let t = text.trim();
    SENTENCE_PREFIXES.iter().any(|p| t.starts_with(p))
}

/// Numbered excerpt block for the hypothesis prompt.
pub fn render_excerpts(exemplars: &[Exemplar]) -> String {
    exemplars
        .iter()
        .enumerate()
        .map(|(i, e)| format!("Excerpt {}: {}", i + 1, e.highlighted.replace('\n', " ")))
        .collect::<Vec<_>>()
        .join("\n")
}

/// History block for the refinement prompt, best first; equal scores keep
/// the earlier iteration first.
pub fn render_history(history: &[HistoryEntry]) -> String {
    let mut sorted: Vec<&HistoryEntry> = history.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.iteration.cmp(&b.iteration)));
    sorted
        .iter()
        .enumerate()
        .map(|(rank, h)| {
            format!(
                "{}. (iteration {}, score {:.4}) {}",
                rank + 1,
                h.iteration,
                h.score,
                h.text.replace('\n', " ")
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// The three agents bound to a backend and prompt set.
pub struct Agents<'a> {
    pub backend: &'a dyn ChatBackend,
    pub prompts: &'a Prompts,
    pub temperature: f64,
}

impl<'a> Agents<'a> {
    pub fn new(backend: &'a dyn ChatBackend, prompts: &'a Prompts) -> Self {
        Self {
            backend,
            prompts,
            temperature: DEFAULT_TEMPERATURE,
        }
    }

    fn call(
        &self,
        agent: AgentKind,
        template: &Template,
        user: String,
        n_samples: usize,
        seed: u64,
    ) -> Result<Vec<String>, AgentError> {
        let req = ChatRequest {
            agent,
            system: template.system.clone(),
            user,
            n_samples,
            temperature: self.temperature,
            seed,
        };
        Ok(self.backend.generate(&req)?)
    }

    pub fn hypothesize(
        &self,
        neuron: &NeuronRef,
        exemplars: &[Exemplar],
        seed: u64,
    ) -> Result<RawExplanation, AgentError> {
        if exemplars.is_empty() {
            return Err(AgentError::Precondition("no exemplars".into()));
        }
        if let Some(e) = exemplars.iter().find(|e| &e.record.neuron != neuron) {
            return Err(AgentError::Precondition(format!(
                "exemplar {} belongs to {}",
                e.segment.segment_id, e.record.neuron
            )));
        }
        let t = &self.prompts.hypothesis;
        let user = t.render_user("EXCERPTS", &render_excerpts(exemplars));
        let out = self.call(AgentKind::Hypothesis, t, user, 1, seed)?;
        let text = out.into_iter().next().unwrap_or_default();
        if text.trim().is_empty() {
            return Err(AgentError::EmptyCompletion);
        }
        Ok(RawExplanation {
            neuron: neuron.clone(),
            text: text.trim().to_string(),
        })
    }

    pub fn decompose(&self, raw: &RawExplanation, seed: u64) -> Result<Vec<AtomicComponent>, AgentError> {
        if raw.text.trim().is_empty() {
            return Err(AgentError::Precondition("empty raw explanation".into()));
        }
        let t = &self.prompts.decomposition;
        let user = t.render_user("DESCRIPTION", &raw.text);
        let first = self.call(AgentKind::Decomposition, t, user.clone(), 1, seed)?;
        let items = match parse_string_array(first.first().map(String::as_str).unwrap_or("")) {
            Some(items) => items,
            None => {
                log::warn!("decomposition output is not a JSON array; retrying once");
                let retry_user = format!("{user}\n\n{REPAIR_SUFFIX}");
                let second =
                    self.call(AgentKind::Decomposition, t, retry_user, 1, derive_seed(seed, &["repair"]))?;
                let text = second.first().map(String::as_str).unwrap_or("");
                parse_string_array(text).ok_or_else(|| AgentError::Parse(truncate(text, 200)))?
            }
        };
        let mut components = Vec::new();
        for item in items {
            let item = item.trim();
            if is_component_sentence(item) {
                components.push(AtomicComponent::new(format!("c{}", components.len()), item));
            } else {
                log::warn!("dropping component without the required subject: {}", truncate(item, 80));
            }
        }
        if components.is_empty() {
            components.push(AtomicComponent::new("c0", fallback_sentence(&raw.text)));
        }
        Ok(components)
    }

    /// Requests `n` refinement candidates. Empty completions are re-sampled
    /// once; whatever is still missing after that is dropped.
    pub fn refine_candidates(
        &self,
        history: &[HistoryEntry],
        n: usize,
        seed: u64,
    ) -> Result<Vec<String>, AgentError> {
        if history.is_empty() || n == 0 {
            return Err(AgentError::Precondition("empty history or zero candidates".into()));
        }
        let t = &self.prompts.refinement;
        let user = t.render_user("HISTORY", &render_history(history));
        let keep = |v: Vec<String>| -> Vec<String> {
            v.into_iter()
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect()
        };
        let mut out = keep(self.call(AgentKind::Refinement, t, user.clone(), n, seed)?);
        out.truncate(n);
        if out.len() < n {
            let missing = n - out.len();
            let extra = self.call(AgentKind::Refinement, t, user, missing, derive_seed(seed, &["resample"]))?;
            out.extend(keep(extra).into_iter().take(missing));
        }
        if out.is_empty() {
            return Err(AgentError::EmptyCompletion);
        }
        Ok(out)
    }
}

/// Splits on `.`, `!` or `?` followed by whitespace; pieces are trimmed and
/// empty ones dropped.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') && chars.peek().is_some_and(|(_, n)| n.is_whitespace()) {
            out.push(&text[start..i + c.len_utf8()]);
            start = i + c.len_utf8();
        }
    }
    out.push(&text[start..]);
    out.into_iter()
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

/// Parses a JSON array of strings, tolerating code fences or prose around it.
pub fn parse_string_array(text: &str) -> Option<Vec<String>> {
    let start = text.find('[')?;
    let end = text.rfind(']')?;
    if end < start {
        return None;
    }
    serde_json::from_str(&text[start..=end]).ok()
}

fn fallback_sentence(raw: &str) -> String {
    let raw = raw.trim();
    if is_component_sentence(raw) {
        return raw.to_string();
    }
    let mut chars = raw.chars();
    let rest: String = match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => String::new(),
    };
    format!("{} {rest}", SENTENCE_PREFIXES[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    /// Replays canned completions and records every request.
    struct Scripted {
        replies: Mutex<Vec<Vec<String>>>,
        seen: Mutex<Vec<ChatRequest>>,
    }

    impl Scripted {
        fn new(replies: Vec<Vec<&str>>) -> Self {
            Self {
                replies: Mutex::new(
                    replies
                        .into_iter()
                        .rev()
                        .map(|r| r.into_iter().map(String::from).collect())
                        .collect(),
                ),
                seen: Mutex::new(Vec::new()),
            }
        }
    }

    impl ChatBackend for Scripted {
        fn generate(&self, req: &ChatRequest) -> Result<Vec<String>, BackendError> {
            self.seen.lock().unwrap().push(req.clone());
            self.replies
                .lock()
                .unwrap()
                .pop()
                .ok_or_else(|| BackendError::new("script exhausted"))
        }
    }

    fn raw(text: &str) -> RawExplanation {
        RawExplanation {
            neuron: NeuronRef::new("m", 5, 1),
            text: text.into(),
        }
    }

    #[test]
    fn decompose_two_valid() {
        let b = Scripted::new(vec![vec![r#"["This neuron activates when A.","This neuron fires when B."]"#]]);
        let p = Prompts::default();
        let c = Agents::new(&b, &p).decompose(&raw("A and B"), 1).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[1].text, "This neuron fires when B.");
        assert_eq!(c[0].component_id, "c0");
    }

    #[test]
    fn decompose_falls_back_when_all_invalid() {
        let b = Scripted::new(vec![vec![r#"["Activates on X."]"#]]);
        let p = Prompts::default();
        let c = Agents::new(&b, &p).decompose(&raw("Fires on X."), 1).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].text, "This neuron activates when fires on X.");
        assert!(is_component_sentence(&c[0].text));
    }

    #[test]
    fn decompose_repairs_once() {
        let b = Scripted::new(vec![
            vec!["Sure! Here you go."],
            vec!["```json\n[\"This neuron activates when A.\"]\n```"],
        ]);
        let p = Prompts::default();
        let c = Agents::new(&b, &p).decompose(&raw("A"), 1).unwrap();
        assert_eq!(c.len(), 1);
        let seen = b.seen.lock().unwrap();
        assert_eq!(seen.len(), 2);
        assert!(seen[1].user.ends_with(REPAIR_SUFFIX));
        assert!(seen[0].system.contains("Return the result as a JSON array of strings."));
    }

    #[test]
    fn decompose_parse_error_after_retry() {
        let b = Scripted::new(vec![vec!["nope"], vec!["still nope"]]);
        let p = Prompts::default();
        let e = Agents::new(&b, &p).decompose(&raw("A"), 1).unwrap_err();
        assert!(matches!(e, AgentError::Parse(_)));
    }

    #[test]
    fn decompose_split_listing() {
        let split = [
            "This neuron activates when there is a mention or context related to calculation or computation in a text segment.",
            "This neuron activates when phrases like \"Calculate\", \"Compute\", or similar terms related to performing arithmetic or numerical operations appear.",
            "This neuron activates when it encounters tokens related to sequence found in programming contexts.",
            "This neuron activates when it encounters the symbol '#'.",
            "This neuron activates when it encounters the closing curly brace '}'.",
            "This neuron activates when it encounters the concatenation symbol + when used with syntax specific to coding such as {{ }} or {{ + }}.",
            "This neuron activates when it recognizes specific coding constructs or syntax that typically appear in programming tasks or examples.",
            "This neuron activates when the '#' symbol is placed in comments within blocks of code.",
            "This neuron activates when there is a comment starting with '#' in the middle of a code structure after previously defining or loading data, often seen in examples where the code proceeds further functionality, such as defining, creating, or iterating using imported modules or self-defined functions.",
            "This neuron activates when it is at the beginning of a line of comments in programming snippets.",
            "This neuron activates when it is at the beginning of a line of code in programming snippets.",
            "This neuron activates when it appears before a comment in programming snippets.",
            "This neuron activates when it appears before an in-line comment in programming snippets.",
            "This neuron activates when it is leading certain code segments in programming snippets.",
            "This neuron activates when opening delimiters for blocks occur at the start of a line in programming snippets.",
            "This neuron activates when new code sections occur at the start of a line in programming snippets.",
        ];
        let reply = serde_json::to_string(&split).unwrap();
        let b = Scripted::new(vec![vec![reply.as_str()]]);
        let p = Prompts::default();
        let c = Agents::new(&b, &p)
            .decompose(&raw("The neuron strongly activates in text segments where there is a mention or context related to calculation or computation."), 3)
            .unwrap();
        assert_eq!(c.len(), 16);
        assert!(c.iter().all(|x| is_component_sentence(&x.text)));
    }

    #[test]
    fn hypothesize_rules() {
        let p = Prompts::default();
        let b = Scripted::new(vec![vec![""]]);
        let a = Agents::new(&b, &p);
        let n = NeuronRef::new("m", 5, 1);
        assert!(matches!(a.hypothesize(&n, &[], 0), Err(AgentError::Precondition(_))));
        assert!(b.seen.lock().unwrap().is_empty());
        let seg = crate::model::TextSegment {
            segment_id: "s1".into(),
            text: "the cat".into(),
            tokens: vec!["the".into(), "cat".into()],
        };
        let rec = crate::model::ActivationRecord::new(n.clone(), "s1", vec![0.0, 3.0]).unwrap();
        let ex = Exemplar::new(seg, rec, 0.5);
        assert_eq!(a.hypothesize(&n, std::slice::from_ref(&ex), 0).unwrap_err(), AgentError::EmptyCompletion);
        let seen = b.seen.lock().unwrap();
        assert!(seen[0].user.contains("Excerpt 1: the {{cat}}"));
        assert_eq!(seen[0].temperature, DEFAULT_TEMPERATURE);
        assert_eq!(seen[0].n_samples, 1);
    }

    #[test]
    fn history_sorted_with_tie_rule() {
        let h = vec![
            HistoryEntry { iteration: 0, text: "zero".into(), score: 0.2 },
            HistoryEntry { iteration: 1, text: "one".into(), score: 0.5 },
            HistoryEntry { iteration: 2, text: "two".into(), score: 0.5 },
        ];
        let s = render_history(&h);
        let lines: Vec<&str> = s.lines().collect();
        assert!(lines[0].contains("one") && lines[1].contains("two") && lines[2].contains("zero"));
    }

    #[test]
    fn refine_candidates_resamples_empties() {
        let b = Scripted::new(vec![vec!["a", "", "b", " "], vec!["c", "d"]]);
        let p = Prompts::default();
        let h = vec![HistoryEntry { iteration: 0, text: "x".into(), score: 0.1 }];
        let c = Agents::new(&b, &p).refine_candidates(&h, 4, 9).unwrap();
        assert_eq!(c, vec!["a", "b", "c", "d"]);
        let seen = b.seen.lock().unwrap();
        assert_eq!(seen[0].n_samples, 4);
        assert_eq!(seen[1].n_samples, 2);
        assert!(seen[0].user.contains("ranked from highest to lowest"));
    }

    #[test]
    fn sentence_split() {
        assert_eq!(split_sentences("A b. C? D!E. "), vec!["A b.", "C?", "D!E."]);
        assert_eq!(split_sentences("v1.2 is out"), vec!["v1.2 is out"]);
        assert!(split_sentences("  ").is_empty());
    }

    #[test]
    fn parse_array_variants() {
        assert_eq!(parse_string_array("[\"a\"]").unwrap(), vec!["a"]);
        assert_eq!(parse_string_array("x ```[\"a\", \"b\"]``` y").unwrap().len(), 2);
        assert!(parse_string_array("[1, 2]").is_none());
        assert!(parse_string_array("none").is_none());
    }
}
