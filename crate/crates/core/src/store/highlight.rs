// SPDX-License-Identifier: Apache-2.0

use std::ops::Range;

use crate::model::{ActivationRecord, TextSegment};

pub const OPEN: &str = "{{";
pub const CLOSE: &str = "}}";

/// Locates each token in `text`, left to right. Tokens that cannot be
/// found map to an empty span at the current cursor so that rendering never
/// alters the underlying text.
fn token_spans(text: &str, tokens: &[String]) -> Vec<Range<usize>> {
    let mut cursor = 0;
    tokens
        .iter()
        .map(|tok| {
            let trimmed = tok.trim();
            if trimmed.is_empty() {
                return cursor..cursor;
            }
            match text[cursor..].find(trimmed) {
                Some(off) => {
                    let start = cursor + off;
                    cursor = start + trimmed.len();
                    start..cursor
                }
                None => cursor..cursor,
            }
        })
        .collect()
}

/// Wraps each maximal run of activating tokens in one `{{ }}` pair.
///
/// A token activates when its value is positive and at least `tau` times
/// the segment maximum. With no activating token the plain text is returned.
pub fn render_highlighted(segment: &TextSegment, record: &ActivationRecord, tau: f64) -> String {
    let seg_max = record.per_token.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let active: Vec<bool> = record
        .per_token
        .iter()
        .map(|&v| v > 0.0 && v >= tau * seg_max)
        .collect();
    let spans = token_spans(&segment.text, &segment.tokens);

    // Byte ranges of merged runs, skipping tokens that were not located.
    let mut runs: Vec<Range<usize>> = Vec::new();
    let mut current: Option<Range<usize>> = None;
    for (span, &on) in spans.iter().zip(&active) {
        if on && !span.is_empty() {
            current = Some(match current {
                Some(r) => r.start..span.end,
                None => span.clone(),
            });
        } else if !on {
            runs.extend(current.take());
        }
    }
    runs.extend(current);

    let text = &segment.text;
    let mut out = String::with_capacity(text.len() + runs.len() * 4);
    let mut pos = 0;
    for r in runs {
        out.push_str(&text[pos..r.start]);
        out.push_str(OPEN);
        out.push_str(&text[r.clone()]);
        out.push_str(CLOSE);
        pos = r.end;
    }
    out.push_str(&text[pos..]);
    out
}

/// Removes every highlight marker.
pub fn strip_highlights(s: &str) -> String {
    s.replace(OPEN, "").replace(CLOSE, "")
}

/// Contents of each `{{ }}` pair in order.
pub fn highlighted_spans(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = s;
    while let Some(i) = rest.find(OPEN) {
        let after = &rest[i + OPEN.len()..];
        match after.find(CLOSE) {
            Some(j) => {
                out.push(&after[..j]);
                rest = &after[j + CLOSE.len()..];
            }
            None => break,
        }
    }
    out
}
