// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use super::embed::{cosine, embed_checked, EmbeddingBackend};
use super::ClusterError;
use crate::agents::split_sentences;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceAssignment {
    pub sentence: String,
    pub reference_index: usize,
    pub cosine: f64,
}

/// Maps every sentence of `explanation` to its most similar reference;
/// ties go to the lower index.
pub fn assign_sentences(
    explanation: &str,
    references: &[String],
    backend: &dyn EmbeddingBackend,
) -> Result<Vec<SentenceAssignment>, ClusterError> {
    if references.is_empty() {
        return Err(ClusterError::Empty);
    }
    let sentences = split_sentences(explanation);
    if sentences.is_empty() {
        return Ok(Vec::new());
    }
    let mut texts = sentences.clone();
    texts.extend(references.iter().cloned());
    let vectors = embed_checked(backend, &texts)?;
    let (sent_vecs, ref_vecs) = vectors.split_at(sentences.len());
    Ok(sentences
        .into_iter()
        .zip(sent_vecs)
        .map(|(sentence, v)| {
            let (reference_index, cos) = ref_vecs
                .iter()
                .map(|r| cosine(v, r))
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, c)| if c > best.1 { (i, c) } else { best });
            SentenceAssignment {
                sentence,
                reference_index,
                cosine: cos,
            }
        })
        .collect())
}
