// SPDX-License-Identifier: Apache-2.0

use crate::backend::BackendError;

/// Maps texts to dense vectors of one shared dimension.
pub trait EmbeddingBackend: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError>;
}

impl<T: EmbeddingBackend + ?Sized> EmbeddingBackend for std::sync::Arc<T> {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        (**self).embed(texts)
    }
}

pub const MOCK_EMBEDDING_DIM: usize = 256;

/// Hashed character-trigram counts, L2-normalized. Texts sharing words end
/// up close together.
#[derive(Debug, Clone, Copy)]
pub struct MockEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for MockEmbedder {
    fn default() -> Self {
        Self {
            dim: MOCK_EMBEDDING_DIM,
            seed: 0,
        }
    }
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl MockEmbedder {
    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let padded: Vec<char> = format!(" {} ", text.to_lowercase()).chars().collect();
        let mut v = vec![0.0; self.dim];
        let mut buf = String::new();
        for w in padded.windows(3) {
            buf.clear();
            buf.extend(w);
            v[(fnv1a(self.seed, buf.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        l2_normalize(&v)
    }
}

impl EmbeddingBackend for MockEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Unit-length copy of `v`; the zero vector is returned unchanged.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / norm).collect()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Embeds `texts` and checks the backend honoured the output contract.
pub fn embed_checked(backend: &dyn EmbeddingBackend, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
    let out = backend.embed(texts)?;
    if out.len() != texts.len() {
        return Err(BackendError::new(format!(
            "embedding backend returned {} vectors for {} texts",
            out.len(),
            texts.len()
        )));
    }
    if let Some(first) = out.first() {
        let d = first.len();
        if d == 0 || out.iter().any(|v| v.len() != d) {
            return Err(BackendError::new("embedding vectors have inconsistent dimensions"));
        }
        if out.iter().flatten().any(|x| !x.is_finite()) {
            return Err(BackendError::new("embedding contains non-finite values"));
        }
    }
    Ok(out)
}
