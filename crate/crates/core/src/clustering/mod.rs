// SPDX-License-Identifier: Apache-2.0

//! Grouping atomic components into semantic clusters, plus the PCA and
//! sentence-purity analyses built on the same embeddings.

mod embed;
pub mod hdbscan;
pub mod pca;
mod purity;

pub use embed::{cosine, embed_checked, l2_normalize, EmbeddingBackend, MockEmbedder, MOCK_EMBEDDING_DIM};
pub use hdbscan::{hdbscan, hdbscan_with, HdbscanError, HdbscanParams};
pub use pca::{pca_project, Pca, PcaError};
pub use purity::{assign_sentences, SentenceAssignment};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::AtomicComponent;
use crate::backend::BackendError;

/// Ties closer than this in centroid distance fall back to text order.
const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoisePolicy {
    #[default]
    Discard,
    Singleton,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticCluster {
    pub cluster_id: usize,
    pub members: Vec<AtomicComponent>,
    pub representative: AtomicComponent,
    pub centroid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClusterError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Hdbscan(#[from] HdbscanError),
    #[error("nothing to cluster")]
    Empty,
}

impl SemanticCluster {
    /// Builds a cluster from members that already carry normalized
    /// embeddings.
    pub fn from_members(cluster_id: usize, members: Vec<AtomicComponent>) -> Self {
        let dim = members
            .iter()
            .find_map(|m| m.embedding.as_ref().map(Vec::len))
            .unwrap_or(0);
        let mut centroid = vec![0.0; dim];
        let embedded: Vec<&Vec<f64>> = members.iter().filter_map(|m| m.embedding.as_ref()).collect();
        for e in &embedded {
            for (c, x) in centroid.iter_mut().zip(e.iter()) {
                *c += x;
            }
        }
        if !embedded.is_empty() {
            let k = embedded.len() as f64;
            centroid.iter_mut().for_each(|c| *c /= k);
        }
        let representative = representative_of(&members, &centroid).clone();
        Self {
            cluster_id,
            members,
            representative,
            centroid,
        }
    }
}

fn representative_of<'a>(members: &'a [AtomicComponent], centroid: &[f64]) -> &'a AtomicComponent {
    let dist = |m: &AtomicComponent| {
        m.embedding
            .as_ref()
            .map_or(f64::INFINITY, |e| hdbscan::euclidean(e, centroid))
    };
    let mut best = &members[0];
    let mut best_d = dist(best);
    for m in &members[1..] {
        let d = dist(m);
        let tie = (d - best_d).abs() <= TIE_TOLERANCE || (d.is_infinite() && best_d.is_infinite());
        if (!tie && d < best_d) || (tie && m.text < best.text) {
            best = m;
            best_d = d;
        }
    }
    best
}

/// The member nearest the centroid; near-ties go to the smaller text.
pub fn pick_representative(cluster: &SemanticCluster) -> &AtomicComponent {
    representative_of(&cluster.members, &cluster.centroid)
}

/// Embeds, normalizes and clusters `components`. The root of the density
/// tree may be selected, so a set of near-identical components forms one
/// cluster instead of dissolving into noise.
pub fn cluster_components(
    backend: &dyn EmbeddingBackend,
    components: &[AtomicComponent],
    min_cluster_size: usize,
    noise_policy: NoisePolicy,
) -> Result<Vec<SemanticCluster>, ClusterError> {
    if components.is_empty() {
        return Err(ClusterError::Empty);
    }
    let texts: Vec<String> = components.iter().map(|c| c.text.clone()).collect();
    let vectors: Vec<Vec<f64>> = embed_checked(backend, &texts)?
        .iter()
        .map(|v| l2_normalize(v))
        .collect();
    let labels = hdbscan_with(
        &vectors,
        HdbscanParams {
            allow_single_cluster: true,
            ..HdbscanParams::new(min_cluster_size)
        },
    )?;

    let embedded: Vec<AtomicComponent> = components
        .iter()
        .zip(vectors)
        .map(|(c, v)| AtomicComponent {
            embedding: Some(v),
            ..c.clone()
        })
        .collect();

    // (index of first member, members)
    let mut groups: Vec<(usize, Vec<AtomicComponent>)> = Vec::new();
    let n_labels = labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize);
    for label in 0..n_labels as i32 {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        groups.push((idx[0], idx.iter().map(|&i| embedded[i].clone()).collect()));
    }
    if noise_policy == NoisePolicy::Singleton {
        for (i, _) in labels.iter().enumerate().filter(|(_, &l)| l < 0) {
            groups.push((i, vec![embedded[i].clone()]));
        }
    }
    if groups.is_empty() {
        log::debug!("all {} components are noise; using singleton clusters", components.len());
        groups = embedded.iter().cloned().enumerate().map(|(i, c)| (i, vec![c])).collect();
    }
    groups.sort_by_key(|(first, _)| *first);
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(id, (_, members))| SemanticCluster::from_members(id, members))
        .collect())
}
