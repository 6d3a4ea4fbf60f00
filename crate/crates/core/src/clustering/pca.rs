// SPDX-License-Identifier: Apache-2.0

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;
use std::io::Write;
use thiserror::Error;

use super::SemanticCluster;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PcaError {
    #[error("need at least two points, got {0}")]
    TooFewPoints(usize),
    #[error("point {0} has dimension {1}, expected {2}")]
    Dimension(usize, usize, usize),
    #[error("cannot project {dim}-dimensional data onto {out_dim} components")]
    OutDim { dim: usize, out_dim: usize },
    #[error("points have no spread")]
    DegenerateSpread,
    #[error("non-finite coordinate in point {0}")]
    NonFinite(usize),
}

/// A fitted principal-component basis.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit loadings, one row per retained component.
    pub components: Vec<Vec<f64>>,
    /// Every eigenvalue of the sample covariance, descending.
    pub eigenvalues: Vec<f64>,
}

impl Pca {
    pub fn fit(points: &[Vec<f64>], out_dim: usize) -> Result<Self, PcaError> {
        let n = points.len();
        if n < 2 {
            return Err(PcaError::TooFewPoints(n));
        }
        let d = points[0].len();
        for (i, p) in points.iter().enumerate() {
            if p.len() != d {
                return Err(PcaError::Dimension(i, p.len(), d));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(PcaError::NonFinite(i));
            }
        }
        if out_dim == 0 || out_dim > d {
            return Err(PcaError::OutDim { dim: d, out_dim });
        }

        let mut mean = vec![0.0; d];
        for p in points {
            for (m, x) in mean.iter_mut().zip(p) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);

        let scale = points
            .iter()
            .flatten()
            .fold(0.0f64, |a, &x| a.max(x.abs()))
            .max(f64::MIN_POSITIVE);
        if centered.iter().all(|c| c.abs() <= scale * f64::EPSILON * 4.0) {
            return Err(PcaError::DegenerateSpread);
        }

        // With fewer points than dimensions, the n x n Gram matrix shares its
        // nonzero spectrum with the d x d covariance and is far cheaper.
        // nalgebra's SVD loses accuracy on some rank-deficient inputs, so
        // both routes go through the symmetric eigensolver.
        let dof = n as f64 - 1.0;
        let gram_pairs = (n < d).then(|| {
            let eig = SymmetricEigen::new(&centered * centered.transpose() / dof);
            let top = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
            (0..n)
                .filter(|&k| eig.eigenvalues[k] > top * 1e-12)
                .map(|k| {
                    let lambda = eig.eigenvalues[k];
                    let v = centered.transpose() * eig.eigenvectors.column(k) / (lambda * dof).sqrt();
                    (lambda, v.iter().copied().collect::<Vec<f64>>())
                })
                .collect::<Vec<_>>()
        });
        let mut pairs: Vec<(f64, Vec<f64>)> = match gram_pairs {
            Some(mut p) => {
                complete_basis(&mut p, d, out_dim);
                p
            }
            None => {
                let eig = SymmetricEigen::new(centered.transpose() * &centered / dof);
                (0..d)
                    .map(|k| (eig.eigenvalues[k], eig.eigenvectors.column(k).iter().copied().collect()))
                    .collect()
            }
        };
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut eigenvalues: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        // Directions beyond the data rank carry no variance.
        eigenvalues.resize(d, 0.0);
        let components = pairs
            .into_iter()
            .take(out_dim)
            .map(|(_, mut v)| {
                let lead = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
                if lead < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
                v
            })
            .collect();
        Ok(Self {
            mean,
            components,
            eigenvalues,
        })
    }

    pub fn project(&self, p: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(p.iter().zip(&self.mean)).map(|(w, (x, m))| w * (x - m)).sum())
            .collect()
    }

    pub fn reconstruct(&self, y: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &s) in self.components.iter().zip(y) {
            for (o, w) in out.iter_mut().zip(c) {
                *o += s * w;
            }
        }
        out
    }

    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        let total: f64 = self.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        self.eigenvalues[..self.components.len()]
            .iter()
            .map(|v| if total > 0.0 { v.max(0.0) / total } else { 0.0 })
            .collect()
    }
}

/// Extends rank-deficient components with zero-variance directions taken
/// from the standard basis, so callers always get `out_dim` orthonormal axes.
fn complete_basis(pairs: &mut Vec<(f64, Vec<f64>)>, d: usize, out_dim: usize) {
    for j in 0..d {
        if pairs.len() >= out_dim {
            break;
        }
        let mut v = vec![0.0; d];
        v[j] = 1.0;
        for (_, u) in pairs.iter() {
            let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(x, a)| *x -= dot * a);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.5 {
            v.iter_mut().for_each(|x| *x /= norm);
            pairs.push((0.0, v));
        }
    }
}

pub fn pca_project(points: &[Vec<f64>], out_dim: usize) -> Result<Vec<Vec<f64>>, PcaError> {
    let pca = Pca::fit(points, out_dim)?;
    Ok(points.iter().map(|p| pca.project(p)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PcaRow {
    pub cluster_id: usize,
    pub x: f64,
    pub y: f64,
    pub text: String,
}

/// Two-dimensional projection of every embedded cluster member.
pub fn pca_table(clusters: &[SemanticCluster]) -> Result<Vec<PcaRow>, PcaError> {
    let members: Vec<(usize, &str, &Vec<f64>)> = clusters
        .iter()
        .flat_map(|c| {
            c.members
                .iter()
                .filter_map(move |m| m.embedding.as_ref().map(|e| (c.cluster_id, m.text.as_str(), e)))
        })
        .collect();
    let points: Vec<Vec<f64>> = members.iter().map(|(_, _, e)| (*e).clone()).collect();
    let coords = pca_project(&points, 2)?;
    Ok(members
        .iter()
        .zip(coords)
        .map(|((id, text, _), xy)| PcaRow {
            cluster_id: *id,
            x: xy[0],
            y: xy[1],
            text: (*text).to_string(),
        })
        .collect())
}

pub fn write_pca_csv<W: Write>(rows: &[PcaRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(["cluster_id", "x", "y", "text"])?;
    }
    w.flush()?;
    Ok(())
}
