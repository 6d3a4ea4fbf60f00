// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

use super::report::mean;
use super::{to_json_pretty, write_atomic, Manifest, NeuronReport, PipelineError, MANIFEST_FILE, SUMMARY_DIR};
use crate::clustering::pca::{pca_table, write_pca_csv};
use crate::refinement::convergence_table;
use crate::scoring::number_metric;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot read {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("{0} is not valid: {1}")]
    Parse(PathBuf, String),
    #[error("run is incomplete; missing reports for {}", .0.join(", "))]
    IncompleteRun(Vec<String>),
    #[error(transparent)]
    Write(#[from] PipelineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: u32,
    pub neurons: usize,
    /// Mean over neurons of each neuron's mean final score.
    pub mean_score: f64,
    /// Mean cluster count per neuron.
    pub mean_number: f64,
    /// Mean over neurons of the per-neuron mean initial (iteration 0) score.
    pub mean_initial_score: f64,
    pub convergence: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub layers: Vec<LayerSummary>,
    pub mean_score: f64,
    pub mean_number: f64,
    pub completed: usize,
    pub skipped: usize,
    pub failed: usize,
}

fn read(path: &Path) -> Result<Vec<u8>, ReportError> {
    std::fs::read(path).map_err(|e| ReportError::Io(path.to_path_buf(), e))
}

/// Loads the manifest and every completed report of a run directory.
pub fn load_run(run_dir: &Path) -> Result<(Manifest, Vec<NeuronReport>), ReportError> {
    let mpath = run_dir.join(MANIFEST_FILE);
    let manifest: Manifest =
        serde_json::from_slice(&read(&mpath)?).map_err(|e| ReportError::Parse(mpath.clone(), e.to_string()))?;
    let missing: Vec<String> = manifest
        .completed
        .iter()
        .filter(|e| !run_dir.join(&e.report).is_file())
        .map(|e| e.neuron.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(ReportError::IncompleteRun(missing));
    }
    let mut reports = Vec::with_capacity(manifest.completed.len());
    for e in &manifest.completed {
        let p = run_dir.join(&e.report);
        let r: NeuronReport =
            serde_json::from_slice(&read(&p)?).map_err(|err| ReportError::Parse(p.clone(), err.to_string()))?;
        r.check().map_err(|m| ReportError::Parse(p.clone(), m))?;
        reports.push(r);
    }
    Ok((manifest, reports))
}

fn initial_score(r: &NeuronReport) -> f64 {
    mean(r.trajectories.iter().map(|t| t.history[0].score))
}

/// Per-layer aggregates, ordered by layer.
pub fn layer_summaries(reports: &[NeuronReport], max_iter: usize) -> Vec<LayerSummary> {
    let mut by_layer: BTreeMap<u32, Vec<&NeuronReport>> = BTreeMap::new();
    for r in reports {
        by_layer.entry(r.neuron.layer).or_default().push(r);
    }
    by_layer
        .into_iter()
        .map(|(layer, rs)| {
            let trajectories: Vec<_> = rs.iter().flat_map(|r| r.trajectories.iter().cloned()).collect();
            LayerSummary {
                layer,
                neurons: rs.len(),
                mean_score: mean(rs.iter().map(|r| r.mean_final_score)),
                mean_number: mean(rs.iter().map(|r| r.number as f64)),
                mean_initial_score: mean(rs.iter().map(|r| initial_score(r))),
                convergence: convergence_table(&trajectories, max_iter),
            }
        })
        .collect()
}

/// Aggregates a run and writes `summary/summary.json`,
/// `summary/convergence.csv` and one PCA table per neuron under
/// `summary/pca/`.
pub fn summarize(run_dir: &Path) -> Result<RunSummary, ReportError> {
    let (manifest, reports) = load_run(run_dir)?;
    let max_iter = manifest.config.effective_refinement().max_iter;

    let layers = layer_summaries(&reports, max_iter);
    let summary = RunSummary {
        config_hash: manifest.config_hash.clone(),
        mean_score: mean(reports.iter().map(|r| r.mean_final_score)),
        mean_number: number_metric(&reports).unwrap_or(0.0),
        layers,
        completed: manifest.completed.len(),
        skipped: manifest.skipped.len(),
        failed: manifest.failed.len(),
    };

    let dir = run_dir.join(SUMMARY_DIR);
    write_atomic(&dir.join("summary.json"), &to_json_pretty(&summary))?;
    let mut csv = String::from("layer,iteration,mean_best_score\n");
    for l in &summary.layers {
        for (i, v) in l.convergence.iter().enumerate() {
            csv.push_str(&format!("{},{i},{v}\n", l.layer));
        }
    }
    write_atomic(&dir.join("convergence.csv"), csv.as_bytes())?;
    for r in &reports {
        let rows = match pca_table(&r.semantic_clusters()) {
            Ok(rows) => rows,
            Err(e) => {
                log::info!("no PCA projection for {}: {e}", r.neuron);
                Vec::new()
            }
        };
        let mut buf = Vec::new();
        write_pca_csv(&rows, &mut buf).map_err(|e| ReportError::Parse(dir.clone(), e.to_string()))?;
        let name = format!("pca/{}_{}.csv", r.neuron.layer, r.neuron.index);
        write_atomic(&dir.join(name), &buf)?;
    }
    Ok(summary)
}
