// SPDX-License-Identifier: Apache-2.0

//! End-to-end runs: exemplars, hypothesis, decomposition, clustering and
//! refinement for every selected neuron, persisted as one run directory.

mod config;
mod report;
mod summary;

pub use config::{preset_layers, ConfigError, MockConfig, RemoteConfig, RunConfig};
pub use report::{ClusterRecord, ExemplarSummary, NeuronReport};
pub use summary::{layer_summaries, load_run, summarize, LayerSummary, ReportError, RunSummary};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};
use thiserror::Error;

use crate::agents::mock::MockChat;
use crate::agents::{Agents, ChatBackend, Prompts, Throttled};
use crate::clustering::{cluster_components, EmbeddingBackend, MockEmbedder};
use crate::model::NeuronRef;
use crate::refinement::refine_cluster;
use crate::remote::{
    Endpoint, RemoteChat, RemoteEmbedder, RemoteSimulator, EMB_KEY_VAR, EMB_URL_VAR, LLM_KEY_VAR, LLM_URL_VAR,
    SIM_KEY_VAR, SIM_URL_VAR,
};
use crate::scoring::{MockSimulator, Simulator};
use crate::seed::{derive_seed, sha256_hex};
use crate::store::{build_exemplar_set, read_dump, select_neurons, ActivationDump, StoreError};
use crate::synthetic::Scenario;

pub const RUN_FORMAT: &str = "neuronscope-run/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const REPORTS_DIR: &str = "reports";
pub const SUMMARY_DIR: &str = "summary";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Setup(String),
    #[error("cannot write {0}: {1}")]
    Io(PathBuf, std::io::Error),
}

impl PipelineError {
    /// Whether the error stems from configuration or inputs rather than
    /// from writing results.
    pub fn is_config(&self) -> bool {
        !matches!(self, PipelineError::Io(..))
    }
}

/// The services a run talks to. Chat backends may be overridden per neuron.
#[derive(Clone)]
pub struct Backends {
    pub chat: Arc<dyn ChatBackend>,
    pub neuron_chat: BTreeMap<NeuronRef, Arc<dyn ChatBackend>>,
    pub embed: Arc<dyn EmbeddingBackend>,
    pub sim: Arc<dyn Simulator>,
}

impl Backends {
    pub fn new(chat: Arc<dyn ChatBackend>, embed: Arc<dyn EmbeddingBackend>, sim: Arc<dyn Simulator>) -> Self {
        Self {
            chat,
            neuron_chat: BTreeMap::new(),
            embed,
            sim,
        }
    }

    pub fn chat_for(&self, neuron: &NeuronRef) -> &dyn ChatBackend {
        self.neuron_chat.get(neuron).unwrap_or(&self.chat).as_ref()
    }

    /// Mock or remote backends as selected by the config; remote endpoints
    /// are read from the environment.
    pub fn from_config(cfg: &RunConfig) -> Result<Self, PipelineError> {
        let mut neuron_chat: BTreeMap<NeuronRef, Arc<dyn ChatBackend>> = BTreeMap::new();
        let chat: Arc<dyn ChatBackend> = if cfg.mock.agents {
            if let Some(path) = &cfg.mock.scenario {
                let scenario = Scenario::read(path).map_err(|e| PipelineError::Setup(e.to_string()))?;
                for n in scenario.synthetic_neurons().map_err(|e| PipelineError::Setup(e.to_string()))? {
                    let mock = MockChat::new().with_spurious(cfg.mock.spurious);
                    neuron_chat.insert(n.neuron.clone(), Arc::new(mock.with_oracle(n)));
                }
            }
            Arc::new(MockChat::new().with_spurious(cfg.mock.spurious))
        } else {
            let remote = RemoteChat::new(env_endpoint(LLM_URL_VAR, LLM_KEY_VAR)?, &cfg.remote.chat_model, timeout(cfg));
            Arc::new(Throttled::new(remote, cfg.remote.max_in_flight))
        };
        Ok(Self {
            chat,
            neuron_chat,
            embed: embedder_from_config(cfg)?,
            sim: simulator_from_config(cfg)?,
        })
    }
}

fn timeout(cfg: &RunConfig) -> Duration {
    Duration::from_secs(cfg.remote.timeout_secs)
}

fn env_endpoint(url: &'static str, key: &'static str) -> Result<Endpoint, PipelineError> {
    Endpoint::from_env(url, key).map_err(|e| PipelineError::Setup(e.to_string()))
}

pub fn embedder_from_config(cfg: &RunConfig) -> Result<Arc<dyn EmbeddingBackend>, PipelineError> {
    Ok(if cfg.mock.embeddings() {
        Arc::new(MockEmbedder::default())
    } else {
        Arc::new(RemoteEmbedder::new(
            env_endpoint(EMB_URL_VAR, EMB_KEY_VAR)?,
            &cfg.remote.embedding_model,
            timeout(cfg),
        ))
    })
}

pub fn simulator_from_config(cfg: &RunConfig) -> Result<Arc<dyn Simulator>, PipelineError> {
    Ok(if cfg.mock.sim {
        Arc::new(MockSimulator)
    } else {
        Arc::new(RemoteSimulator::new(env_endpoint(SIM_URL_VAR, SIM_KEY_VAR)?, timeout(cfg)))
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronEntry {
    pub neuron: NeuronRef,
    pub report: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronIssue {
    pub neuron: NeuronRef,
    pub reason: String,
}

/// Everything needed to interpret a run directory. Contains no wall-clock
/// data, so identical runs produce identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: RunConfig,
    pub config_hash: String,
    pub seed: u64,
    pub model_id: String,
    pub layers: Vec<u32>,
    pub selected: Vec<NeuronRef>,
    pub completed: Vec<NeuronEntry>,
    pub skipped: Vec<NeuronIssue>,
    pub failed: Vec<NeuronIssue>,
    pub reports_digest: String,
}

#[derive(Debug, Clone, Serialize)]
struct Timings {
    total_seconds: f64,
    neurons: Vec<(String, f64)>,
}

enum Outcome {
    Done(Box<NeuronReport>),
    Skipped(String),
    Failed(String),
}

pub fn report_path(neuron: &NeuronRef) -> String {
    format!("{REPORTS_DIR}/{}/{}.json", neuron.layer, neuron.index)
}

/// Writes via a temporary sibling and rename so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let io = |e| PipelineError::Io(path.to_path_buf(), e);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

pub(crate) fn to_json_pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("serializable");
    out.push(b'\n');
    out
}

fn resolve_layers(cfg: &RunConfig, dump: &ActivationDump) -> Result<Vec<u32>, PipelineError> {
    let mut all = dump.header.layers.clone();
    all.sort_unstable();
    all.dedup();
    if !cfg.layers.is_empty() {
        let mut layers = cfg.layers.clone();
        layers.sort_unstable();
        layers.dedup();
        if let Some(l) = layers.iter().find(|l| !dump.has_layer(**l)) {
            return Err(PipelineError::Setup(StoreError::LayerNotFound(*l).to_string()));
        }
        return Ok(layers);
    }
    if let Some(preset) = preset_layers(&dump.header.model_id) {
        let hit: Vec<u32> = all.iter().copied().filter(|l| preset.contains(l)).collect();
        if !hit.is_empty() {
            return Ok(hit);
        }
    }
    Ok(all)
}

struct Context<'a> {
    cfg: &'a RunConfig,
    dump: &'a ActivationDump,
    backends: &'a Backends,
    prompts: &'a Prompts,
}

impl Context<'_> {
    fn process(&self, neuron: &NeuronRef) -> Outcome {
        let cfg = self.cfg;
        let key = neuron.to_string();
        let seed = |stage: &str| derive_seed(cfg.seed, &[stage, &key]);
        let set = match build_exemplar_set(self.dump, neuron, cfg.exemplars, cfg.tau, seed("exemplars")) {
            Ok(s) => s,
            Err(e @ (StoreError::DegenerateNeuron(_) | StoreError::InsufficientData { .. })) => {
                return Outcome::Skipped(e.to_string())
            }
            Err(e) => return Outcome::Failed(e.to_string()),
        };
        let agents = Agents {
            backend: self.backends.chat_for(neuron),
            prompts: self.prompts,
            temperature: cfg.temperature,
        };
        let raw = match agents.hypothesize(neuron, &set.hypothesis_set, seed("hypothesis")) {
            Ok(r) => r,
            Err(e) => return Outcome::Failed(format!("hypothesis: {e}")),
        };
        let components = match agents.decompose(&raw, seed("decomposition")) {
            Ok(c) => c,
            Err(e) => return Outcome::Failed(format!("decomposition: {e}")),
        };
        let clusters = match cluster_components(
            self.backends.embed.as_ref(),
            &components,
            cfg.min_cluster_size,
            cfg.noise_policy,
        ) {
            Ok(c) => c,
            Err(e) => return Outcome::Failed(format!("clustering: {e}")),
        };
        let refine_cfg = cfg.effective_refinement();
        let trajectories: Result<Vec<_>, _> = clusters
            .par_iter()
            .map(|c| {
                let s = derive_seed(cfg.seed, &["refine", &key, &c.cluster_id.to_string()]);
                refine_cluster(&agents, self.backends.sim.as_ref(), c, &set, &refine_cfg, s)
            })
            .collect();
        let trajectories = match trajectories {
            Ok(t) => t,
            Err(e) => return Outcome::Failed(format!("refinement: {e}")),
        };
        // Clustered members carry their embeddings; discarded noise does not.
        let all_components: Vec<_> = components
            .iter()
            .map(|c| {
                clusters
                    .iter()
                    .flat_map(|k| k.members.iter())
                    .find(|m| m.component_id == c.component_id)
                    .unwrap_or(c)
                    .clone()
            })
            .collect();
        let report = NeuronReport::new(
            neuron.clone(),
            ExemplarSummary::of(&set),
            raw.text,
            all_components,
            &clusters,
            trajectories,
        );
        Outcome::Done(Box::new(report))
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: Manifest,
    pub run_dir: PathBuf,
}

impl RunOutcome {
    pub fn has_failures(&self) -> bool {
        !self.manifest.failed.is_empty()
    }
}

/// Runs the whole pipeline and writes `out_dir`. Per-neuron problems are
/// recorded in the manifest; only configuration and I/O problems are
/// returned as errors.
pub fn run_pipeline(
    cfg: &RunConfig,
    out_dir: &Path,
    backends: &Backends,
    overwrite: bool,
) -> Result<RunOutcome, PipelineError> {
    let started = Instant::now();
    cfg.validate()?;
    let dump = read_dump(&cfg.dump)
        .map_err(|e| PipelineError::Setup(format!("cannot read dump {}: {e}", cfg.dump.display())))?;
    let prompts = match &cfg.prompts_dir {
        Some(dir) => Prompts::load_dir(dir).map_err(|e| PipelineError::Setup(e.to_string()))?,
        None => Prompts::default(),
    };
    let layers = resolve_layers(cfg, &dump)?;
    prepare_dir(out_dir, overwrite)?;

    let mut selected = Vec::new();
    for &layer in &layers {
        selected.extend(select_neurons(&dump, layer, cfg.neurons).map_err(|e| PipelineError::Setup(e.to_string()))?);
    }
    if selected.is_empty() {
        log::warn!("no neurons to analyse in layers {layers:?}");
    }

    let ctx = Context {
        cfg,
        dump: &dump,
        backends,
        prompts: &prompts,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| PipelineError::Setup(e.to_string()))?;
    let outcomes: Vec<(Outcome, f64)> = pool.install(|| {
        selected
            .par_iter()
            .map(|n| {
                let t = Instant::now();
                let o = ctx.process(n);
                (o, t.elapsed().as_secs_f64())
            })
            .collect()
    });

    let mut completed = Vec::new();
    let mut skipped = Vec::new();
    let mut failed = Vec::new();
    let mut digests = Vec::new();
    let mut timings = Vec::new();
    for (neuron, (outcome, secs)) in selected.iter().zip(outcomes) {
        timings.push((neuron.to_string(), secs));
        match outcome {
            Outcome::Done(report) => {
                let rel = report_path(neuron);
                let bytes = to_json_pretty(&report);
                write_atomic(&out_dir.join(&rel), &bytes)?;
                digests.push(format!("{rel} {}", sha256_hex(&bytes)));
                completed.push(NeuronEntry {
                    neuron: neuron.clone(),
                    report: rel,
                });
            }
            Outcome::Skipped(reason) => {
                log::info!("skipping {neuron}: {reason}");
                skipped.push(NeuronIssue {
                    neuron: neuron.clone(),
                    reason,
                });
            }
            Outcome::Failed(reason) => {
                log::error!("{neuron} failed: {reason}");
                failed.push(NeuronIssue {
                    neuron: neuron.clone(),
                    reason,
                });
            }
        }
    }
    digests.sort();
    let manifest = Manifest {
        format: RUN_FORMAT.into(),
        config: cfg.clone(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        model_id: dump.header.model_id.clone(),
        layers,
        selected,
        completed,
        skipped,
        failed,
        reports_digest: sha256_hex(digests.join("\n").as_bytes()),
    };
    write_atomic(&out_dir.join(MANIFEST_FILE), &to_json_pretty(&manifest))?;
    let timings = Timings {
        total_seconds: started.elapsed().as_secs_f64(),
        neurons: timings,
    };
    write_atomic(&out_dir.join(TIMINGS_FILE), &to_json_pretty(&timings))?;
    Ok(RunOutcome {
        manifest,
        run_dir: out_dir.to_path_buf(),
    })
}

fn prepare_dir(out_dir: &Path, overwrite: bool) -> Result<(), PipelineError> {
    let io = |p: &Path, e| PipelineError::Io(p.to_path_buf(), e);
    if out_dir.join(MANIFEST_FILE).exists() {
        if !overwrite {
            return Err(PipelineError::Setup(format!(
                "{} already holds a run; pass overwrite to replace it",
                out_dir.display()
            )));
        }
        for d in [REPORTS_DIR, SUMMARY_DIR] {
            let p = out_dir.join(d);
            if p.exists() {
                std::fs::remove_dir_all(&p).map_err(|e| io(&p, e))?;
            }
        }
        for f in [MANIFEST_FILE, TIMINGS_FILE] {
            let p = out_dir.join(f);
            if p.exists() {
                std::fs::remove_file(&p).map_err(|e| io(&p, e))?;
            }
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))
}
