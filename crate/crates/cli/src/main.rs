// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context as _};
use clap::{Args, Parser, Subcommand};

use neuronscope::clustering::assign_sentences;
use neuronscope::pipeline::{
    embedder_from_config, run_pipeline, simulator_from_config, summarize, Backends, RunConfig, RunSummary,
    MANIFEST_FILE,
};
use neuronscope::scoring::score_on_set;
use neuronscope::seed::derive_seed;
use neuronscope::store::{build_exemplar_set, rank_neurons, read_dump, write_dump};
use neuronscope::synthetic::Scenario;

const EXIT_FATAL: u8 = 1;
const EXIT_PARTIAL: u8 = 2;

#[derive(Parser)]
#[command(name = "neuronscope", version, about = "Explain LLM neurons with decomposed, clustered and refined explanations")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize a synthetic scenario into an activation dump.
    Synth {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Preview which neurons a run would analyse.
    Select {
        dump: PathBuf,
        #[arg(long = "layer")]
        layers: Vec<u32>,
        #[arg(long, default_value_t = 200)]
        neurons: usize,
    },
    /// Run the full pipeline and summarize the results.
    Run(RunArgs),
    /// Summarize an existing run directory.
    Report { run: PathBuf },
    /// Score one explanation against a neuron's validation exemplars.
    Score(ScoreArgs),
    /// Assign each sentence of an explanation to its closest reference.
    Purity(PurityArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Activation dump; overrides the config.
    #[arg(long)]
    dump: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Offline keyword simulator instead of the remote one.
    #[arg(long)]
    mock_sim: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Layer to analyse; repeat for several.
    #[arg(long = "layer")]
    layers: Vec<u32>,
    /// Neurons per layer.
    #[arg(long)]
    neurons: Option<usize>,
    /// Keep each cluster's representative without refining it.
    #[arg(long)]
    no_refinement: bool,
    /// Offline agents (and embeddings) instead of the remote services.
    #[arg(long)]
    mock_agents: bool,
    /// Synthetic scenario whose ground truth guides the offline agents.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Distractor words the offline hypothesis agent adds.
    #[arg(long)]
    spurious: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Replace an existing run in the output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    layer: u32,
    #[arg(long)]
    index: u32,
    #[arg(long)]
    explanation: String,
}

#[derive(Args)]
struct PurityArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    explanation: String,
    /// Reference sentence; repeat for several.
    #[arg(long = "reference", required = true)]
    references: Vec<String>,
    /// Offline hashed embeddings instead of the remote service.
    #[arg(long)]
    mock_embeddings: bool,
}

fn load_config(path: Option<&PathBuf>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn apply_common(cfg: &mut RunConfig, c: &Common) {
    if let Some(d) = &c.dump {
        cfg.dump = d.clone();
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.mock.sim |= c.mock_sim;
}

fn print_summary(s: &RunSummary) {
    println!("layer\tneurons\tmean_score\tmean_number\tinitial_score");
    for l in &s.layers {
        println!(
            "{}\t{}\t{:.4}\t{:.3}\t{:.4}",
            l.layer, l.neurons, l.mean_score, l.mean_number, l.mean_initial_score
        );
    }
    println!(
        "completed {}, skipped {}, failed {}; mean score {:.4}, mean number {:.3}",
        s.completed, s.skipped, s.failed, s.mean_score, s.mean_number
    );
}

fn run(args: RunArgs) -> anyhow::Result<u8> {
    let mut cfg = load_config(args.common.config.as_ref())?;
    apply_common(&mut cfg, &args.common);
    if !args.layers.is_empty() {
        cfg.layers = args.layers;
    }
    if let Some(n) = args.neurons {
        cfg.neurons = n;
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    if let Some(n) = args.spurious {
        cfg.mock.spurious = n;
    }
    if args.scenario.is_some() {
        cfg.mock.scenario = args.scenario;
    }
    cfg.refine &= !args.no_refinement;
    cfg.mock.agents |= args.mock_agents;
    cfg.validate()?;

    if !args.force && args.out.join(MANIFEST_FILE).exists() {
        bail!("{} already holds a run; pass --force to replace it", args.out.display());
    }
    let backends = Backends::from_config(&cfg)?;
    let outcome = run_pipeline(&cfg, &args.out, &backends, args.force)?;
    let summary = summarize(&outcome.run_dir)?;
    print_summary(&summary);
    for f in &outcome.manifest.failed {
        eprintln!("failed {}: {}", f.neuron, f.reason);
    }
    Ok(if outcome.has_failures() { EXIT_PARTIAL } else { 0 })
}

fn score(args: ScoreArgs) -> anyhow::Result<u8> {
    let mut cfg = load_config(args.common.config.as_ref())?;
    apply_common(&mut cfg, &args.common);
    cfg.validate()?;
    let dump = read_dump(&cfg.dump).with_context(|| format!("reading {}", cfg.dump.display()))?;
    let neuron = dump.neuron_ref(args.layer, args.index);
    // Same exemplar seed as a pipeline run with this config.
    let seed = derive_seed(cfg.seed, &["exemplars", &neuron.to_string()]);
    let set = build_exemplar_set(&dump, &neuron, cfg.exemplars, cfg.tau, seed)?;
    let sim = simulator_from_config(&cfg)?;
    let result = score_on_set(sim.as_ref(), &args.explanation, &set)?;
    println!("{}", serde_json::to_string(&result)?);
    Ok(0)
}

fn purity(args: PurityArgs) -> anyhow::Result<u8> {
    let mut cfg = load_config(args.config.as_ref())?;
    if args.mock_embeddings {
        cfg.mock.embeddings = Some(true);
    }
    let embed = embedder_from_config(&cfg)?;
    for a in assign_sentences(&args.explanation, &args.references, embed.as_ref())? {
        println!("{}", serde_json::to_string(&a)?);
    }
    Ok(0)
}

fn dispatch(cmd: Command) -> anyhow::Result<u8> {
    match cmd {
        Command::Synth { scenario, out } => {
            let s = Scenario::read(&scenario).with_context(|| format!("reading {}", scenario.display()))?;
            let dump = s.materialize()?;
            write_dump(&dump, &out).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} records to {}", dump.records.len(), out.display());
            Ok(0)
        }
        Command::Select { dump, layers, neurons } => {
            let d = read_dump(&dump).with_context(|| format!("reading {}", dump.display()))?;
            let layers = if layers.is_empty() { d.header.layers.clone() } else { layers };
            if layers.is_empty() {
                bail!("the dump lists no layers");
            }
            println!("layer\tindex\tfrequency");
            for layer in layers {
                for (n, f) in rank_neurons(&d, layer, neurons)? {
                    println!("{}\t{}\t{f}", n.layer, n.index);
                }
            }
            Ok(0)
        }
        Command::Run(args) => run(args),
        Command::Report { run } => {
            let s = summarize(&run)?;
            print_summary(&s);
            Ok(0)
        }
        Command::Score(args) => score(args),
        Command::Purity(args) => purity(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FATAL)
        }
    }
}
