// SPDX-License-Identifier: Apache-2.0

#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use neuronscope::agents::mock::MockChat;
use neuronscope::clustering::MockEmbedder;
use neuronscope::pipeline::{Backends, MockConfig, RunConfig};
use neuronscope::scoring::MockSimulator;
use neuronscope::store::write_dump;
use neuronscope::synthetic::{Scenario, ScenarioNeuron, SyntheticMode, SCENARIO_FORMAT};

pub const LAYER: u32 = 3;

/// Planted mode count of neuron `i` in [`suite`].
pub fn planted_k(i: u32) -> usize {
    (i % 3 + 1) as usize
}

fn modes_for(i: u32) -> Vec<SyntheticMode> {
    let w = |k: usize| format!("trig{i}{}", ["a", "b", "c"][k]);
    let words = |k: usize| [format!("{}x", w(k)), format!("{}y", w(k))];
    let mode = |k: usize, weight: f64| {
        let [a, b] = words(k);
        SyntheticMode::new(&format!("m{k}"), &[&a, &b], weight)
    };
    // Weaker modes are more common so each reaches the top exemplars.
    match planted_k(i) {
        1 => vec![mode(0, 10.0)],
        2 => vec![mode(0, 10.0), mode(1, 6.0).with_rate(8.0)],
        _ => vec![mode(0, 10.0), mode(1, 7.0), mode(2, 4.0).with_rate(16.0)],
    }
}

/// Ten neurons in one layer with one to three planted modes each.
pub fn suite(seed: u64) -> Scenario {
    Scenario {
        format: SCENARIO_FORMAT.into(),
        model_id: "synthetic-suite".into(),
        n_segments: 150,
        seed,
        fire_rate: 0.45,
        vocab: None,
        n_distractors: 200,
        neurons: (0..10)
            .map(|i| ScenarioNeuron {
                layer: LAYER,
                index: i,
                modes: modes_for(i),
            })
            .collect(),
    }
}

/// Writes the scenario and its dump into `dir`; returns a mock-mode config.
pub fn mock_setup(dir: &Path, scenario: &Scenario, spurious: usize) -> RunConfig {
    let dump = dir.join("suite.nsdump");
    write_dump(&scenario.materialize().unwrap(), &dump).unwrap();
    let synth = dir.join("suite.synth");
    std::fs::write(&synth, scenario.to_json()).unwrap();
    RunConfig {
        dump,
        neurons: scenario.neurons.len(),
        seed: 7,
        mock: MockConfig {
            agents: true,
            sim: true,
            embeddings: None,
            spurious,
            scenario: Some(synth),
        },
        ..RunConfig::default()
    }
}

/// Mock backends without any oracle.
pub fn plain_mock() -> Backends {
    Backends::new(
        Arc::new(MockChat::new()),
        Arc::new(MockEmbedder::default()),
        Arc::new(MockSimulator),
    )
}
