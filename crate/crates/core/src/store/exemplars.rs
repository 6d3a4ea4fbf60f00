// SPDX-License-Identifier: Apache-2.0

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::dump::ActivationDump;
use super::highlight::render_highlighted;
use crate::model::{normalize_value, segment_activation, ActivationRecord, NeuronRef, TextSegment};

/// Normalized activation above which a segment counts as a firing.
pub const FIRING_THRESHOLD: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StoreError {
    #[error("layer {0} not found in dump")]
    LayerNotFound(u32),
    #[error("insufficient data: needed {needed} segments, found {found}")]
    InsufficientData { needed: usize, found: usize },
    #[error("neuron {0} never activates positively")]
    DegenerateNeuron(NeuronRef),
    #[error("invalid request: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub segment: TextSegment,
    pub record: ActivationRecord,
    pub highlighted: String,
}

impl Exemplar {
    pub fn new(segment: TextSegment, record: ActivationRecord, tau: f64) -> Self {
        let highlighted = render_highlighted(&segment, &record, tau);
        Self {
            segment,
            record,
            highlighted,
        }
    }

    pub fn activation(&self) -> f64 {
        segment_activation(&self.record)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarSet {
    pub neuron: NeuronRef,
    pub hypothesis_set: Vec<Exemplar>,
    pub validation_set: Vec<Exemplar>,
    pub neuron_max: f64,
}

impl ExemplarSet {
    pub fn normalized(&self, ex: &Exemplar) -> f64 {
        normalize_value(ex.activation(), self.neuron_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExemplarSizes {
    pub hypothesis: usize,
    pub validation_top: usize,
    pub validation_random: usize,
}

impl Default for ExemplarSizes {
    fn default() -> Self {
        Self {
            hypothesis: 20,
            validation_top: 20,
            validation_random: 20,
        }
    }
}

/// Number of segments on which the neuron's normalized segment activation
/// exceeds [`FIRING_THRESHOLD`].
pub fn activation_frequency(dump: &ActivationDump, neuron: &NeuronRef) -> usize {
    let recs = dump.records_for(neuron);
    let max = recs
        .iter()
        .map(|(_, r)| r.max_value)
        .fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return 0;
    }
    recs.iter()
        .filter(|(_, r)| normalize_value(r.max_value, max) > FIRING_THRESHOLD)
        .count()
}

/// Ranks the neurons of `layer` by activation frequency (descending), ties
/// going to the lower index, and returns the first `count` with their
/// frequencies.
pub fn rank_neurons(
    dump: &ActivationDump,
    layer: u32,
    count: usize,
) -> Result<Vec<(NeuronRef, usize)>, StoreError> {
    if count == 0 {
        return Err(StoreError::InvalidArgument("count must be at least 1".into()));
    }
    if !dump.has_layer(layer) {
        return Err(StoreError::LayerNotFound(layer));
    }
    let mut ranked: Vec<(NeuronRef, usize)> = dump
        .neurons_in_layer(layer)
        .into_iter()
        .map(|idx| {
            let n = dump.neuron_ref(layer, idx);
            let f = activation_frequency(dump, &n);
            (n, f)
        })
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.index.cmp(&b.0.index)));
    ranked.truncate(count);
    Ok(ranked)
}

pub fn select_neurons(
    dump: &ActivationDump,
    layer: u32,
    count: usize,
) -> Result<Vec<NeuronRef>, StoreError> {
    Ok(rank_neurons(dump, layer, count)?
        .into_iter()
        .map(|(n, _)| n)
        .collect())
}

/// Splits a neuron's segments into a top-activation hypothesis set and a
/// held-out validation set made of the next strongest segments plus a
/// seeded uniform sample of the remainder.
pub fn build_exemplar_set(
    dump: &ActivationDump,
    neuron: &NeuronRef,
    sizes: ExemplarSizes,
    tau: f64,
    seed: u64,
) -> Result<ExemplarSet, StoreError> {
    if sizes.hypothesis == 0 || sizes.validation_top + sizes.validation_random < 2 {
        return Err(StoreError::InvalidArgument(
            "need at least one hypothesis and two validation exemplars".into(),
        ));
    }
    let mut recs = dump.records_for(neuron);
    let neuron_max = recs
        .iter()
        .map(|(_, r)| r.max_value)
        .fold(f64::NEG_INFINITY, f64::max);
    if !(neuron_max > 0.0) {
        return Err(StoreError::DegenerateNeuron(neuron.clone()));
    }
    let needed_positive = sizes.hypothesis + sizes.validation_top;
    let positive = recs.iter().filter(|(_, r)| r.max_value > 0.0).count();
    if positive < needed_positive {
        return Err(StoreError::InsufficientData {
            needed: needed_positive,
            found: positive,
        });
    }
    let needed_total = needed_positive + sizes.validation_random;
    let total = recs.len();
    if total < needed_total {
        return Err(StoreError::InsufficientData {
            needed: needed_total,
            found: recs.len(),
        });
    }

    // stable: ties keep file order
    recs.sort_by(|a, b| b.1.max_value.total_cmp(&a.1.max_value));
    let make = |(segment, record): (TextSegment, ActivationRecord)| {
        let highlighted = render_highlighted(&segment, &record, tau);
        Exemplar {
            segment,
            record,
            highlighted,
        }
    };

    let mut rest = recs.split_off(needed_positive);
    let top_validation = recs.split_off(sizes.hypothesis);
    let hypothesis = recs;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, rest.len(), sizes.validation_random).into_vec();

    // Variance guard: the validation set needs at least one low segment.
    let is_low = |v: f64| normalize_value(v, neuron_max) < 1.0;
    let has_low = top_validation.iter().any(|(_, r)| is_low(r.max_value))
        || picked.iter().any(|&i| is_low(rest[i].1.max_value));
    if !has_low {
        let lowest = (0..rest.len())
            .filter(|i| !picked.contains(i))
            .filter(|&i| is_low(rest[i].1.max_value))
            .min_by(|&a, &b| rest[a].1.max_value.total_cmp(&rest[b].1.max_value));
        match (lowest, picked.last_mut()) {
            (Some(i), Some(slot)) => *slot = i,
            _ => {
                return Err(StoreError::InsufficientData {
                    needed: needed_total + 1,
                    found: total,
                })
            }
        }
    }

    let mut random_part = Vec::with_capacity(picked.len());
    // Take out in descending index order so earlier indices stay valid.
    let mut order: Vec<(usize, usize)> = picked.iter().copied().enumerate().collect();
    order.sort_by(|a, b| b.1.cmp(&a.1));
    let mut taken: Vec<(usize, (TextSegment, ActivationRecord))> = order
        .into_iter()
        .map(|(pos, idx)| (pos, rest.swap_remove(idx)))
        .collect();
    taken.sort_by_key(|(pos, _)| *pos);
    random_part.extend(taken.into_iter().map(|(_, r)| r));

    Ok(ExemplarSet {
        neuron: neuron.clone(),
        hypothesis_set: hypothesis.into_iter().map(make).collect(),
        validation_set: top_validation
            .into_iter()
            .chain(random_part)
            .map(make)
            .collect(),
        neuron_max,
    })
}
