// SPDX-License-Identifier: Apache-2.0

//! Activation dumps, neuron selection and exemplar sets.

pub mod dump;
pub mod exemplars;
pub mod highlight;

pub use dump::{
    encode_dump, parse_dump, read_dump, write_dump, ActivationDump, DumpError, DumpHeader,
    DumpRecord, DUMP_FORMAT,
};
pub use exemplars::{
    activation_frequency, build_exemplar_set, rank_neurons, select_neurons, Exemplar,
    ExemplarSet, ExemplarSizes, StoreError, FIRING_THRESHOLD,
};
pub use highlight::{highlighted_spans, render_highlighted, strip_highlights};
