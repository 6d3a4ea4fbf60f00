// SPDX-License-Identifier: Apache-2.0

//! Line-delimited `neuronscope-dump/1` activation files.
//!
//! Line 1 is a header object; every following line is one (segment, layer)
//! record carrying the tokenized text and, per neuron index, the raw
//! activation of each token.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

use crate::model::{ActivationRecord, NeuronRef, TextSegment};

pub const DUMP_FORMAT: &str = "neuronscope-dump/1";

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("unsupported dump format {0:?} (expected {DUMP_FORMAT:?})")]
    Version(String),
    #[error("cannot write dump: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpHeader {
    pub format: String,
    pub model_id: String,
    pub layers: Vec<u32>,
    pub tokenizer: String,
}

impl DumpHeader {
    pub fn new(model_id: impl Into<String>, layers: Vec<u32>, tokenizer: impl Into<String>) -> Self {
        Self {
            format: DUMP_FORMAT.to_string(),
            model_id: model_id.into(),
            layers,
            tokenizer: tokenizer.into(),
        }
    }
}

/// One (segment, layer) line of a dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpRecord {
    pub segment_id: String,
    pub text: String,
    pub tokens: Vec<String>,
    pub layer: u32,
    pub acts: BTreeMap<u32, Vec<f64>>,
}

impl DumpRecord {
    pub fn segment(&self) -> TextSegment {
        TextSegment {
            segment_id: self.segment_id.clone(),
            text: self.text.clone(),
            tokens: self.tokens.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDump {
    pub header: DumpHeader,
    pub records: Vec<DumpRecord>,
}

impl ActivationDump {
    pub fn new(header: DumpHeader) -> Self {
        Self {
            header,
            records: Vec::new(),
        }
    }

    pub fn has_layer(&self, layer: u32) -> bool {
        self.header.layers.contains(&layer)
    }

    /// Sorted distinct neuron indices observed in `layer`.
    pub fn neurons_in_layer(&self, layer: u32) -> Vec<u32> {
        let mut set: Vec<u32> = self
            .records
            .iter()
            .filter(|r| r.layer == layer)
            .flat_map(|r| r.acts.keys().copied())
            .collect();
        set.sort_unstable();
        set.dedup();
        set
    }

    /// Every segment on which `neuron` was recorded, in file order.
    pub fn records_for(&self, neuron: &NeuronRef) -> Vec<(TextSegment, ActivationRecord)> {
        self.records
            .iter()
            .filter(|r| r.layer == neuron.layer)
            .filter_map(|r| {
                let acts = r.acts.get(&neuron.index)?;
                let rec = ActivationRecord::new(neuron.clone(), r.segment_id.clone(), acts.clone())
                    .ok()?;
                Some((r.segment(), rec))
            })
            .collect()
    }

    pub fn neuron_ref(&self, layer: u32, index: u32) -> NeuronRef {
        NeuronRef::new(self.header.model_id.clone(), layer, index)
    }
}

fn validate_record(
    rec: &DumpRecord,
    header: &DumpHeader,
    seen: &mut HashSet<(String, u32)>,
) -> Result<(), String> {
    if rec.tokens.is_empty() {
        return Err(format!("segment {:?} has no tokens", rec.segment_id));
    }
    if !header.layers.contains(&rec.layer) {
        return Err(format!("layer {} is not declared in the header", rec.layer));
    }
    for (idx, acts) in &rec.acts {
        if acts.len() != rec.tokens.len() {
            return Err(format!(
                "neuron {idx} has {} activations for {} tokens",
                acts.len(),
                rec.tokens.len()
            ));
        }
        if acts.iter().any(|v| !v.is_finite()) {
            return Err(format!("neuron {idx} has a non-finite activation"));
        }
    }
    if !seen.insert((rec.segment_id.clone(), rec.layer)) {
        return Err(format!(
            "duplicate segment_id {:?} for layer {}",
            rec.segment_id, rec.layer
        ));
    }
    Ok(())
}

/// Parses a dump from any buffered reader.
pub fn parse_dump<R: BufRead>(reader: R) -> Result<ActivationDump, DumpError> {
    let mut lines = reader.lines().enumerate();
    let header = loop {
        match lines.next() {
            None => {
                return Err(DumpError::Format {
                    line: 1,
                    message: "missing header line".into(),
                })
            }
            Some((i, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let value: serde_json::Value =
                    serde_json::from_str(&line).map_err(|e| DumpError::Format {
                        line: i + 1,
                        message: format!("malformed header: {e}"),
                    })?;
                match value.get("format").and_then(|f| f.as_str()) {
                    Some(DUMP_FORMAT) => {}
                    Some(other) => return Err(DumpError::Version(other.to_string())),
                    None => return Err(DumpError::Version(String::new())),
                }
                let header: DumpHeader =
                    serde_json::from_value(value).map_err(|e| DumpError::Format {
                        line: i + 1,
                        message: format!("malformed header: {e}"),
                    })?;
                break header;
            }
        }
    };

    let mut dump = ActivationDump::new(header);
    let mut seen = HashSet::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DumpRecord = serde_json::from_str(&line).map_err(|e| DumpError::Format {
            line: i + 1,
            message: e.to_string(),
        })?;
        validate_record(&rec, &dump.header, &mut seen).map_err(|message| DumpError::Format {
            line: i + 1,
            message,
        })?;
        dump.records.push(rec);
    }
    Ok(dump)
}

pub fn read_dump(path: impl AsRef<Path>) -> Result<ActivationDump, DumpError> {
    parse_dump(BufReader::new(File::open(path)?))
}

/// Serializes a dump; the output is byte-stable for equal inputs.
pub fn encode_dump<W: Write>(dump: &ActivationDump, mut out: W) -> Result<(), DumpError> {
    if dump.header.format != DUMP_FORMAT {
        return Err(DumpError::Version(dump.header.format.clone()));
    }
    let mut seen = HashSet::new();
    serde_json::to_writer(&mut out, &dump.header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for rec in &dump.records {
        validate_record(rec, &dump.header, &mut seen).map_err(DumpError::Invalid)?;
        serde_json::to_writer(&mut out, rec).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_dump(dump: &ActivationDump, path: impl AsRef<Path>) -> Result<(), DumpError> {
    let file = File::create(path)?;
    encode_dump(dump, BufWriter::new(file))
}
