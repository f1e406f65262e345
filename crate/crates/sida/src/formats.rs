//! JSON layouts for corpora, activation traces and expert hash tables.
//!
//! A hash table is `{"batch_id": u64, "entries": [[layer, token, [[expert, alpha], …]], …]}`
//! with tokens numbered in flattened batch order. Entries may appear in any
//! order on input but must cover every `(layer, token)` exactly once.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sida_core::corpus::LabeledSequence;
use sida_core::model::{ActivationTrace, TraceEntry};
use sida_core::numkit::ProbVector;
use sida_core::predictor::ExpertHashTable;

use crate::{Error, Result};

type Selection = Vec<(usize, f64)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashTableJson {
    pub batch_id: u64,
    pub entries: Vec<(usize, usize, Selection)>,
}

impl From<&ExpertHashTable> for HashTableJson {
    fn from(t: &ExpertHashTable) -> Self {
        let entries = t
            .entries
            .iter()
            .enumerate()
            .flat_map(|(l, layer)| layer.iter().enumerate().map(move |(tok, sel)| (l, tok, sel.clone())))
            .collect();
        Self { batch_id: t.batch_id, entries }
    }
}

impl HashTableJson {
    /// Rebuilds the dense table. The layout does not carry `K`, so the caller
    /// supplies it from the model the table belongs to.
    pub fn into_table(self, num_experts: usize) -> Result<ExpertHashTable> {
        let layers = self.entries.iter().map(|e| e.0 + 1).max().unwrap_or(0);
        let tokens = self.entries.iter().map(|e| e.1 + 1).max().unwrap_or(0);
        let mut dense: Vec<Vec<Option<Selection>>> = vec![vec![None; tokens]; layers];
        for (l, t, sel) in self.entries {
            if dense[l][t].replace(sel).is_some() {
                return Err(Error::Config(format!("hash table lists ({l}, {t}) twice")));
            }
        }
        let mut entries = Vec::with_capacity(layers);
        for (l, layer) in dense.into_iter().enumerate() {
            let row = layer
                .into_iter()
                .enumerate()
                .map(|(t, e)| e.ok_or(sida_core::Error::MissingHashEntry { layer: l, token: t }))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            entries.push(row);
        }
        let table = ExpertHashTable { batch_id: self.batch_id, num_experts, entries };
        table.validate()?;
        Ok(table)
    }
}

pub fn hash_table_to_json(table: &ExpertHashTable) -> Result<String> {
    Ok(serde_json::to_string(&HashTableJson::from(table))?)
}

pub fn hash_table_from_json(json: &str, num_experts: usize) -> Result<ExpertHashTable> {
    serde_json::from_str::<HashTableJson>(json)?.into_table(num_experts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceJson {
    pub tokens: Vec<u32>,
    pub label: usize,
    pub latents: Vec<usize>,
}

impl From<&LabeledSequence> for SequenceJson {
    fn from(s: &LabeledSequence) -> Self {
        Self { tokens: s.tokens.clone(), label: s.label, latents: s.latents.clone() }
    }
}

impl From<SequenceJson> for LabeledSequence {
    fn from(s: SequenceJson) -> Self {
        Self { tokens: s.tokens, label: s.label, latents: s.latents }
    }
}

/// One JSON object per line.
pub fn write_corpus(path: &Path, corpus: &[LabeledSequence]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(Error::io(path))?);
    for s in corpus {
        serde_json::to_writer(&mut w, &SequenceJson::from(s))?;
        w.write_all(b"\n").map_err(Error::io(path))?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn read_corpus(path: &Path) -> Result<Vec<LabeledSequence>> {
    let r = BufReader::new(File::open(path).map_err(Error::io(path))?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line.map_err(Error::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str::<SequenceJson>(&line)?.into());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntryJson {
    pub layer: usize,
    pub token: usize,
    pub probs: Option<Vec<f64>>,
    pub selection: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceJson {
    pub batch_id: u64,
    pub num_experts: usize,
    pub entries: Vec<TraceEntryJson>,
}

impl TraceJson {
    pub fn new(batch_id: u64, trace: &ActivationTrace) -> Self {
        let entries = trace
            .layers
            .iter()
            .enumerate()
            .flat_map(|(layer, es)| {
                es.iter().enumerate().map(move |(token, e)| TraceEntryJson {
                    layer,
                    token,
                    probs: e.probs.as_ref().map(|p| p.as_slice().to_vec()),
                    selection: e.selection.clone(),
                })
            })
            .collect();
        Self { batch_id, num_experts: trace.num_experts, entries }
    }

    /// Entries must be listed layer-major, tokens ascending.
    pub fn into_trace(self) -> Result<ActivationTrace> {
        let mut layers: Vec<Vec<TraceEntry>> = Vec::new();
        for e in self.entries {
            if e.layer == layers.len() {
                layers.push(Vec::new());
            }
            let slot = layers.get_mut(e.layer).filter(|l| l.len() == e.token);
            let Some(slot) = slot else {
                return Err(Error::Config(format!("trace entry ({}, {}) out of order", e.layer, e.token)));
            };
            let probs = e.probs.map(ProbVector::new).transpose()?;
            slot.push(TraceEntry { probs, selection: e.selection });
        }
        Ok(ActivationTrace { num_experts: self.num_experts, layers })
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(Error::io(path))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(Error::io(path))?;
    w.flush().map_err(Error::io(path))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let r = BufReader::new(File::open(path).map_err(Error::io(path))?);
    Ok(serde_json::from_reader(r)?)
}
