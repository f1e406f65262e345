use alloc::vec::Vec;

use super::PredictorNet;
use crate::error::ensure;
use crate::model::{ActivationTrace, ExpertSelections, MoEModel, Routing, SequenceBatch};
use crate::numkit::{softmax_in_place, topk};
use crate::Result;

/// Predicted `(expert, α)` lists for every `(layer, token)` of one batch.
///
/// Tokens are numbered in flattened batch order. Each entry is sorted by α
/// descending, lower expert id first on ties.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertHashTable {
    pub batch_id: u64,
    pub num_experts: usize,
    /// `entries[layer][token]`.
    pub entries: Vec<Vec<Vec<(usize, f64)>>>,
}

impl ExpertHashTable {
    pub fn num_layers(&self) -> usize {
        self.entries.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.entries.first().map_or(0, Vec::len)
    }

    /// Distinct experts needed per layer, ascending.
    pub fn required_experts(&self) -> Vec<Vec<usize>> {
        self.entries
            .iter()
            .map(|layer| {
                let set: alloc::collections::BTreeSet<usize> =
                    layer.iter().flat_map(|e| e.iter().map(|&(i, _)| i)).collect();
                set.into_iter().collect()
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (l, layer) in self.entries.iter().enumerate() {
            ensure(layer.len() == self.num_tokens(), || alloc::format!("layer {l} has a ragged token count"))?;
            for (t, e) in layer.iter().enumerate() {
                ensure(!e.is_empty(), || alloc::format!("entry ({l}, {t}) is empty"))?;
                for (j, &(i, a)) in e.iter().enumerate() {
                    ensure(i < self.num_experts, || alloc::format!("expert {i} out of range at ({l}, {t})"))?;
                    ensure(a.is_finite() && a >= 0.0, || alloc::format!("bad alpha at ({l}, {t})"))?;
                    ensure(e[..j].iter().all(|&(o, _)| o != i), || {
                        alloc::format!("duplicate expert {i} at ({l}, {t})")
                    })?;
                }
            }
        }
        Ok(())
    }
}

impl ExpertSelections for ExpertHashTable {
    fn selection(&self, layer: usize, token: usize) -> Option<&[(usize, f64)]> {
        self.entries.get(layer)?.get(token).map(Vec::as_slice)
    }
}

/// Runs the predictor over every sequence of `batch` and keeps the top
/// `eval_top_k` experts per `(layer, token)` with their softmax values as α.
///
/// `model` is consulted only for its input embedding tables.
pub fn build_hash_table(
    predictor: &PredictorNet,
    model: &MoEModel,
    batch: &SequenceBatch,
    eval_top_k: usize,
) -> Result<ExpertHashTable> {
    let k = predictor.num_experts();
    ensure(eval_top_k >= 1 && eval_top_k <= k, || alloc::format!("eval_top_k must lie in 1..={k}"))?;
    let mut entries: Vec<Vec<Vec<(usize, f64)>>> =
        (0..predictor.num_layers()).map(|_| Vec::with_capacity(batch.num_tokens())).collect();
    for seq in &batch.sequences {
        let emb = model.embed(seq)?;
        let out = predictor.forward(&emb)?;
        for (layer, logits) in out.logits.iter().enumerate() {
            for t in 0..logits.rows() {
                let mut p = logits.row(t).to_vec();
                softmax_in_place(&mut p);
                let ids = topk(&p, eval_top_k)?;
                entries[layer].push(ids.into_iter().map(|i| (i, p[i])).collect());
            }
        }
    }
    Ok(ExpertHashTable { batch_id: batch.batch_id, num_experts: k, entries })
}

/// Hash table produced by the model's own routers (the upper-bound predictor).
pub fn oracle_hash_table(model: &MoEModel, batch: &SequenceBatch) -> Result<ExpertHashTable> {
    let out = model.forward(batch, Routing::Router)?;
    Ok(ExpertHashTable {
        batch_id: batch.batch_id,
        num_experts: model.config().num_experts,
        entries: out
            .trace
            .layers
            .into_iter()
            .map(|layer| layer.into_iter().map(|e| e.selection).collect())
            .collect(),
    })
}

/// Fraction of `(layer, token)` positions whose teacher top-1 expert appears
/// among the first `k` predicted experts.
pub fn hash_hit_rate(tables: &[ExpertHashTable], traces: &[ActivationTrace], k: usize) -> Result<f64> {
    ensure(k >= 1, || "k must be at least 1".into())?;
    ensure(tables.len() == traces.len() && !tables.is_empty(), || {
        alloc::format!("{} tables for {} traces", tables.len(), traces.len())
    })?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for (table, trace) in tables.iter().zip(traces) {
        ensure(table.num_layers() == trace.num_layers() && table.num_tokens() == trace.num_tokens(), || {
            alloc::format!("table for batch {} does not cover its trace", table.batch_id)
        })?;
        for (tl, rl) in table.entries.iter().zip(&trace.layers) {
            for (pred, truth) in tl.iter().zip(rl) {
                let target = truth.top1();
                if pred.iter().take(k).any(|&(i, _)| i == target) {
                    hits += 1;
                }
                total += 1;
            }
        }
    }
    ensure(total > 0, || "no positions to score".into())?;
    Ok(hits as f64 / total as f64)
}
