//! Serving reports: JSON with a version field, plus one CSV row per batch.
//!
//! Wall-clock quantities (`compute_s`, `queue_wait_s`, `latency_s`) come from
//! a monotone clock. Simulated transfer time is reported on its own
//! (`transfer_s`) and is realized as a sleep on the inference worker, so it is
//! also part of `latency_s` and of the run's wall time.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ServeMode {
    /// Trained predictor builds hash tables ahead of inference.
    Sida,
    /// Routers run inline and experts load on demand.
    Standard,
    /// The model's own routers build the hash tables.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Prefetch {
    /// Loads for layer ℓ+1 overlap the compute of layer ℓ.
    Layer,
    /// Every load of a batch completes before its first layer runs.
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSettings {
    /// `None` means the fast tier is unbounded.
    pub budget_bytes: Option<u64>,
    pub bandwidth_bytes_per_s: f64,
    pub per_transfer_latency_s: f64,
    pub eval_top_k: usize,
    pub queue_capacity: usize,
    pub prefetch: Prefetch,
    pub selection_overhead_s: f64,
    pub num_layers: usize,
    pub num_experts: usize,
    pub expert_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch_id: u64,
    pub samples: usize,
    pub tokens: usize,
    /// From dequeue request (or batch start) to logits.
    pub latency_s: f64,
    pub queue_wait_s: f64,
    /// Measured model compute, excluding sleeps.
    pub compute_s: f64,
    /// Measured router time plus injected selection overhead.
    pub selection_s: f64,
    /// Simulated transfer time left on the critical path.
    pub transfer_s: f64,
    /// Simulated time of every load this batch caused, hidden or not.
    pub transfer_total_s: f64,
    pub loads: usize,
    pub evictions: usize,
    pub resident_bytes: u64,
    pub utilization: f64,
    pub memory_reduction: f64,
    pub correct: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub batches: usize,
    pub samples: usize,
    pub tokens: usize,
    pub wall_time_s: f64,
    /// `samples / wall_time_s`.
    pub throughput: f64,
    pub mean_latency_s: f64,
    pub hash_hit_rate: Option<f64>,
    pub accuracy: Option<f64>,
    pub mean_utilization: f64,
    pub peak_fast_tier_bytes: u64,
    pub mean_memory_reduction: f64,
    /// Dequeues that found the queue empty.
    pub idle_waits: usize,
    pub total_compute_s: f64,
    pub total_transfer_s: f64,
    pub total_selection_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServingReport {
    pub schema_version: u32,
    pub mode: ServeMode,
    pub seed: u64,
    pub settings: ReportSettings,
    pub summary: ReportSummary,
    pub batches: Vec<BatchRecord>,
}

impl ServingReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        crate::formats::write_json(path, self)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for b in &self.batches {
            w.serialize(b)?;
        }
        w.flush().map_err(Error::io(path))
    }
}

/// Ratio of classification accuracies, `sida / reference`.
pub fn fidelity(sida: &ServingReport, reference: &ServingReport) -> Result<f64> {
    if sida.summary.samples != reference.summary.samples {
        return Err(Error::Pipeline(format!(
            "runs cover {} and {} samples",
            sida.summary.samples, reference.summary.samples
        )));
    }
    let (Some(a), Some(b)) = (sida.summary.accuracy, reference.summary.accuracy) else {
        return Err(Error::Pipeline("fidelity needs labeled batches in both runs".into()));
    };
    if b == 0.0 {
        return Err(Error::Pipeline("reference accuracy is zero".into()));
    }
    Ok(a / b)
}

/// JSON Schema of [`ServingReport`].
pub const REPORT_SCHEMA: &str = include_str!("../schemas/serving_report.schema.json");
