//! The benchmark grid: every configured expert count is trained once, then
//! served in each mode at each budget. A failing stage is recorded in the
//! bundle's `errors` list and the remaining stages still run.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sida_core::corpus::{into_batches, LabeledSequence};
use sida_core::model::{MoEModel, SequenceBatch};
use sida_core::offload::memory_reduction;
use sida_core::predictor::{build_hash_table, PredictorNet};

use crate::config::{fraction_of_experts, Config};
use crate::overhead::selection_overhead_probe;
use crate::pipeline::{serve, ServeOptions};
use crate::report::{ServeMode, ServingReport};
use crate::workflow::{fixed_length_corpus, train_student, train_teacher, PreparedCorpus};
use crate::{Error, Result};

pub const BUNDLE_SCHEMA_VERSION: u32 = 1;

/// JSON Schema the bundle is published against.
pub const BUNDLE_SCHEMA: &str = include_str!("../schemas/bench_bundle.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub num_experts: usize,
    pub expert_bytes: u64,
    pub total_expert_bytes: u64,
    pub teacher_train_accuracy: f64,
    pub predictor_heldout_top1: f64,
    pub predictor_heldout_top3: f64,
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub num_experts: usize,
    pub mode: ServeMode,
    pub budget_fraction: f64,
    pub budget_bytes: u64,
    pub samples: usize,
    pub throughput: f64,
    pub mean_latency_s: f64,
    pub compute_s: f64,
    pub transfer_s: f64,
    pub selection_s: f64,
    pub queue_wait_s: f64,
    pub hash_hit_rate: Option<f64>,
    pub accuracy: Option<f64>,
    /// Accuracy relative to `standard` at the same expert count and budget.
    pub fidelity: Option<f64>,
    pub mean_utilization: f64,
    pub peak_fast_tier_bytes: u64,
    pub mean_memory_reduction: f64,
}

impl CellRow {
    fn new(num_experts: usize, fraction: f64, budget: u64, r: &ServingReport) -> Self {
        let s = &r.summary;
        Self {
            num_experts,
            mode: r.mode,
            budget_fraction: fraction,
            budget_bytes: budget,
            samples: s.samples,
            throughput: s.throughput,
            mean_latency_s: s.mean_latency_s,
            compute_s: s.total_compute_s,
            transfer_s: s.total_transfer_s,
            selection_s: s.total_selection_s,
            queue_wait_s: r.batches.iter().map(|b| b.queue_wait_s).sum(),
            hash_hit_rate: s.hash_hit_rate,
            accuracy: s.accuracy,
            fidelity: None,
            mean_utilization: s.mean_utilization,
            peak_fast_tier_bytes: s.peak_fast_tier_bytes,
            mean_memory_reduction: s.mean_memory_reduction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadRow {
    pub num_experts: usize,
    pub total_s: f64,
    pub selection_s: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionRow {
    pub num_experts: usize,
    pub length: usize,
    pub samples: usize,
    pub mean_reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageError {
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchBundle {
    pub schema_version: u32,
    pub seed: u64,
    /// False when any stage failed; see `errors`.
    pub complete: bool,
    pub wall_time_s: f64,
    pub config: Config,
    pub models: Vec<ModelRow>,
    /// Throughput versus budget and the latency breakdown, one row per run.
    pub cells: Vec<CellRow>,
    pub overhead: Vec<OverheadRow>,
    pub reduction_vs_length: Vec<ReductionRow>,
    pub errors: Vec<StageError>,
}

struct Trained {
    model: MoEModel,
    predictor: PredictorNet,
}

fn train_stage(config: &Config, corpus: &PreparedCorpus, k: usize) -> Result<(Trained, ModelRow)> {
    let start = Instant::now();
    let (model, report) = train_teacher(config, k, corpus.train())?;
    let (predictor, pred) = train_student(config, &model, corpus.train(), corpus.heldout())?;
    let row = ModelRow {
        num_experts: k,
        expert_bytes: model.config().expert_bytes(),
        total_expert_bytes: model.config().total_expert_bytes(),
        teacher_train_accuracy: report.train_accuracy,
        predictor_heldout_top1: pred.heldout_top1,
        predictor_heldout_top3: pred.heldout_top3,
        train_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((Trained { model, predictor }, row))
}

/// Mean predicted-table reduction over fixed-length single-sequence batches.
pub fn mean_reduction(model: &MoEModel, predictor: &PredictorNet, seqs: &[LabeledSequence], top_k: usize) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::Config("no sequences in length bucket".into()));
    }
    let mut total = 0.0;
    for (i, s) in seqs.iter().enumerate() {
        let batch = SequenceBatch::new(i as u64, vec![s.tokens.clone()], None);
        total += memory_reduction(&build_hash_table(predictor, model, &batch, top_k)?, model.config())?;
    }
    Ok(total / seqs.len() as f64)
}

fn record<T>(errors: &mut Vec<StageError>, stage: String, r: Result<T>) -> Option<T> {
    match r {
        Ok(v) => Some(v),
        Err(e) => {
            errors.push(StageError { stage, message: e.to_string() });
            None
        }
    }
}

/// Runs the whole grid described by `config`.
pub fn run_benchmark(config: &Config) -> BenchBundle {
    let start = Instant::now();
    let mut errors = Vec::new();
    let (mut models, mut cells, mut overhead, mut reductions) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let corpus = record(&mut errors, "corpus".into(), PreparedCorpus::generate(config));
    if let Some(corpus) = &corpus {
        let stream: Vec<SequenceBatch> = into_batches(
            &corpus.heldout()[..config.bench.samples.min(corpus.heldout().len())],
            config.serve.batch_size,
            0,
        );
        for &k in &config.bench.experts {
            let Some((t, row)) = record(&mut errors, format!("train K={k}"), train_stage(config, corpus, k)) else {
                continue;
            };
            models.push(row);
            if let Some(first) = stream.first() {
                let probe = selection_overhead_probe(&t.model, first, config.bench.overhead_repetitions.max(1));
                if let Some(o) = record(&mut errors, format!("overhead K={k}"), probe) {
                    overhead.push(OverheadRow {
                        num_experts: k,
                        total_s: o.total_s,
                        selection_s: o.selection_s,
                        fraction: o.fraction(),
                    });
                }
            }
            cells.extend(serve_grid(config, &t, &stream, k, &mut errors));
            for (j, &len) in config.bench.length_buckets.iter().enumerate() {
                let r = fixed_length_corpus(config, len, config.bench.bucket_samples, 0x6c65_6e00 + j as u64)
                    .and_then(|seqs| mean_reduction(&t.model, &t.predictor, &seqs, config.serve.eval_top_k));
                if let Some(mean) = record(&mut errors, format!("reduction K={k} L={len}"), r) {
                    reductions.push(ReductionRow {
                        num_experts: k,
                        length: len,
                        samples: config.bench.bucket_samples,
                        mean_reduction: mean,
                    });
                }
            }
        }
    }
    BenchBundle {
        schema_version: BUNDLE_SCHEMA_VERSION,
        seed: config.seed,
        complete: errors.is_empty(),
        wall_time_s: start.elapsed().as_secs_f64(),
        config: config.clone(),
        models,
        cells,
        overhead,
        reduction_vs_length: reductions,
        errors,
    }
}

fn serve_grid(
    config: &Config,
    t: &Trained,
    stream: &[SequenceBatch],
    k: usize,
    errors: &mut Vec<StageError>,
) -> Vec<CellRow> {
    let mut cells = Vec::new();
    for &fraction in &config.bench.budget_fractions {
        let mut standard_acc = None;
        let row_start = cells.len();
        for &mode in &config.bench.modes {
            let stage = format!("serve K={k} mode={mode:?} budget={fraction}");
            let run = fraction_of_experts(t.model.config(), fraction).and_then(|bytes| {
                let mut opts: ServeOptions = config.serve_options(t.model.config())?;
                opts.budget.fast_tier_bytes = bytes;
                let run = serve(mode, &t.model, Some(&t.predictor), stream, &opts)?;
                Ok((bytes, run))
            });
            if let Some((bytes, run)) = record(errors, stage, run) {
                if mode == ServeMode::Standard {
                    standard_acc = Some(run.report.summary.accuracy);
                }
                cells.push(CellRow::new(k, fraction, bytes, &run.report));
            }
        }
        if let Some(Some(reference)) = standard_acc.filter(|a| a.is_some_and(|a| a > 0.0)) {
            for c in &mut cells[row_start..] {
                c.fidelity = c.accuracy.map(|a| a / reference);
            }
        }
    }
    cells
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(Error::io(path))
}

impl BenchBundle {
    /// `bundle.json` plus one CSV per table in `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        crate::formats::write_json(&dir.join("bundle.json"), self)?;
        write_rows(&dir.join("models.csv"), &self.models)?;
        write_rows(&dir.join("cells.csv"), &self.cells)?;
        write_rows(&dir.join("overhead.csv"), &self.overhead)?;
        write_rows(&dir.join("reduction_vs_length.csv"), &self.reduction_vs_length)?;
        write_rows(&dir.join("errors.csv"), &self.errors)
    }
}
