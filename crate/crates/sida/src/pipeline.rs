//! Serving loops.
//!
//! In `sida` and `oracle` mode a hash-building worker turns each batch into an
//! [`ExpertHashTable`] and pushes it onto a bounded queue. The inference
//! worker pops tables in batch order, plans residency for the batch, and runs
//! the model layer by layer with routers idle. Loads for layer ℓ+1 are charged
//! against the measured compute of layer ℓ; whatever is left over sits on the
//! critical path. In `standard` mode a single worker runs the routers inline
//! and loads experts after each router output.
//!
//! Simulated transfer time and injected selection overhead are realized by
//! sleeping on the inference worker once per batch, which leaves the CPU to
//! the hash builder exactly when a real accelerator would be waiting on a
//! copy.

use std::collections::BTreeSet;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, SyncSender, TryRecvError};
use std::time::{Duration, Instant};

use sida_core::model::{MoEModel, Routing, SequenceBatch, TraceEntry};
use sida_core::numkit::argmax;
use sida_core::offload::{
    effective_utilization, memory_reduction, plan_placement, plan_required, ExpertKey, MemoryBudget,
    PlacementPlan, ResidencyState,
};
use sida_core::predictor::{build_hash_table, hash_hit_rate, oracle_hash_table, ExpertHashTable, PredictorNet};

use crate::report::{
    BatchRecord, Prefetch, ReportSettings, ReportSummary, ServeMode, ServingReport, REPORT_SCHEMA_VERSION,
};
use crate::{Error, Result};

pub const DEFAULT_QUEUE_CAPACITY: usize = 8;
pub const DEFAULT_DEQUEUE_TIMEOUT: Duration = Duration::from_secs(60);

struct Queued {
    seq: u64,
    table: ExpertHashTable,
}

/// Producer half of the hash-table queue.
pub struct HashTableSender {
    tx: SyncSender<Queued>,
    seq: u64,
    last_batch: Option<u64>,
}

/// Consumer half of the hash-table queue.
pub struct HashTableReceiver {
    rx: Receiver<Queued>,
    seq: u64,
    last_batch: Option<u64>,
}

/// Bounded FIFO of hash tables. Both ends check that batch ids strictly
/// increase and the receiver checks that nothing was reordered or dropped.
pub fn hash_table_queue(capacity: usize) -> Result<(HashTableSender, HashTableReceiver)> {
    if capacity == 0 {
        return Err(Error::QueueCapacity);
    }
    let (tx, rx) = mpsc::sync_channel(capacity);
    Ok((HashTableSender { tx, seq: 0, last_batch: None }, HashTableReceiver { rx, seq: 0, last_batch: None }))
}

fn check_order(last: &mut Option<u64>, batch_id: u64) -> Result<()> {
    if let Some(prev) = *last {
        if batch_id <= prev {
            return Err(Error::Pipeline(format!("batch {batch_id} arrived after batch {prev}")));
        }
    }
    *last = Some(batch_id);
    Ok(())
}

impl HashTableSender {
    /// Blocks while the queue is full.
    pub fn push(&mut self, table: ExpertHashTable) -> Result<()> {
        check_order(&mut self.last_batch, table.batch_id)?;
        self.tx.send(Queued { seq: self.seq, table }).map_err(|_| Error::QueueClosed)?;
        self.seq += 1;
        Ok(())
    }
}

impl HashTableReceiver {
    fn accept(&mut self, q: Queued) -> Result<ExpertHashTable> {
        if q.seq != self.seq {
            return Err(Error::Pipeline(format!("dequeued item {} where {} was due", q.seq, self.seq)));
        }
        check_order(&mut self.last_batch, q.table.batch_id)?;
        self.seq += 1;
        Ok(q.table)
    }

    /// `None` when nothing is queued yet.
    pub fn try_pop(&mut self) -> Result<Option<ExpertHashTable>> {
        match self.rx.try_recv() {
            Ok(q) => self.accept(q).map(Some),
            Err(TryRecvError::Empty) => Ok(None),
            Err(TryRecvError::Disconnected) => Err(Error::QueueClosed),
        }
    }

    pub fn pop(&mut self, timeout: Duration) -> Result<ExpertHashTable> {
        match self.rx.recv_timeout(timeout) {
            Ok(q) => self.accept(q),
            Err(RecvTimeoutError::Timeout) => {
                Err(Error::Pipeline(format!("no hash table within {:.3} s", timeout.as_secs_f64())))
            }
            Err(RecvTimeoutError::Disconnected) => Err(Error::QueueClosed),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServeOptions {
    pub budget: MemoryBudget,
    /// Experts kept per `(layer, token)` from the predictor.
    pub eval_top_k: usize,
    pub queue_capacity: usize,
    pub prefetch: Prefetch,
    /// Sleep added per router call (one per layer per batch) in standard mode.
    pub selection_overhead: Duration,
    pub dequeue_timeout: Duration,
    /// Recorded in the report.
    pub seed: u64,
}

impl ServeOptions {
    pub fn new(budget: MemoryBudget) -> Self {
        Self {
            budget,
            eval_top_k: 1,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            prefetch: Prefetch::Layer,
            selection_overhead: Duration::ZERO,
            dequeue_timeout: DEFAULT_DEQUEUE_TIMEOUT,
            seed: 0,
        }
    }

    /// A fast tier large enough for every expert.
    pub fn unlimited() -> Self {
        Self::new(MemoryBudget::new(u64::MAX))
    }
}

/// Everything a serving run produced.
#[derive(Debug, Clone)]
pub struct ServingRun {
    pub report: ServingReport,
    /// `logits[batch][sequence]`.
    pub logits: Vec<Vec<Vec<f64>>>,
    /// Expert selections that drove each batch: the hash tables in `sida`
    /// and `oracle` mode, the routers' choices in `standard` mode.
    pub selections: Vec<ExpertHashTable>,
}

impl ServingRun {
    pub fn predictions(&self) -> Vec<Vec<usize>> {
        self.logits.iter().map(|b| b.iter().map(|l| argmax(l)).collect()).collect()
    }
}

/// Fast-tier state owned by the inference worker.
struct Residency {
    state: ResidencyState,
    budget: MemoryBudget,
    expert_bytes: u64,
    peak: u64,
}

impl Residency {
    fn apply(&mut self, plan: &PlacementPlan) -> Result<()> {
        self.state.apply(plan)?;
        self.peak = self.peak.max(self.state.used_bytes());
        Ok(())
    }

    fn check_resident(&self, layer: usize, entries: &[TraceEntry]) -> Result<()> {
        for e in entries {
            for &(expert, _) in &e.selection {
                if !self.state.contains((layer, expert)) {
                    return Err(Error::Pipeline(format!("expert ({layer}, {expert}) evaluated while offloaded")));
                }
            }
        }
        Ok(())
    }

    /// Share of resident bytes that belong to experts the batch used.
    fn utilization(&self, activated: &BTreeSet<ExpertKey>) -> Result<f64> {
        let present: BTreeSet<ExpertKey> = activated.iter().copied().filter(|&k| self.state.contains(k)).collect();
        Ok(effective_utilization(&self.state, &present)?)
    }
}

fn activated(table: &ExpertHashTable) -> BTreeSet<ExpertKey> {
    table
        .required_experts()
        .into_iter()
        .enumerate()
        .flat_map(|(l, es)| es.into_iter().map(move |e| (l, e)))
        .collect()
}

fn correct(batch: &SequenceBatch, logits: &[Vec<f64>]) -> Option<usize> {
    batch.labels.as_ref().map(|labels| logits.iter().zip(labels).filter(|(l, &y)| argmax(l) == y).count())
}

fn sleep_s(secs: f64) {
    if secs > 0.0 {
        std::thread::sleep(Duration::from_secs_f64(secs));
    }
}

struct BatchOutcome {
    record: BatchRecord,
    logits: Vec<Vec<f64>>,
}

/// Runs one batch with routers idle, following `table`.
fn infer_external(
    model: &MoEModel,
    batch: &SequenceBatch,
    table: &ExpertHashTable,
    res: &mut Residency,
    prefetch: Prefetch,
) -> Result<BatchOutcome> {
    let plan = plan_placement(table, &res.state, &res.budget, res.expert_bytes)?;
    let layers = model.config().num_layers;
    let mut compute = Duration::ZERO;
    res.apply(&plan.phase(0))?;
    let mut exposed = match prefetch {
        Prefetch::Layer => plan.phase_transfer_s[0],
        Prefetch::Batch => plan.estimated_transfer_s,
    };
    let mut state = model.begin(batch)?;
    for layer in 0..layers {
        let t = Instant::now();
        let mixed = model.mix_next(&state)?;
        let entries = model.select_layer(&mixed, &state, Routing::External(table))?;
        res.check_resident(layer, &entries)?;
        model.apply_layer(&mut state, mixed, &entries, None)?;
        let spent = t.elapsed();
        compute += spent;
        if layer + 1 < layers {
            res.apply(&plan.phase(layer + 1))?;
            if prefetch == Prefetch::Layer {
                exposed += (plan.phase_transfer_s[layer + 1] - spent.as_secs_f64()).max(0.0);
            }
        }
    }
    let t = Instant::now();
    let logits = model.finish(&state)?;
    compute += t.elapsed();
    sleep_s(exposed);
    let record = BatchRecord {
        batch_id: batch.batch_id,
        samples: batch.sequences.len(),
        tokens: batch.num_tokens(),
        latency_s: 0.0,
        queue_wait_s: 0.0,
        compute_s: compute.as_secs_f64(),
        selection_s: 0.0,
        transfer_s: exposed,
        transfer_total_s: plan.estimated_transfer_s,
        loads: plan.loads().len(),
        evictions: plan.evictions().len(),
        resident_bytes: res.state.used_bytes(),
        utilization: res.utilization(&activated(table))?,
        memory_reduction: memory_reduction(table, model.config())?,
        correct: correct(batch, &logits),
    };
    Ok(BatchOutcome { record, logits })
}

/// Runs one batch with its routers, loading experts after each router call.
fn infer_standard(
    model: &MoEModel,
    batch: &SequenceBatch,
    res: &mut Residency,
    overhead: Duration,
) -> Result<(BatchOutcome, ExpertHashTable)> {
    let start = Instant::now();
    let layers = model.config().num_layers;
    let mut compute = Duration::ZERO;
    let mut routing = Duration::ZERO;
    let (mut transfer, mut loads, mut evictions) = (0.0, 0, 0);
    let mut chosen = Vec::with_capacity(layers);
    let mut state = model.begin(batch)?;
    for layer in 0..layers {
        let t = Instant::now();
        let mixed = model.mix_next(&state)?;
        let r = Instant::now();
        let entries = model.select_layer(&mixed, &state, Routing::Router)?;
        routing += r.elapsed();
        let mut required = vec![Vec::new(); layer + 1];
        required[layer] =
            entries.iter().flat_map(|e| e.selection.iter().map(|&(i, _)| i)).collect::<BTreeSet<_>>().into_iter().collect();
        let plan = plan_required(&required, &res.state, &res.budget, res.expert_bytes)?;
        res.apply(&plan)?;
        transfer += plan.estimated_transfer_s;
        loads += plan.loads().len();
        evictions += plan.evictions().len();
        res.check_resident(layer, &entries)?;
        model.apply_layer(&mut state, mixed, &entries, None)?;
        compute += t.elapsed();
        chosen.push(entries.into_iter().map(|e| e.selection).collect::<Vec<_>>());
    }
    let t = Instant::now();
    let logits = model.finish(&state)?;
    compute += t.elapsed();
    let injected = overhead.as_secs_f64() * layers as f64;
    sleep_s(transfer + injected);
    let table = ExpertHashTable { batch_id: batch.batch_id, num_experts: model.config().num_experts, entries: chosen };
    let record = BatchRecord {
        batch_id: batch.batch_id,
        samples: batch.sequences.len(),
        tokens: batch.num_tokens(),
        latency_s: start.elapsed().as_secs_f64(),
        queue_wait_s: 0.0,
        compute_s: compute.as_secs_f64(),
        selection_s: routing.as_secs_f64() + injected,
        transfer_s: transfer,
        transfer_total_s: transfer,
        loads,
        evictions,
        resident_bytes: res.state.used_bytes(),
        utilization: res.utilization(&activated(&table))?,
        memory_reduction: memory_reduction(&table, model.config())?,
        correct: correct(batch, &logits),
    };
    Ok((BatchOutcome { record, logits }, table))
}

fn check_stream(model: &MoEModel, batches: &[SequenceBatch], opts: &ServeOptions) -> Result<()> {
    if batches.is_empty() {
        return Err(Error::Pipeline("no batches to serve".into()));
    }
    opts.budget.validate()?;
    let mut last = None;
    for b in batches {
        check_order(&mut last, b.batch_id)?;
        b.validate(model.config())?;
    }
    Ok(())
}

fn residency(model: &MoEModel, opts: &ServeOptions) -> Residency {
    Residency {
        state: ResidencyState::new(),
        budget: opts.budget,
        expert_bytes: model.config().expert_bytes(),
        peak: 0,
    }
}

fn settings(model: &MoEModel, opts: &ServeOptions) -> ReportSettings {
    let b = opts.budget.fast_tier_bytes;
    ReportSettings {
        budget_bytes: (b != u64::MAX).then_some(b),
        bandwidth_bytes_per_s: opts.budget.bandwidth_bytes_per_s,
        per_transfer_latency_s: opts.budget.per_transfer_latency_s,
        eval_top_k: opts.eval_top_k,
        queue_capacity: opts.queue_capacity,
        prefetch: opts.prefetch,
        selection_overhead_s: opts.selection_overhead.as_secs_f64(),
        num_layers: model.config().num_layers,
        num_experts: model.config().num_experts,
        expert_bytes: model.config().expert_bytes(),
    }
}

fn summarize(batches: &[BatchRecord], wall: f64, peak: u64, idle_waits: usize, hit: Option<f64>) -> ReportSummary {
    let n = batches.len() as f64;
    let samples: usize = batches.iter().map(|b| b.samples).sum();
    let accuracy = batches
        .iter()
        .map(|b| b.correct)
        .sum::<Option<usize>>()
        .map(|c| c as f64 / samples as f64);
    ReportSummary {
        batches: batches.len(),
        samples,
        tokens: batches.iter().map(|b| b.tokens).sum(),
        wall_time_s: wall,
        throughput: samples as f64 / wall,
        mean_latency_s: batches.iter().map(|b| b.latency_s).sum::<f64>() / n,
        hash_hit_rate: hit,
        accuracy,
        mean_utilization: batches.iter().map(|b| b.utilization).sum::<f64>() / n,
        peak_fast_tier_bytes: peak,
        mean_memory_reduction: batches.iter().map(|b| b.memory_reduction).sum::<f64>() / n,
        idle_waits,
        total_compute_s: batches.iter().map(|b| b.compute_s).sum(),
        total_transfer_s: batches.iter().map(|b| b.transfer_s).sum(),
        total_selection_s: batches.iter().map(|b| b.selection_s).sum(),
    }
}

/// Two workers joined by the hash-table queue; `build` runs on the hash builder.
fn serve_pipelined<F>(
    model: &MoEModel,
    batches: &[SequenceBatch],
    opts: &ServeOptions,
    mode: ServeMode,
    build: F,
) -> Result<ServingRun>
where
    F: Fn(&SequenceBatch) -> Result<ExpertHashTable> + Sync,
{
    check_stream(model, batches, opts)?;
    let (mut tx, mut rx) = hash_table_queue(opts.queue_capacity)?;
    let (ready_tx, ready_rx) = mpsc::channel::<()>();
    let start = Instant::now();
    let (built, served) = std::thread::scope(|s| {
        let inference = s.spawn(move || -> Result<(Vec<BatchOutcome>, Vec<ExpertHashTable>, u64, usize)> {
            let mut res = residency(model, opts);
            let mut outcomes = Vec::with_capacity(batches.len());
            let mut tables = Vec::with_capacity(batches.len());
            let mut idle = 0;
            for batch in batches {
                let t = Instant::now();
                let table = match rx.try_pop()? {
                    Some(table) => table,
                    None => {
                        idle += 1;
                        let _ = ready_tx.send(());
                        rx.pop(opts.dequeue_timeout)?
                    }
                };
                if table.batch_id != batch.batch_id {
                    return Err(Error::Pipeline(format!(
                        "hash table for batch {} arrived for batch {}",
                        table.batch_id, batch.batch_id
                    )));
                }
                let wait = t.elapsed().as_secs_f64();
                let mut out = infer_external(model, batch, &table, &mut res, opts.prefetch)?;
                out.record.queue_wait_s = wait;
                out.record.latency_s = t.elapsed().as_secs_f64();
                outcomes.push(out);
                tables.push(table);
            }
            Ok((outcomes, tables, res.peak, idle))
        });
        // the hash builder starts only once inference is already waiting
        let _ = ready_rx.recv();
        let build = &build;
        let builder = s.spawn(move || -> Result<()> {
            for batch in batches {
                match tx.push(build(batch)?) {
                    Err(Error::QueueClosed) => return Ok(()),
                    other => other?,
                }
            }
            Ok(())
        });
        (join(builder), join(inference))
    });
    let wall = start.elapsed().as_secs_f64();
    built?;
    let (outcomes, tables, peak, idle) = served?;
    let traces = batches
        .iter()
        .map(|b| Ok(model.forward(b, Routing::Router)?.trace))
        .collect::<Result<Vec<_>>>()?;
    let hit = hash_hit_rate(&tables, &traces, opts.eval_top_k)?;
    Ok(finish_run(model, opts, mode, outcomes, tables, wall, peak, idle, Some(hit)))
}

fn join<T>(h: std::thread::ScopedJoinHandle<'_, Result<T>>) -> Result<T> {
    h.join().map_err(|_| Error::Pipeline("worker panicked".into()))?
}

#[allow(clippy::too_many_arguments)]
fn finish_run(
    model: &MoEModel,
    opts: &ServeOptions,
    mode: ServeMode,
    outcomes: Vec<BatchOutcome>,
    selections: Vec<ExpertHashTable>,
    wall: f64,
    peak: u64,
    idle: usize,
    hit: Option<f64>,
) -> ServingRun {
    let (records, logits): (Vec<_>, Vec<_>) = outcomes.into_iter().map(|o| (o.record, o.logits)).unzip();
    let summary = summarize(&records, wall, peak, idle, hit);
    let report = ServingReport {
        schema_version: REPORT_SCHEMA_VERSION,
        mode,
        seed: opts.seed,
        settings: settings(model, opts),
        summary,
        batches: records,
    };
    ServingRun { report, logits, selections }
}

/// Predictor-driven serving.
pub fn serve_sida(
    model: &MoEModel,
    predictor: &PredictorNet,
    batches: &[SequenceBatch],
    opts: &ServeOptions,
) -> Result<ServingRun> {
    if predictor.num_experts() != model.config().num_experts || predictor.num_layers() != model.config().num_layers {
        return Err(Error::Pipeline("predictor does not match the model's layers and experts".into()));
    }
    serve_pipelined(model, batches, opts, ServeMode::Sida, |b| {
        Ok(build_hash_table(predictor, model, b, opts.eval_top_k)?)
    })
}

/// The pipeline with the model's own routers as the hash function.
pub fn serve_oracle(model: &MoEModel, batches: &[SequenceBatch], opts: &ServeOptions) -> Result<ServingRun> {
    serve_pipelined(model, batches, opts, ServeMode::Oracle, |b| Ok(oracle_hash_table(model, b)?))
}

/// Sequential router-mode serving with on-demand expert loads.
pub fn serve_standard(model: &MoEModel, batches: &[SequenceBatch], opts: &ServeOptions) -> Result<ServingRun> {
    check_stream(model, batches, opts)?;
    let mut res = residency(model, opts);
    let start = Instant::now();
    let mut outcomes = Vec::with_capacity(batches.len());
    let mut tables = Vec::with_capacity(batches.len());
    for batch in batches {
        let (out, table) = infer_standard(model, batch, &mut res, opts.selection_overhead)?;
        outcomes.push(out);
        tables.push(table);
    }
    let wall = start.elapsed().as_secs_f64();
    Ok(finish_run(model, opts, ServeMode::Standard, outcomes, tables, wall, res.peak, 0, None))
}

/// Dispatches on `mode`; `predictor` is required for [`ServeMode::Sida`].
pub fn serve(
    mode: ServeMode,
    model: &MoEModel,
    predictor: Option<&PredictorNet>,
    batches: &[SequenceBatch],
    opts: &ServeOptions,
) -> Result<ServingRun> {
    match mode {
        ServeMode::Sida => {
            let p = predictor.ok_or_else(|| Error::Config("sida mode needs a predictor".into()))?;
            serve_sida(model, p, batches, opts)
        }
        ServeMode::Oracle => serve_oracle(model, batches, opts),
        ServeMode::Standard => serve_standard(model, batches, opts),
    }
}
