use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;
use sida_core::corpus::into_batches;
use sida_core::model::{MoEModel, Routing};
use sida_core::predictor::oracle_hash_table;

use sida::bench::run_benchmark;
use sida::checkpoint;
use sida::config::{Config, ProbeMode};
use sida::formats::{self, HashTableJson, TraceJson};
use sida::pipeline::serve;
use sida::report::{Prefetch, ServeMode};
use sida::workflow::{probe_sparsity, train_student, train_teacher, PreparedCorpus};

#[derive(Parser)]
#[command(name = "sida", version, about = "Data-aware expert offloading for mixture-of-experts serving")]
struct Cli {
    /// TOML configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the planted-structure corpus as JSON lines.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the MoE teacher on the training split.
    TrainMoe {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `model.num_experts`.
        #[arg(long)]
        experts: Option<usize>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Record router activations and oracle hash tables for the held-out split.
    Trace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tables: Option<PathBuf>,
    },
    /// Distill the hash-function predictor from a trained teacher.
    TrainPredictor {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Estimate critical-token counts by corrupting inputs.
    ProbeSparsity {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ProbeMode>,
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Serve the held-out split and write a report.
    Serve {
        #[arg(long, value_enum)]
        mode: Option<ServeMode>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        predictor: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        budget_bytes: Option<u64>,
        /// Bytes per second between tiers.
        #[arg(long)]
        bandwidth: Option<f64>,
        /// Seconds added per transfer.
        #[arg(long)]
        latency: Option<f64>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long, value_enum)]
        prefetch: Option<Prefetch>,
        #[arg(long)]
        report: PathBuf,
        /// Per-batch rows; defaults to the report path with a `.csv` extension.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the full benchmark grid and write the bundle.
    Bench {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct TrainSummary {
    seed: u64,
    num_experts: usize,
    steps: usize,
    train_accuracy: f64,
    final_loss: Option<f64>,
}

#[derive(Serialize)]
struct PredictorSummary {
    seed: u64,
    steps: usize,
    heldout_top1: f64,
    heldout_top3: f64,
    final_loss: Option<f64>,
}

fn corpus(config: &Config, path: &Path) -> anyhow::Result<PreparedCorpus> {
    let seqs = formats::read_corpus(path).with_context(|| format!("reading corpus {}", path.display()))?;
    Ok(PreparedCorpus::new(seqs, config.corpus.heldout_fraction)?)
}

fn model(path: &Path) -> anyhow::Result<MoEModel> {
    checkpoint::load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = Config::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenCorpus { out } => {
            let c = PreparedCorpus::generate(&config)?;
            formats::write_corpus(&out, &c.sequences)?;
            println!("{} sequences ({} held out) -> {}", c.sequences.len(), c.heldout().len(), out.display());
        }
        Command::TrainMoe { corpus: path, out, experts, report } => {
            let c = corpus(&config, &path)?;
            let k = experts.unwrap_or(config.model.num_experts);
            let (m, r) = train_teacher(&config, k, c.train())?;
            checkpoint::save_model(&out, &m)?;
            let summary = TrainSummary {
                seed: r.seed,
                num_experts: k,
                steps: r.steps,
                train_accuracy: r.train_accuracy,
                final_loss: r.epoch_losses.last().map(|l| l.total),
            };
            println!("train accuracy {:.4} -> {}", summary.train_accuracy, out.display());
            if let Some(p) = report {
                formats::write_json(&p, &summary)?;
            }
        }
        Command::Trace { checkpoint, corpus: path, out, tables } => {
            let m = model(&checkpoint)?;
            let c = corpus(&config, &path)?;
            let batches = into_batches(c.heldout(), config.serve.batch_size, 0);
            let mut traces = Vec::with_capacity(batches.len());
            let mut hashes = Vec::new();
            for b in &batches {
                traces.push(TraceJson::new(b.batch_id, &m.forward(b, Routing::Router)?.trace));
                if tables.is_some() {
                    hashes.push(HashTableJson::from(&oracle_hash_table(&m, b)?));
                }
            }
            formats::write_json(&out, &traces)?;
            if let Some(p) = tables {
                formats::write_json(&p, &hashes)?;
            }
            println!("{} batches traced -> {}", traces.len(), out.display());
        }
        Command::TrainPredictor { checkpoint: ckpt, corpus: path, out, report } => {
            let m = model(&ckpt)?;
            let c = corpus(&config, &path)?;
            let (p, r) = train_student(&config, &m, c.train(), c.heldout())?;
            checkpoint::save_predictor(&out, &p)?;
            let summary = PredictorSummary {
                seed: r.seed,
                steps: r.steps,
                heldout_top1: r.heldout_top1,
                heldout_top3: r.heldout_top3,
                final_loss: r.loss_curve.last().map(|l| l.total),
            };
            println!("held-out top-1 {:.4} top-3 {:.4} -> {}", r.heldout_top1, r.heldout_top3, out.display());
            if let Some(path) = report {
                formats::write_json(&path, &summary)?;
            }
        }
        Command::ProbeSparsity { checkpoint, corpus: path, out, mode, layer } => {
            if let Some(mode) = mode {
                config.probe.mode = mode;
            }
            if let Some(layer) = layer {
                config.probe.layer = layer;
            }
            let m = model(&checkpoint)?;
            let c = corpus(&config, &path)?;
            let r = probe_sparsity(&m, c.heldout(), &config.probe, config.seed)?;
            formats::write_json(&out, &r)?;
            println!("mean c_hat {:.3}, c_hat of mean curve {} -> {}", r.mean_c_hat, r.c_hat_mean_curve, out.display());
        }
        Command::Serve {
            mode,
            checkpoint,
            predictor,
            corpus: path,
            budget_bytes,
            bandwidth,
            latency,
            top_k,
            prefetch,
            report,
            csv,
        } => {
            let s = &mut config.serve;
            if let Some(v) = mode {
                s.mode = v;
            }
            if let Some(v) = budget_bytes {
                s.budget_bytes = Some(v);
            }
            if let Some(v) = bandwidth {
                s.bandwidth_bytes_per_s = v;
            }
            if let Some(v) = latency {
                s.per_transfer_latency_s = v;
            }
            if let Some(v) = top_k {
                s.eval_top_k = v;
            }
            if let Some(v) = prefetch {
                s.prefetch = v;
            }
            let mode = s.mode;
            let m = model(&checkpoint)?;
            let p = match (&predictor, mode) {
                (Some(p), _) => Some(
                    checkpoint::load_predictor(p).with_context(|| format!("loading predictor {}", p.display()))?,
                ),
                (None, ServeMode::Sida) => bail!("--predictor is required in sida mode"),
                (None, _) => None,
            };
            let c = corpus(&config, &path)?;
            let mut batches = into_batches(c.heldout(), config.serve.batch_size, 0);
            if let Some(n) = config.serve.max_batches {
                batches.truncate(n);
            }
            let opts = config.serve_options(m.config())?;
            let run = serve(mode, &m, p.as_ref(), &batches, &opts)?;
            run.report.write_json(&report)?;
            let csv = csv.unwrap_or_else(|| report.with_extension("csv"));
            run.report.write_csv(&csv)?;
            let s = &run.report.summary;
            println!(
                "{} samples, {:.2} samples/s, mean latency {:.3} ms -> {}",
                s.samples,
                s.throughput,
                s.mean_latency_s * 1e3,
                report.display()
            );
        }
        Command::Bench { out } => {
            let bundle = run_benchmark(&config);
            bundle.write(&out)?;
            for e in &bundle.errors {
                eprintln!("stage {} failed: {}", e.stage, e.message);
            }
            println!("bundle -> {}", out.join("bundle.json").display());
            if !bundle.complete {
                bail!("{} benchmark stage(s) failed", bundle.errors.len());
            }
        }
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    run(Cli::parse())
}
