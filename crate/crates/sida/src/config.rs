//! TOML run configuration. Every key is optional; see `sida.example.toml`
//! at the repository root for the full layout. `SIDA_SEED` replaces `seed`.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sida_core::corpus::CorpusSpec;
use sida_core::model::{MoEConfig, MoETrainConfig};
use sida_core::offload::{MemoryBudget, DEFAULT_BANDWIDTH, DEFAULT_LATENCY};
use sida_core::predictor::PredictorConfig;
use sida_core::probe::CorruptionMode;

use crate::pipeline::{ServeOptions, DEFAULT_DEQUEUE_TIMEOUT, DEFAULT_QUEUE_CAPACITY};
use crate::report::{Prefetch, ServeMode};
use crate::{Error, Result};

pub const SEED_ENV: &str = "SIDA_SEED";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub predictor: PredictorSection,
    pub serve: ServeSection,
    pub probe: ProbeSection,
    pub bench: BenchSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub vocab_size: usize,
    pub num_sequences: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub num_classes: usize,
    pub num_latent: usize,
    pub topics_per_sequence: usize,
    pub beta: f64,
    pub zipf_exponent: f64,
    pub heldout_fraction: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let d = CorpusSpec::default();
        Self {
            vocab_size: d.vocab_size,
            num_sequences: d.num_sequences,
            min_len: d.min_len,
            max_len: d.max_len,
            num_classes: d.num_classes,
            num_latent: d.num_latent,
            topics_per_sequence: d.topics_per_sequence,
            beta: d.beta,
            zipf_exponent: d.zipf_exponent,
            heldout_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub num_layers: usize,
    pub num_experts: usize,
    pub expert_hidden: usize,
    pub max_seq_len: usize,
    pub routing_k: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = MoEConfig::default();
        Self {
            d_model: d.d_model,
            num_layers: d.num_layers,
            num_experts: d.num_experts,
            expert_hidden: d.expert_hidden,
            max_seq_len: d.max_seq_len,
            routing_k: d.routing_k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub balance_coeff: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = MoETrainConfig::default();
        Self {
            epochs: d.epochs,
            lr: d.lr,
            balance_coeff: d.balance_coeff,
            batch_size: d.batch_size,
            weight_decay: d.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorSection {
    pub compress_dim: usize,
    pub lstm_hidden: usize,
    /// Defaults to `min(30, K)`.
    pub top_t: Option<usize>,
    pub lambda: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: usize,
}

impl Default for PredictorSection {
    fn default() -> Self {
        let d = PredictorConfig::default();
        Self {
            compress_dim: d.compress_dim,
            lstm_hidden: d.lstm_hidden,
            top_t: None,
            lambda: d.lambda,
            lr: d.lr,
            weight_decay: d.weight_decay,
            batch_size: d.batch_size,
            max_steps: d.max_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub mode: ServeMode,
    pub eval_top_k: usize,
    pub batch_size: usize,
    pub queue_capacity: usize,
    pub prefetch: Prefetch,
    /// Absolute fast-tier size; wins over `budget_fraction`.
    pub budget_bytes: Option<u64>,
    /// Fraction of all expert bytes; unbounded when neither is set.
    pub budget_fraction: Option<f64>,
    pub bandwidth_bytes_per_s: f64,
    pub per_transfer_latency_s: f64,
    pub selection_overhead_s: f64,
    pub dequeue_timeout_s: f64,
    /// Serve only the first this many batches of the held-out split.
    pub max_batches: Option<usize>,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self {
            mode: ServeMode::Sida,
            eval_top_k: 1,
            batch_size: 1,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            prefetch: Prefetch::Layer,
            budget_bytes: None,
            budget_fraction: None,
            bandwidth_bytes_per_s: DEFAULT_BANDWIDTH,
            per_transfer_latency_s: DEFAULT_LATENCY,
            selection_overhead_s: 0.0,
            dequeue_timeout_s: DEFAULT_DEQUEUE_TIMEOUT.as_secs_f64(),
            max_batches: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ProbeMode {
    Token,
    Position,
}

impl From<ProbeMode> for CorruptionMode {
    fn from(m: ProbeMode) -> Self {
        match m {
            ProbeMode::Token => CorruptionMode::Token,
            ProbeMode::Position => CorruptionMode::Position,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    /// MoE layer whose top-1 choice is watched; 0 is the first block.
    pub layer: usize,
    pub mode: ProbeMode,
    pub p_grid: Vec<f64>,
    pub trials: usize,
    /// Probe positions drawn uniformly over the probe sequences.
    pub positions: usize,
    /// Sequences are cut or padded to this length.
    pub seq_len: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            layer: 0,
            mode: ProbeMode::Token,
            p_grid: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            trials: 50,
            positions: 100,
            seq_len: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub experts: Vec<usize>,
    pub budget_fractions: Vec<f64>,
    pub modes: Vec<ServeMode>,
    /// Held-out samples served per grid cell.
    pub samples: usize,
    /// Fixed sequence lengths for the reduction-versus-length series.
    pub length_buckets: Vec<usize>,
    pub bucket_samples: usize,
    pub overhead_repetitions: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            experts: vec![8, 32, 128],
            budget_fractions: vec![0.25, 0.5, 1.0],
            modes: vec![ServeMode::Standard, ServeMode::Oracle, ServeMode::Sida],
            samples: 200,
            length_buckets: vec![8, 32, 64],
            bucket_samples: 50,
            overhead_repetitions: 20,
        }
    }
}

impl Config {
    /// Reads `path` (or defaults when `None`) and applies `SIDA_SEED`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(Error::io(p))?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        config.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not a u64")))?;
        }
        Ok(())
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        let c = &self.corpus;
        CorpusSpec {
            vocab_size: c.vocab_size,
            num_sequences: c.num_sequences,
            min_len: c.min_len,
            max_len: c.max_len,
            num_classes: c.num_classes,
            num_latent: c.num_latent,
            topics_per_sequence: c.topics_per_sequence,
            beta: c.beta,
            zipf_exponent: c.zipf_exponent,
            seed: self.seed,
        }
    }

    /// Model shape for `num_experts`, with vocabulary and classes from the corpus.
    pub fn moe_config(&self, num_experts: usize) -> MoEConfig {
        let m = &self.model;
        MoEConfig {
            vocab_size: self.corpus.vocab_size,
            d_model: m.d_model,
            num_layers: m.num_layers,
            num_experts,
            expert_hidden: m.expert_hidden,
            max_seq_len: m.max_seq_len,
            routing_k: m.routing_k,
            num_classes: self.corpus.num_classes,
        }
    }

    pub fn train_config(&self) -> MoETrainConfig {
        let t = &self.train;
        MoETrainConfig {
            epochs: t.epochs,
            lr: t.lr,
            balance_coeff: t.balance_coeff,
            batch_size: t.batch_size,
            weight_decay: t.weight_decay,
            seed: self.seed,
        }
    }

    pub fn predictor_config(&self, num_experts: usize) -> PredictorConfig {
        let p = &self.predictor;
        PredictorConfig {
            compress_dim: p.compress_dim,
            lstm_hidden: p.lstm_hidden,
            top_t: p.top_t.unwrap_or(PredictorConfig::for_experts(num_experts).top_t),
            lambda: p.lambda,
            lr: p.lr,
            weight_decay: p.weight_decay,
            batch_size: p.batch_size,
            max_steps: p.max_steps,
            seed: self.seed,
        }
    }

    /// Fast-tier size for a model: explicit bytes, else a fraction of all
    /// expert bytes, else unbounded.
    pub fn budget_bytes(&self, model: &MoEConfig) -> Result<u64> {
        match (self.serve.budget_bytes, self.serve.budget_fraction) {
            (Some(b), _) => Ok(b),
            (None, Some(f)) => fraction_of_experts(model, f),
            (None, None) => Ok(u64::MAX),
        }
    }

    pub fn serve_options(&self, model: &MoEConfig) -> Result<ServeOptions> {
        let s = &self.serve;
        if !(s.selection_overhead_s >= 0.0 && s.dequeue_timeout_s > 0.0) {
            return Err(Error::Config("overhead and timeout must be non-negative and positive".into()));
        }
        let budget = MemoryBudget {
            fast_tier_bytes: self.budget_bytes(model)?,
            bandwidth_bytes_per_s: s.bandwidth_bytes_per_s,
            per_transfer_latency_s: s.per_transfer_latency_s,
        };
        budget.validate()?;
        Ok(ServeOptions {
            budget,
            eval_top_k: s.eval_top_k,
            queue_capacity: s.queue_capacity,
            prefetch: s.prefetch,
            selection_overhead: Duration::from_secs_f64(s.selection_overhead_s),
            dequeue_timeout: Duration::from_secs_f64(s.dequeue_timeout_s),
            seed: self.seed,
        })
    }
}

/// `fraction` of the model's total expert bytes, rounded down to whole experts.
pub fn fraction_of_experts(model: &MoEConfig, fraction: f64) -> Result<u64> {
    if !(fraction > 0.0 && fraction.is_finite()) {
        return Err(Error::Config(format!("budget fraction {fraction} must be positive")));
    }
    let experts = (fraction * (model.num_experts * model.num_layers) as f64).floor() as u64;
    Ok(experts * model.expert_bytes())
}
