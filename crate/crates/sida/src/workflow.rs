//! Multi-step jobs shared by the command line and the benchmark: corpus
//! preparation, teacher and predictor training, and the corruption probe.

use serde::{Deserialize, Serialize};
use sida_core::corpus::{generate_corpus, split_heldout, CorpusSpec, LabeledSequence};
use sida_core::model::{train_toy_moe, MoEModel, MoETrainReport};
use sida_core::numkit::Rng;
use sida_core::predictor::{train_predictor, PredictorNet, PredictorTrainReport};
use sida_core::probe::{corrupted_count, estimate_c, measure_p_hat, CorruptionMode, RouterProbe};

use crate::config::{Config, ProbeMode, ProbeSection};
use crate::{Error, Result};

/// Generated corpus split into training and held-out parts.
#[derive(Debug, Clone)]
pub struct PreparedCorpus {
    pub sequences: Vec<LabeledSequence>,
    pub heldout_from: usize,
}

impl PreparedCorpus {
    pub fn new(sequences: Vec<LabeledSequence>, heldout_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&heldout_fraction) {
            return Err(Error::Config(format!("heldout fraction {heldout_fraction} outside [0, 1)")));
        }
        let heldout_from = split_heldout(&sequences, heldout_fraction).0.len();
        Ok(Self { sequences, heldout_from })
    }

    pub fn generate(config: &Config) -> Result<Self> {
        Self::new(generate_corpus(&config.corpus_spec())?, config.corpus.heldout_fraction)
    }

    pub fn train(&self) -> &[LabeledSequence] {
        &self.sequences[..self.heldout_from]
    }

    pub fn heldout(&self) -> &[LabeledSequence] {
        &self.sequences[self.heldout_from..]
    }
}

pub fn train_teacher(
    config: &Config,
    num_experts: usize,
    train: &[LabeledSequence],
) -> Result<(MoEModel, MoETrainReport)> {
    Ok(train_toy_moe(config.moe_config(num_experts), train, &config.train_config())?)
}

pub fn train_student(
    config: &Config,
    teacher: &MoEModel,
    train: &[LabeledSequence],
    heldout: &[LabeledSequence],
) -> Result<(PredictorNet, PredictorTrainReport)> {
    Ok(train_predictor(config.predictor_config(teacher.config().num_experts), train, heldout, teacher)?)
}

/// `count` sequences of exactly `len` tokens drawn from the configured corpus
/// distribution with its own seed stream.
pub fn fixed_length_corpus(config: &Config, len: usize, count: usize, stream: u64) -> Result<Vec<LabeledSequence>> {
    let spec = CorpusSpec {
        num_sequences: count,
        min_len: len,
        max_len: len,
        seed: config.seed ^ stream.rotate_left(32),
        ..config.corpus_spec()
    };
    Ok(generate_corpus(&spec)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePosition {
    pub sequence: usize,
    pub position: usize,
    /// Measured change probability per usable grid point.
    pub p_hat: Vec<f64>,
    pub c_hat: usize,
    pub skipped_trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub seed: u64,
    pub layer: usize,
    pub mode: ProbeMode,
    pub seq_len: usize,
    pub trials: usize,
    /// Grid points with enough corrupted positions for the mode.
    pub p_grid: Vec<f64>,
    pub mean_p_hat: Vec<f64>,
    /// `ĉ` fitted to the mean curve.
    pub c_hat_mean_curve: usize,
    pub mean_c_hat: f64,
    pub positions: Vec<ProbePosition>,
}

/// Cuts or pads (with token 0) to exactly `len` tokens.
pub fn fit_length(tokens: &[u32], len: usize) -> Vec<u32> {
    let mut out: Vec<u32> = tokens.iter().copied().take(len).collect();
    out.resize(len, 0);
    out
}

/// Corruption probe of `model`'s routing at `probe.layer` over positions drawn
/// uniformly from `sequences`.
pub fn probe_sparsity(
    model: &MoEModel,
    sequences: &[LabeledSequence],
    probe: &ProbeSection,
    seed: u64,
) -> Result<ProbeReport> {
    if sequences.is_empty() || probe.positions == 0 {
        return Err(Error::Config("probe needs sequences and at least one position".into()));
    }
    if probe.seq_len > model.config().max_seq_len || probe.seq_len < 2 {
        return Err(Error::Config(format!("probe length {} outside 2..={}", probe.seq_len, model.config().max_seq_len)));
    }
    let mode: CorruptionMode = probe.mode.into();
    let min_m = if mode == CorruptionMode::Position { 2 } else { 1 };
    let grid: Vec<f64> = probe.p_grid.iter().copied().filter(|&p| corrupted_count(probe.seq_len, p) >= min_m).collect();
    if grid.len() < 2 {
        return Err(Error::Config("fewer than two usable corruption fractions".into()));
    }
    let target = RouterProbe { model, layer: probe.layer };
    let mut rng = Rng::new(seed).split(0x7072_6f62);
    let mut positions = Vec::with_capacity(probe.positions);
    for _ in 0..probe.positions {
        let sequence = rng.below(sequences.len());
        let tokens = fit_length(&sequences[sequence].tokens, probe.seq_len);
        let position = rng.below(probe.seq_len);
        let mut p_hat = Vec::with_capacity(grid.len());
        let mut skipped = 0;
        for &p in &grid {
            let out = measure_p_hat(&target, &tokens, position, p, probe.trials, mode, model.config().vocab_size, &mut rng)?;
            p_hat.push(out.p_hat);
            skipped += out.skipped;
        }
        let c_hat = estimate_c(&grid, &p_hat, probe.seq_len)?;
        positions.push(ProbePosition { sequence, position, p_hat, c_hat, skipped_trials: skipped });
    }
    let n = positions.len() as f64;
    let mean_p_hat: Vec<f64> =
        (0..grid.len()).map(|j| positions.iter().map(|p| p.p_hat[j]).sum::<f64>() / n).collect();
    Ok(ProbeReport {
        seed,
        layer: probe.layer,
        mode: probe.mode,
        seq_len: probe.seq_len,
        trials: probe.trials,
        c_hat_mean_curve: estimate_c(&grid, &mean_p_hat, probe.seq_len)?,
        mean_c_hat: positions.iter().map(|p| p.c_hat as f64).sum::<f64>() / n,
        p_grid: grid,
        mean_p_hat,
        positions,
    })
}
