use alloc::format;
use alloc::vec::Vec;

use super::{LossParts, MoEConfig, MoEModel};
use crate::corpus::LabeledSequence;
use crate::error::ensure;
use crate::numkit::{AdamW, ParamSet, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoETrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub balance_coeff: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for MoETrainConfig {
    fn default() -> Self {
        Self { epochs: 4, lr: 2e-4, balance_coeff: 0.01, batch_size: 16, weight_decay: 0.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoETrainReport {
    pub seed: u64,
    pub steps: usize,
    /// Mean loss decomposition per epoch.
    pub epoch_losses: Vec<LossParts>,
    /// Accuracy on the training set after the final step.
    pub train_accuracy: f64,
}

/// Load-balance loss `K·Σ_i f_i·P_i` for one layer, given the fraction of
/// tokens routed to each expert and its mean router probability.
pub fn load_balance_loss(fractions: &[f64], mean_probs: &[f64]) -> f64 {
    fractions.len() as f64 * fractions.iter().zip(mean_probs).map(|(f, p)| f * p).sum::<f64>()
}

/// Trains a fresh model on `corpus` with AdamW on CE + balance loss.
pub fn train_toy_moe(
    config: MoEConfig,
    corpus: &[LabeledSequence],
    train: &MoETrainConfig,
) -> Result<(MoEModel, MoETrainReport)> {
    train_moe(MoEModel::new(config, train.seed)?, corpus, train)
}

/// Continues training `model` on `corpus`.
pub fn train_moe(
    mut model: MoEModel,
    corpus: &[LabeledSequence],
    train: &MoETrainConfig,
) -> Result<(MoEModel, MoETrainReport)> {
    ensure(!corpus.is_empty(), || "empty training corpus".into())?;
    ensure(train.batch_size >= 1, || "batch_size must be positive".into())?;
    let mut opt = AdamW::new(train.lr, train.weight_decay);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = Rng::new(train.seed).split(0x0074_7261_696e);
    let mut epoch_losses = Vec::with_capacity(train.epochs);
    let mut steps = 0;
    for epoch in 0..train.epochs {
        rng.shuffle(&mut order);
        let mut sum = LossParts::default();
        let mut batches = 0;
        for chunk in order.chunks(train.batch_size) {
            let seqs: Vec<&[u32]> = chunk.iter().map(|&i| corpus[i].tokens.as_slice()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| corpus[i].label).collect();
            let (parts, grad) = model.loss_and_grad(&seqs, &labels, train.balance_coeff)?;
            if !parts.total.is_finite() || !grad.all_finite() {
                return Err(Error::Diverged {
                    seed: train.seed,
                    step: steps,
                    detail: format!("epoch {epoch}: loss {}", parts.total),
                });
            }
            opt.step(&mut model, &grad);
            steps += 1;
            batches += 1;
            sum.ce += parts.ce;
            sum.balance += parts.balance;
            sum.total += parts.total;
            sum.correct += parts.correct;
        }
        let b = batches as f64;
        epoch_losses.push(LossParts {
            ce: sum.ce / b,
            balance: sum.balance / b,
            total: sum.total / b,
            correct: sum.correct,
        });
    }
    let train_accuracy = accuracy(&model, corpus)?;
    Ok((model, MoETrainReport { seed: train.seed, steps, epoch_losses, train_accuracy }))
}

/// Router-mode classification accuracy on labeled sequences.
pub(crate) fn accuracy(model: &MoEModel, corpus: &[LabeledSequence]) -> Result<f64> {
    let mut correct = 0;
    for s in corpus {
        let seqs = [s.tokens.as_slice()];
        let parts = model.loss(&seqs, &[s.label], 0.0)?;
        correct += parts.correct;
    }
    Ok(correct as f64 / corpus.len() as f64)
}
