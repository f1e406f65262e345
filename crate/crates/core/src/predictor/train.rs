use alloc::format;
use alloc::vec::Vec;

use super::{predictor_loss, PredictorConfig, PredictorLoss, PredictorNet};
use crate::corpus::LabeledSequence;
use crate::error::ensure;
use crate::model::{MoEModel, Routing, SequenceBatch};
use crate::numkit::{AdamW, Matrix, ParamSet, Rng};
use crate::{Error, Result};

/// Everything the predictor learns from for one sequence: the model's input
/// embeddings and its router distributions `probs[layer][token]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTargets {
    pub embeddings: Matrix,
    pub probs: Vec<Vec<Vec<f64>>>,
}

impl TeacherTargets {
    pub fn from_model(model: &MoEModel, tokens: &[u32]) -> Result<Self> {
        let batch = SequenceBatch::new(0, alloc::vec![tokens.to_vec()], None);
        let out = model.forward(&batch, Routing::Router)?;
        let probs = out
            .trace
            .layers
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|e| e.probs.as_ref().expect("router mode records probs").as_slice().to_vec())
                    .collect()
            })
            .collect();
        Ok(Self { embeddings: model.embed(tokens)?, probs })
    }

    pub fn top1(&self, layer: usize, token: usize) -> usize {
        crate::numkit::argmax(&self.probs[layer][token])
    }
}

/// Mean objective over a set of sequences and its gradient.
pub fn predictor_objective(
    net: &PredictorNet,
    targets: &[&TeacherTargets],
    lambda: f64,
    top_t: usize,
) -> Result<(PredictorLoss, PredictorNet)> {
    ensure(!targets.is_empty(), || "no sequences".into())?;
    let mut caches = Vec::with_capacity(targets.len());
    let mut student = Vec::new();
    let mut teacher = Vec::new();
    for _ in 0..net.num_layers() {
        student.push(Vec::new());
        teacher.push(Vec::new());
    }
    for tt in targets {
        ensure(tt.probs.len() == net.num_layers(), || "trace layer count mismatch".into())?;
        let (out, cache) = net.forward_cached(&tt.embeddings)?;
        for (l, logits) in out.logits.iter().enumerate() {
            ensure(tt.probs[l].len() == logits.rows(), || "trace does not cover every token".into())?;
            for t in 0..logits.rows() {
                student[l].push(logits.row(t).to_vec());
                teacher[l].push(tt.probs[l][t].clone());
            }
        }
        caches.push(cache);
    }
    let (loss, dl) = predictor_loss(&student, &teacher, lambda, top_t)?;
    let mut grad = net.zeros_like();
    let mut offset = 0;
    for (tt, cache) in targets.iter().zip(&caches) {
        let n = tt.embeddings.rows();
        let dlogits: Vec<Matrix> = dl
            .iter()
            .map(|layer| {
                let k = layer[offset].len();
                let mut m = Matrix::zeros(n, k);
                for t in 0..n {
                    m.row_mut(t).copy_from_slice(&layer[offset + t]);
                }
                m
            })
            .collect();
        net.backward(&tt.embeddings, cache, &dlogits, &mut grad);
        offset += n;
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorTrainReport {
    pub seed: u64,
    pub lambda: f64,
    pub top_t: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Objective per optimizer step.
    pub loss_curve: Vec<PredictorLoss>,
    pub heldout_top1: f64,
    pub heldout_top3: f64,
}

fn targets_for(model: &MoEModel, seqs: &[LabeledSequence]) -> Result<Vec<TeacherTargets>> {
    seqs.iter().map(|s| TeacherTargets::from_model(model, &s.tokens)).collect()
}

/// Top-k hit rate of `net` against teacher top-1 over `targets`.
pub(crate) fn hit_rate(net: &PredictorNet, targets: &[TeacherTargets], k: usize) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for tt in targets {
        let out = net.forward(&tt.embeddings)?;
        for (l, logits) in out.logits.iter().enumerate() {
            for t in 0..logits.rows() {
                let ids = crate::numkit::topk(logits.row(t), k)?;
                if ids.contains(&tt.top1(l, t)) {
                    hits += 1;
                }
                total += 1;
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

/// Trains a predictor against `teacher`'s routers with AdamW on
/// `λ·CE + TKD(T)`, then scores top-1/top-3 hit rates on `heldout`.
pub fn train_predictor(
    config: PredictorConfig,
    train: &[LabeledSequence],
    heldout: &[LabeledSequence],
    teacher: &MoEModel,
) -> Result<(PredictorNet, PredictorTrainReport)> {
    ensure(!train.is_empty(), || "empty predictor training set".into())?;
    let mc = teacher.config();
    let mut net = PredictorNet::new(config, mc.d_model, mc.num_layers, mc.num_experts)?;
    let train_targets = targets_for(teacher, train)?;
    let mut opt = AdamW::new(config.lr, config.weight_decay);
    let mut rng = Rng::new(config.seed).split(0x7072_6564);
    let mut order: Vec<usize> = (0..train_targets.len()).collect();
    let mut cursor = order.len();
    let mut loss_curve = Vec::with_capacity(config.max_steps);
    for step in 0..config.max_steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(order.len()) {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(&train_targets[order[cursor]]);
            cursor += 1;
        }
        let (loss, grad) = predictor_objective(&net, &batch, config.lambda, config.top_t)?;
        if !loss.total.is_finite() || !grad.all_finite() {
            return Err(Error::Diverged {
                seed: config.seed,
                step,
                detail: format!("ce {} tkd {}", loss.ce, loss.tkd),
            });
        }
        opt.step(&mut net, &grad);
        loss_curve.push(loss);
    }
    let heldout_targets = targets_for(teacher, heldout)?;
    let k3 = 3.min(mc.num_experts);
    let report = PredictorTrainReport {
        seed: config.seed,
        lambda: config.lambda,
        top_t: config.top_t,
        lr: config.lr,
        batch_size: config.batch_size,
        steps: config.max_steps,
        loss_curve,
        heldout_top1: if heldout.is_empty() { 0.0 } else { hit_rate(&net, &heldout_targets, 1)? },
        heldout_top3: if heldout.is_empty() { 0.0 } else { hit_rate(&net, &heldout_targets, k3)? },
    };
    Ok((net, report))
}
