use alloc::vec;
use alloc::vec::Vec;

use crate::error::ensure;
use crate::numkit::{argmax, log_sum_exp, softmax_in_place, topk};
use crate::{Error, Result};

/// Truncated distillation loss for one position.
///
/// With `S = top-T(teacher)`, returns `KL(p̃ ‖ q̃)` where `p̃` is the teacher
/// restricted to `S` and renormalized and `q̃` is the student softmax
/// restricted to `S` and renormalized.
pub fn tkd_loss(student_logits: &[f64], teacher_probs: &[f64], top_t: usize) -> Result<f64> {
    Ok(tkd_loss_grad(student_logits, teacher_probs, top_t)?.0)
}

/// [`tkd_loss`] and its gradient w.r.t. the student logits.
pub fn tkd_loss_grad(student_logits: &[f64], teacher_probs: &[f64], top_t: usize) -> Result<(f64, Vec<f64>)> {
    ensure(student_logits.len() == teacher_probs.len(), || "student/teacher width mismatch".into())?;
    let support = topk(teacher_probs, top_t)?;
    let mass: f64 = support.iter().map(|&i| teacher_probs[i]).sum();
    if mass.is_nan() || mass <= 0.0 {
        return Err(Error::Degenerate("teacher mass on the top-T set is zero".into()));
    }
    let restricted: Vec<f64> = support.iter().map(|&i| student_logits[i]).collect();
    let lse = log_sum_exp(&restricted);
    let mut q = restricted.clone();
    softmax_in_place(&mut q);
    let mut loss = 0.0;
    let mut grad = vec![0.0; student_logits.len()];
    for (j, &i) in support.iter().enumerate() {
        let p = teacher_probs[i] / mass;
        if p > 0.0 {
            loss += p * (libm::log(p) - (student_logits[i] - lse));
        }
        grad[i] = q[j] - p;
    }
    Ok((loss, grad))
}

/// Cross-entropy of the student against the teacher's top-1 expert, with gradient.
pub fn ce_loss_grad(student_logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let loss = log_sum_exp(student_logits) - student_logits[target];
    let mut g = student_logits.to_vec();
    softmax_in_place(&mut g);
    g[target] -= 1.0;
    (loss, g)
}

/// Decomposed predictor objective `λ·CE + TKD`, both averaged over positions.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PredictorLoss {
    pub ce: f64,
    pub tkd: f64,
    pub total: f64,
    /// Positions whose student argmax equals the teacher's top-1.
    pub hits: usize,
    pub positions: usize,
}

/// `λ·mean CE(student, teacher argmax) + mean TKD` over every
/// `(layer, token)` pair, with per-pair gradients scaled for the means.
///
/// `student[l]` and `teacher[l]` hold one row per position.
pub fn predictor_loss(
    student: &[Vec<Vec<f64>>],
    teacher: &[Vec<Vec<f64>>],
    lambda: f64,
    top_t: usize,
) -> Result<(PredictorLoss, Vec<Vec<Vec<f64>>>)> {
    ensure(student.len() == teacher.len(), || "layer count mismatch".into())?;
    let positions: usize = teacher.iter().map(Vec::len).sum();
    ensure(positions > 0, || "no positions to score".into())?;
    let inv = 1.0 / positions as f64;
    let mut out = PredictorLoss { positions, ..Default::default() };
    let mut grads = Vec::with_capacity(student.len());
    for (s_layer, t_layer) in student.iter().zip(teacher) {
        ensure(s_layer.len() == t_layer.len(), || "trace does not cover every token".into())?;
        let mut g_layer = Vec::with_capacity(s_layer.len());
        for (s, t) in s_layer.iter().zip(t_layer) {
            let target = argmax(t);
            let (ce, gce) = ce_loss_grad(s, target);
            let (kd, gkd) = tkd_loss_grad(s, t, top_t)?;
            out.ce += ce * inv;
            out.tkd += kd * inv;
            if argmax(s) == target {
                out.hits += 1;
            }
            g_layer.push(gce.iter().zip(&gkd).map(|(a, b)| (lambda * a + b) * inv).collect());
        }
        grads.push(g_layer);
    }
    out.total = lambda * out.ce + out.tkd;
    Ok((out, grads))
}
