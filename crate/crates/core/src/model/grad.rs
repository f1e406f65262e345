//! Exact gradients of the classification + load-balance objective.

use alloc::vec;
use alloc::vec::Vec;

use super::{MixCache, MoEModel};
use crate::error::ensure;
use crate::numkit::{log_sum_exp, softmax_backward, softmax_in_place, Matrix};
use crate::Result;

/// Gradients share the model's tensor layout.
pub type MoEGradient = MoEModel;

/// Objective decomposition for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    /// Mean cross-entropy over sequences.
    pub ce: f64,
    /// Load-balance loss averaged over layers; exactly 1.0 for perfectly
    /// uniform routing.
    pub balance: f64,
    /// `ce + balance_coeff · balance`.
    pub total: f64,
    pub correct: usize,
}

struct BlockCache {
    x_in: Matrix,
    mix: MixCache,
    probs: Matrix,
    selections: Vec<Vec<(usize, f64)>>,
    /// Per token, per selected expert: (hidden activations, output).
    expert_io: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
}

struct SeqCache {
    blocks: Vec<BlockCache>,
    pooled: Vec<f64>,
    logits: Vec<f64>,
}

impl MoEModel {
    fn forward_train(&self, tokens: &[u32]) -> Result<SeqCache> {
        let mut x = self.embed(tokens)?;
        let mut blocks = Vec::with_capacity(self.config.num_layers);
        for layer in 0..self.config.num_layers {
            let mix = self.mix_cached(layer, &x);
            let n = tokens.len();
            let mut probs = Matrix::zeros(n, self.config.num_experts);
            let mut selections = Vec::with_capacity(n);
            let mut expert_io = Vec::with_capacity(n);
            let mut next = mix.h.clone();
            for t in 0..n {
                let p = self.router_probs(layer, mix.h.row(t));
                let sel = self.select(&p);
                let mut io = Vec::with_capacity(sel.len());
                for &(i, alpha) in &sel {
                    let (hid, out) = self.blocks[layer].experts[i].forward_cached(mix.h.row(t));
                    for (o, v) in next.row_mut(t).iter_mut().zip(&out) {
                        *o += alpha * v;
                    }
                    io.push((hid, out));
                }
                probs.row_mut(t).copy_from_slice(&p);
                selections.push(sel);
                expert_io.push(io);
            }
            blocks.push(BlockCache { x_in: x, mix, probs, selections, expert_io });
            x = next;
        }
        let pooled = super::mean_rows(&x);
        let logits = self.head.vec_mat(&pooled);
        Ok(SeqCache { blocks, pooled, logits })
    }

    /// Loss only.
    pub fn loss(&self, sequences: &[&[u32]], labels: &[usize], balance_coeff: f64) -> Result<LossParts> {
        Ok(self.loss_and_grad(sequences, labels, balance_coeff)?.0)
    }

    /// Mean CE over `sequences` plus `balance_coeff` times the load-balance
    /// loss `K·Σ_i f_i·P_i` (averaged over layers), with its exact gradient.
    ///
    /// Expert selection is treated as a constant; gradients reach the router
    /// through the selected α values and through `P_i`.
    pub fn loss_and_grad(
        &self,
        sequences: &[&[u32]],
        labels: &[usize],
        balance_coeff: f64,
    ) -> Result<(LossParts, MoEGradient)> {
        ensure(!sequences.is_empty() && sequences.len() == labels.len(), || {
            "need one label per sequence and at least one sequence".into()
        })?;
        let cfg = self.config;
        if let Some(&y) = labels.iter().find(|&&y| y >= cfg.num_classes) {
            return Err(crate::contract!("label {y} outside {} classes", cfg.num_classes));
        }
        let caches: Vec<SeqCache> =
            sequences.iter().map(|s| self.forward_train(s)).collect::<Result<_>>()?;

        let k = cfg.num_experts;
        let total_tokens: usize = sequences.iter().map(|s| s.len()).sum();
        let inv_n = 1.0 / total_tokens as f64;
        // per layer: fraction routed (f) and mean probability (P)
        let mut frac = vec![vec![0.0; k]; cfg.num_layers];
        let mut mean_p = vec![vec![0.0; k]; cfg.num_layers];
        for c in &caches {
            for (l, b) in c.blocks.iter().enumerate() {
                for (t, sel) in b.selections.iter().enumerate() {
                    for &(i, _) in sel {
                        frac[l][i] += inv_n;
                    }
                    for (p, v) in mean_p[l].iter_mut().zip(b.probs.row(t)) {
                        *p += v * inv_n;
                    }
                }
            }
        }
        let balance = frac
            .iter()
            .zip(&mean_p)
            .map(|(f, p)| k as f64 * f.iter().zip(p).map(|(a, b)| a * b).sum::<f64>())
            .sum::<f64>()
            / cfg.num_layers as f64;

        let inv_b = 1.0 / sequences.len() as f64;
        let mut ce = 0.0;
        let mut correct = 0;
        let mut grad = self.zeros_like();
        let balance_scale = balance_coeff * k as f64 * inv_n / cfg.num_layers as f64;
        for ((cache, tokens), &y) in caches.iter().zip(sequences).zip(labels) {
            ce += log_sum_exp(&cache.logits) - cache.logits[y];
            if crate::numkit::argmax(&cache.logits) == y {
                correct += 1;
            }
            let mut dlogits = cache.logits.clone();
            softmax_in_place(&mut dlogits);
            dlogits[y] -= 1.0;
            dlogits.iter_mut().for_each(|g| *g *= inv_b);
            self.backward_sequence(tokens, cache, &dlogits, &frac, balance_scale, &mut grad);
        }
        ce *= inv_b;
        let total = ce + balance_coeff * balance;
        Ok((LossParts { ce, balance, total, correct }, grad))
    }

    fn backward_sequence(
        &self,
        tokens: &[u32],
        cache: &SeqCache,
        dlogits: &[f64],
        frac: &[Vec<f64>],
        balance_scale: f64,
        grad: &mut MoEGradient,
    ) {
        let n = tokens.len();
        let d = self.config.d_model;
        grad.head.add_outer(&cache.pooled, dlogits, 1.0);
        let dpooled = self.head.mat_vec(dlogits);
        let mut dx = Matrix::zeros(n, d);
        for t in 0..n {
            for (g, p) in dx.row_mut(t).iter_mut().zip(&dpooled) {
                *g = p / n as f64;
            }
        }

        for (layer, bc) in cache.blocks.iter().enumerate().rev() {
            let block = &self.blocks[layer];
            let gblock = &mut grad.blocks[layer];
            let h = &bc.mix.h;
            // MoE residual: dH starts as dX'
            let mut dh = dx.clone();
            for t in 0..n {
                let dout = dx.row(t);
                let mut dprobs: Vec<f64> = frac[layer].iter().map(|f| f * balance_scale).collect();
                for (&(i, alpha), (hid, out)) in bc.selections[t].iter().zip(&bc.expert_io[t]) {
                    dprobs[i] += crate::numkit::matrix::dot(dout, out);
                    let df: Vec<f64> = dout.iter().map(|g| g * alpha).collect();
                    let expert = &block.experts[i];
                    let gexp = &mut gblock.experts[i];
                    gexp.w2.add_outer(hid, &df, 1.0);
                    for (b, g) in gexp.b2.data_mut().iter_mut().zip(&df) {
                        *b += g;
                    }
                    let mut dhid = expert.w2.mat_vec(&df);
                    for (g, &a) in dhid.iter_mut().zip(hid) {
                        if a <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    gexp.w1.add_outer(h.row(t), &dhid, 1.0);
                    for (b, g) in gexp.b1.data_mut().iter_mut().zip(&dhid) {
                        *b += g;
                    }
                    expert.w1.mat_vec_acc(&dhid, dh.row_mut(t));
                }
                let dlog = softmax_backward(bc.probs.row(t), &dprobs);
                gblock.router.add_outer(h.row(t), &dlog, 1.0);
                block.router.mat_vec_acc(&dlog, dh.row_mut(t));
            }

            // attention residual
            let MixCache { q, k, v, a, m, .. } = &bc.mix;
            let mut dx_in = dh.clone();
            let mut dm = Matrix::zeros(n, d);
            for t in 0..n {
                gblock.wo.add_outer(m.row(t), dh.row(t), 1.0);
                block.wo.mat_vec_acc(dh.row(t), dm.row_mut(t));
            }
            let scale = 1.0 / libm::sqrt(d as f64);
            let mut dq = Matrix::zeros(n, d);
            let mut dk = Matrix::zeros(n, d);
            let mut dv = Matrix::zeros(n, d);
            for t in 0..n {
                let da: Vec<f64> =
                    (0..n).map(|s| crate::numkit::matrix::dot(dm.row(t), v.row(s))).collect();
                for s in 0..n {
                    dv.add_to_row(s, dm.row(t), a.get(t, s));
                }
                let ds = softmax_backward(a.row(t), &da);
                for (s, &g) in ds.iter().enumerate() {
                    let g = g * scale;
                    if g == 0.0 {
                        continue;
                    }
                    dq.add_to_row(t, k.row(s), g);
                    dk.add_to_row(s, q.row(t), g);
                }
            }
            let x_in = &bc.x_in;
            for t in 0..n {
                gblock.wq.add_outer(x_in.row(t), dq.row(t), 1.0);
                gblock.wk.add_outer(x_in.row(t), dk.row(t), 1.0);
                gblock.wv.add_outer(x_in.row(t), dv.row(t), 1.0);
                let row = dx_in.row_mut(t);
                block.wq.mat_vec_acc(dq.row(t), row);
                block.wk.mat_vec_acc(dk.row(t), row);
                block.wv.mat_vec_acc(dv.row(t), row);
            }
            dx = dx_in;
        }

        for (t, &tok) in tokens.iter().enumerate() {
            grad.token_embeddings.add_to_row(tok as usize, dx.row(t), 1.0);
            grad.position_embeddings.add_to_row(t, dx.row(t), 1.0);
        }
    }
}
