//! The activation predictor ("hash function") and expert hash tables.
//!
//! From the model's input embeddings alone, the predictor emits, for every MoE
//! layer and token, logits over that layer's experts:
//!
//! ```text
//! u = compress(e)                     affine d_model → compress_dim
//! h = LSTM₂(LSTM₁(u))
//! w_t = sparsemax_s(h_t · h_s)        plain dot-product scores
//! r_t = Σ_s w_ts·h_s + h_t            sparse attention + residual
//! logits_{l,t} = head_l(r_t)          one affine head per MoE layer
//! ```
//!
//! Queries, keys and values are the LSTM outputs themselves. One LSTM trunk is
//! shared by all per-layer heads.

mod loss;
mod lstm;
mod table;
mod train;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::ensure;
use crate::numkit::{sparsemax_backward, sparsemax_in_place, Matrix, ParamSet, Rng};
use crate::Result;

pub use loss::{ce_loss_grad, predictor_loss, tkd_loss, tkd_loss_grad, PredictorLoss};
pub use lstm::{LstmCache, LstmLayer};
pub use table::{build_hash_table, hash_hit_rate, oracle_hash_table, ExpertHashTable};
pub use train::{
    predictor_objective, train_predictor, PredictorTrainReport, TeacherTargets,
};

/// Predictor shape and training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictorConfig {
    pub compress_dim: usize,
    pub lstm_hidden: usize,
    /// Truncation size of the distillation loss.
    pub top_t: usize,
    /// Weight of the cross-entropy term.
    pub lambda: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            compress_dim: 32,
            lstm_hidden: 32,
            top_t: 30,
            lambda: 1.0,
            lr: 1e-2,
            weight_decay: 0.01,
            batch_size: 16,
            max_steps: 2000,
            seed: 0,
        }
    }
}

impl PredictorConfig {
    /// Fixed: the trunk is always a two-layer LSTM.
    pub const LSTM_LAYERS: usize = 2;

    /// Default hyperparameters with `top_t = min(30, num_experts)`.
    pub fn for_experts(num_experts: usize) -> Self {
        let d = Self::default();
        Self { top_t: d.top_t.min(num_experts), ..d }
    }

    /// Hyperparameters used for fine-tuned billion-parameter teachers: a
    /// much smaller learning rate and cross-entropy weight, batches of 64.
    pub fn full_scale(num_experts: usize) -> Self {
        Self { lambda: 0.005, lr: 5e-5, batch_size: 64, ..Self::for_experts(num_experts) }
    }

    pub fn validate(&self, num_experts: usize) -> Result<()> {
        ensure(self.compress_dim >= 1 && self.lstm_hidden >= 1, || "predictor dims must be positive".into())?;
        ensure(self.top_t >= 1 && self.top_t <= num_experts, || {
            alloc::format!("top_t {} must lie in 1..={num_experts}", self.top_t)
        })?;
        ensure(self.lambda >= 0.0, || "lambda must be non-negative".into())?;
        ensure(self.batch_size >= 1, || "batch_size must be positive".into())
    }
}

/// Affine output head for one MoE layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub weight: Matrix,
    pub bias: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorNet {
    config: PredictorConfig,
    pub compress_weight: Matrix,
    pub compress_bias: Matrix,
    pub lstm: [LstmLayer; 2],
    pub heads: Vec<Head>,
}

/// Per-layer logits plus the attention pattern that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorOutput {
    /// `logits[layer]` is `n × num_experts`.
    pub logits: Vec<Matrix>,
    /// Row-wise sparsemax attention, `n × n`.
    pub attention: Matrix,
}

pub(crate) struct PredictorCache {
    u: Matrix,
    l1: lstm::LstmCache,
    l2: lstm::LstmCache,
    attention: Matrix,
    residual: Matrix,
}

impl PredictorNet {
    pub fn new(
        config: PredictorConfig,
        d_model: usize,
        num_layers: usize,
        num_experts: usize,
    ) -> Result<Self> {
        config.validate(num_experts)?;
        ensure(d_model >= 1 && num_layers >= 1, || "predictor needs d_model and layers".into())?;
        let mut rng = Rng::new(config.seed).split(0x6861_7368);
        let c = config.compress_dim;
        let h = config.lstm_hidden;
        Ok(Self {
            config,
            compress_weight: Matrix::glorot(d_model, c, &mut rng),
            compress_bias: Matrix::zeros(1, c),
            lstm: [LstmLayer::new(c, h, &mut rng), LstmLayer::new(h, h, &mut rng)],
            heads: (0..num_layers)
                .map(|_| Head { weight: Matrix::glorot(h, num_experts, &mut rng), bias: Matrix::zeros(1, num_experts) })
                .collect(),
        })
    }

    /// Reassembles a network from tensors, checking shapes against `config`.
    pub fn from_parts(
        config: PredictorConfig,
        compress_weight: Matrix,
        compress_bias: Matrix,
        lstm: [LstmLayer; 2],
        heads: Vec<Head>,
    ) -> Result<Self> {
        ensure(!heads.is_empty(), || "predictor needs at least one head".into())?;
        let k = heads[0].weight.cols();
        let net = Self { config, compress_weight, compress_bias, lstm, heads };
        let template = Self::new(config, net.d_model(), net.heads.len(), k)?;
        for ((name, a), b) in net.tensor_names().iter().zip(net.tensors()).zip(template.tensors()) {
            ensure(a.rows() == b.rows() && a.cols() == b.cols(), || {
                alloc::format!("{name}: {}x{} expected {}x{}", a.rows(), a.cols(), b.rows(), b.cols())
            })?;
            ensure(a.is_finite(), || alloc::format!("{name} has non-finite entries"))?;
        }
        Ok(net)
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn d_model(&self) -> usize {
        self.compress_weight.rows()
    }

    pub fn num_layers(&self) -> usize {
        self.heads.len()
    }

    pub fn num_experts(&self) -> usize {
        self.heads[0].weight.cols()
    }

    pub(crate) fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            config: self.config,
            compress_weight: z(&self.compress_weight),
            compress_bias: z(&self.compress_bias),
            lstm: [self.lstm[0].zeros_like(), self.lstm[1].zeros_like()],
            heads: self.heads.iter().map(|h| Head { weight: z(&h.weight), bias: z(&h.bias) }).collect(),
        }
    }

    pub(crate) fn forward_cached(&self, embeddings: &Matrix) -> Result<(PredictorOutput, PredictorCache)> {
        ensure(embeddings.rows() >= 1, || "predictor input sequence is empty".into())?;
        ensure(embeddings.cols() == self.d_model(), || {
            alloc::format!("predictor expects width {}, got {}", self.d_model(), embeddings.cols())
        })?;
        let n = embeddings.rows();
        let mut u = Matrix::zeros(n, self.config.compress_dim);
        for t in 0..n {
            self.compress_weight.vec_mat_into(embeddings.row(t), u.row_mut(t));
            for (v, b) in u.row_mut(t).iter_mut().zip(self.compress_bias.data()) {
                *v += b;
            }
        }
        let l1 = self.lstm[0].forward(&u);
        let l2 = self.lstm[1].forward(&l1.hidden);
        let h = &l2.hidden;
        let hs = h.cols();
        let mut attention = Matrix::zeros(n, n);
        for t in 0..n {
            let row = attention.row_mut(t);
            for (s, r) in row.iter_mut().enumerate() {
                *r = crate::numkit::matrix::dot(h.row(t), h.row(s));
            }
            sparsemax_in_place(row);
        }
        let mut residual = h.clone();
        for t in 0..n {
            for s in 0..n {
                let w = attention.get(t, s);
                if w != 0.0 {
                    let (src, dst) = (h.row(s).to_vec(), residual.row_mut(t));
                    for (d, v) in dst.iter_mut().zip(&src) {
                        *d += w * v;
                    }
                }
            }
        }
        debug_assert_eq!(residual.cols(), hs);
        let logits = self
            .heads
            .iter()
            .map(|head| {
                let mut out = Matrix::zeros(n, head.weight.cols());
                for t in 0..n {
                    head.weight.vec_mat_into(residual.row(t), out.row_mut(t));
                    for (o, b) in out.row_mut(t).iter_mut().zip(head.bias.data()) {
                        *o += b;
                    }
                }
                out
            })
            .collect();
        let out = PredictorOutput { logits, attention: attention.clone() };
        Ok((out, PredictorCache { u, l1, l2, attention, residual }))
    }

    /// Per-layer, per-token expert logits for one embedded sequence.
    pub fn forward(&self, embeddings: &Matrix) -> Result<PredictorOutput> {
        Ok(self.forward_cached(embeddings)?.0)
    }

    /// Accumulates parameter gradients for one sequence given `dlogits[layer]`
    /// (`n × K`).
    pub(crate) fn backward(
        &self,
        embeddings: &Matrix,
        cache: &PredictorCache,
        dlogits: &[Matrix],
        grad: &mut PredictorNet,
    ) {
        let h = &cache.l2.hidden;
        let n = h.rows();
        let hs = h.cols();
        let mut dr = Matrix::zeros(n, hs);
        for ((head, ghead), dl) in self.heads.iter().zip(grad.heads.iter_mut()).zip(dlogits) {
            for t in 0..n {
                ghead.weight.add_outer(cache.residual.row(t), dl.row(t), 1.0);
                for (b, g) in ghead.bias.data_mut().iter_mut().zip(dl.row(t)) {
                    *b += g;
                }
                head.weight.mat_vec_acc(dl.row(t), dr.row_mut(t));
            }
        }
        // residual: dh = dr; context c_t = Σ_s w_ts h_s with dc = dr
        let mut dh = dr.clone();
        for t in 0..n {
            let dc = dr.row(t);
            let w = cache.attention.row(t);
            let dw: Vec<f64> = (0..n).map(|s| crate::numkit::matrix::dot(dc, h.row(s))).collect();
            for (s, &ws) in w.iter().enumerate() {
                if ws != 0.0 {
                    dh.add_to_row(s, dc, ws);
                }
            }
            let dscore = sparsemax_backward(w, &dw);
            for (s, &g) in dscore.iter().enumerate() {
                if g != 0.0 {
                    dh.add_to_row(t, h.row(s).to_vec().as_slice(), g);
                    dh.add_to_row(s, h.row(t).to_vec().as_slice(), g);
                }
            }
        }
        let [g1, g2] = &mut grad.lstm;
        let dh1 = self.lstm[1].backward(&cache.l1.hidden, &cache.l2, &dh, g2);
        let du = self.lstm[0].backward(&cache.u, &cache.l1, &dh1, g1);
        for t in 0..n {
            grad.compress_weight.add_outer(embeddings.row(t), du.row(t), 1.0);
            for (b, g) in grad.compress_bias.data_mut().iter_mut().zip(du.row(t)) {
                *b += g;
            }
        }
    }
}

impl ParamSet for PredictorNet {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.compress_weight, &self.compress_bias];
        for l in &self.lstm {
            out.extend([&l.wx, &l.wh, &l.bias]);
        }
        for h in &self.heads {
            out.extend([&h.weight, &h.bias]);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.compress_weight, &mut self.compress_bias];
        for l in &mut self.lstm {
            out.extend([&mut l.wx, &mut l.wh, &mut l.bias]);
        }
        for h in &mut self.heads {
            out.extend([&mut h.weight, &mut h.bias]);
        }
        out
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut out = vec![String::from("compress.weight"), String::from("compress.bias")];
        for i in 0..2 {
            for n in ["wx", "wh", "bias"] {
                out.push(alloc::format!("lstm.{i}.{n}"));
            }
        }
        for l in 0..self.heads.len() {
            out.push(alloc::format!("heads.{l}.weight"));
            out.push(alloc::format!("heads.{l}.bias"));
        }
        out
    }
}

#[cfg(test)]
mod tests;
