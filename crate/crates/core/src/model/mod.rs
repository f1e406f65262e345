//! A desk-scale stacked MoE classifier.
//!
//! Each block is single-head self-attention mixing followed by a switch-routed
//! MoE layer, both with residual connections:
//!
//! ```text
//! H  = X + softmax(X·Wq·(X·Wk)ᵀ / √d)·X·Wv·Wo
//! X' = H + Σ_{i∈I} α_i(H)·f_i(H)        α = softmax(W_rᵀ H), I = top-k(α)
//! ```
//!
//! Experts are two-layer ReLU MLPs. After the last block tokens are mean-pooled
//! and fed to a linear classifier head. There is no layer norm or dropout.
//!
//! Selected α values are the raw router probabilities; for top-1 routing they
//! are not renormalized to one.

mod grad;
mod sparsity;
mod train;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::ensure;
use crate::numkit::{softmax_in_place, Matrix, ParamSet, ProbVector, Rng};
use crate::{Error, Result};

pub use grad::{LossParts, MoEGradient};
pub use sparsity::{distinct_experts, sequence_sparsity};
pub use train::{load_balance_loss, train_moe, train_toy_moe, MoETrainConfig, MoETrainReport};

/// Shape of an [`MoEModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MoEConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub num_experts: usize,
    pub expert_hidden: usize,
    pub max_seq_len: usize,
    pub routing_k: usize,
    pub num_classes: usize,
}

impl Default for MoEConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 64,
            num_layers: 2,
            num_experts: 32,
            expert_hidden: 128,
            max_seq_len: 64,
            routing_k: 1,
            num_classes: 2,
        }
    }
}

impl MoEConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("num_layers", self.num_layers),
            ("num_experts", self.num_experts),
            ("expert_hidden", self.expert_hidden),
            ("max_seq_len", self.max_seq_len),
            ("routing_k", self.routing_k),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in counts {
            ensure(v >= 1, || alloc::format!("{name} must be at least 1"))?;
        }
        ensure(self.routing_k <= self.num_experts, || {
            alloc::format!("routing_k {} exceeds num_experts {}", self.routing_k, self.num_experts)
        })
    }

    /// Parameter count of one expert.
    pub fn expert_params(&self) -> usize {
        2 * self.d_model * self.expert_hidden + self.expert_hidden + self.d_model
    }

    pub fn expert_bytes(&self) -> u64 {
        (self.expert_params() * core::mem::size_of::<f64>()) as u64
    }

    pub fn total_expert_bytes(&self) -> u64 {
        self.expert_bytes() * (self.num_experts * self.num_layers) as u64
    }
}

/// Two-layer ReLU MLP `d_model → hidden → d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl Expert {
    fn init(d: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            w1: Matrix::glorot(d, hidden, rng),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::glorot(hidden, d, rng),
            b2: Matrix::zeros(1, d),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            w1: Matrix::zeros(self.w1.rows(), self.w1.cols()),
            b1: Matrix::zeros(1, self.b1.cols()),
            w2: Matrix::zeros(self.w2.rows(), self.w2.cols()),
            b2: Matrix::zeros(1, self.b2.cols()),
        }
    }

    /// Returns `(relu hidden activations, output)`.
    pub fn forward_cached(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut hidden = self.w1.vec_mat(x);
        for (h, b) in hidden.iter_mut().zip(self.b1.data()) {
            *h = crate::numkit::relu(*h + b);
        }
        let mut out = self.w2.vec_mat(&hidden);
        for (o, b) in out.iter_mut().zip(self.b2.data()) {
            *o += b;
        }
        (hidden, out)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).1
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }
}

/// One mixing + MoE block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    /// `d_model × K` router.
    pub router: Matrix,
    pub experts: Vec<Expert>,
}

/// Softmax over `W_rᵀ x`.
pub fn router_scores(x: &[f64], router: &Matrix) -> Result<ProbVector> {
    ensure(x.len() == router.rows(), || {
        alloc::format!("router expects {} inputs, got {}", router.rows(), x.len())
    })?;
    ensure(router.cols() >= 1, || "router has no experts".into())?;
    let mut logits = router.vec_mat(x);
    softmax_in_place(&mut logits);
    Ok(ProbVector::new(logits).expect("softmax output is normalized"))
}

/// `Σ_{(i, α) ∈ selection} α·f_i(x)`. Only the selected experts are evaluated;
/// `evals`, when given, is incremented per evaluated expert.
pub fn moe_layer_forward(
    x: &[f64],
    selection: &[(usize, f64)],
    experts: &[Expert],
    mut evals: Option<&mut [u64]>,
) -> Result<Vec<f64>> {
    ensure(!selection.is_empty(), || "expert selection is empty".into())?;
    let mut out = vec![0.0; x.len()];
    for &(i, alpha) in selection {
        ensure(i < experts.len(), || alloc::format!("expert {i} out of range 0..{}", experts.len()))?;
        ensure(alpha >= 0.0 && alpha.is_finite(), || alloc::format!("alpha {alpha} for expert {i}"))?;
        let y = experts[i].forward(x);
        if let Some(counter) = evals.as_deref_mut() {
            counter[i] += 1;
        }
        for (o, v) in out.iter_mut().zip(&y) {
            *o += alpha * v;
        }
    }
    Ok(out)
}

/// Token sequences flowing through serving; the unit of work for both workers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceBatch {
    pub batch_id: u64,
    pub sequences: Vec<Vec<u32>>,
    pub labels: Option<Vec<usize>>,
}

impl SequenceBatch {
    pub fn new(batch_id: u64, sequences: Vec<Vec<u32>>, labels: Option<Vec<usize>>) -> Self {
        Self { batch_id, sequences, labels }
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.sequences.iter().map(Vec::len).collect()
    }

    pub fn num_tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// Start of each sequence in the batch's flattened token numbering.
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.sequences
            .iter()
            .map(|s| {
                let o = off;
                off += s.len();
                o
            })
            .collect()
    }

    pub fn validate(&self, config: &MoEConfig) -> Result<()> {
        ensure(!self.sequences.is_empty(), || "batch has no sequences".into())?;
        for (s, seq) in self.sequences.iter().enumerate() {
            ensure(!seq.is_empty() && seq.len() <= config.max_seq_len, || {
                alloc::format!("sequence {s} has length {} outside 1..={}", seq.len(), config.max_seq_len)
            })?;
            if let Some(&t) = seq.iter().find(|&&t| t as usize >= config.vocab_size) {
                return Err(crate::contract!("token {t} outside vocabulary of {}", config.vocab_size));
            }
        }
        if let Some(labels) = &self.labels {
            ensure(labels.len() == self.sequences.len(), || "one label per sequence".into())?;
        }
        Ok(())
    }
}

/// Source of precomputed `(expert, α)` selections keyed by `(layer, token)`,
/// where `token` is the flattened position within a batch.
pub trait ExpertSelections {
    fn selection(&self, layer: usize, token: usize) -> Option<&[(usize, f64)]>;
}

/// How the MoE layers pick experts during a forward pass.
#[derive(Clone, Copy)]
pub enum Routing<'a> {
    /// The model's own routers with top-`routing_k` selection.
    Router,
    /// Routers stay idle; selections and α come from an external table.
    External(&'a dyn ExpertSelections),
}

/// Routing decision for one `(layer, token)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    /// Full router distribution; `None` when selections were supplied externally.
    pub probs: Option<ProbVector>,
    /// Selected `(expert, α)` pairs, in selection order.
    pub selection: Vec<(usize, f64)>,
}

impl TraceEntry {
    pub fn top1(&self) -> usize {
        self.selection[0].0
    }
}

/// Per-layer, per-token routing record of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub num_experts: usize,
    /// `layers[l][token]` with tokens in flattened batch order.
    pub layers: Vec<Vec<TraceEntry>>,
}

impl ActivationTrace {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    pub fn entry(&self, layer: usize, token: usize) -> &TraceEntry {
        &self.layers[layer][token]
    }
}

impl ExpertSelections for ActivationTrace {
    fn selection(&self, layer: usize, token: usize) -> Option<&[(usize, f64)]> {
        self.layers.get(layer)?.get(token).map(|e| e.selection.as_slice())
    }
}

/// Output of [`MoEModel::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<Vec<f64>>,
    pub trace: ActivationTrace,
}

impl ForwardOutput {
    pub fn predictions(&self) -> Vec<usize> {
        self.logits.iter().map(|l| crate::numkit::argmax(l)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoEModel {
    config: MoEConfig,
    pub token_embeddings: Matrix,
    pub position_embeddings: Matrix,
    pub blocks: Vec<Block>,
    /// `d_model × num_classes` classifier.
    pub head: Matrix,
}

impl MoEModel {
    pub fn new(config: MoEConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(seed);
        let mut rng = root.split(0x6d6f65);
        let d = config.d_model;
        let token_embeddings = Matrix::uniform(config.vocab_size, d, 1.0, &mut rng);
        let position_embeddings = Matrix::uniform(config.max_seq_len, d, 0.1, &mut rng);
        let blocks = (0..config.num_layers)
            .map(|_| Block {
                wq: Matrix::glorot(d, d, &mut rng),
                wk: Matrix::glorot(d, d, &mut rng),
                wv: Matrix::glorot(d, d, &mut rng),
                wo: Matrix::uniform(d, d, 0.1 / libm::sqrt(d as f64), &mut rng),
                router: router_init(d, config.num_experts, &mut rng),
                experts: (0..config.num_experts)
                    .map(|_| Expert::init(d, config.expert_hidden, &mut rng))
                    .collect(),
            })
            .collect();
        let head = Matrix::glorot(d, config.num_classes, &mut rng);
        Ok(Self { config, token_embeddings, position_embeddings, blocks, head })
    }

    /// Builds a model from explicit tensors, checking every shape.
    pub fn from_parts(
        config: MoEConfig,
        token_embeddings: Matrix,
        position_embeddings: Matrix,
        blocks: Vec<Block>,
        head: Matrix,
    ) -> Result<Self> {
        let model = Self { config, token_embeddings, position_embeddings, blocks, head };
        let template = Self::zeros(config)?;
        let ours = model.tensors();
        let theirs = template.tensors();
        ensure(ours.len() == theirs.len(), || "wrong number of tensors".into())?;
        for ((name, a), b) in model.tensor_names().iter().zip(&ours).zip(&theirs) {
            ensure(a.rows() == b.rows() && a.cols() == b.cols(), || {
                alloc::format!("{name}: {}x{} expected {}x{}", a.rows(), a.cols(), b.rows(), b.cols())
            })?;
            ensure(a.is_finite(), || alloc::format!("{name} has non-finite entries"))?;
        }
        Ok(model)
    }

    /// All-zero model; also the gradient accumulator layout.
    pub fn zeros(config: MoEConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let expert = Expert {
            w1: Matrix::zeros(d, config.expert_hidden),
            b1: Matrix::zeros(1, config.expert_hidden),
            w2: Matrix::zeros(config.expert_hidden, d),
            b2: Matrix::zeros(1, d),
        };
        let blocks = (0..config.num_layers)
            .map(|_| Block {
                wq: Matrix::zeros(d, d),
                wk: Matrix::zeros(d, d),
                wv: Matrix::zeros(d, d),
                wo: Matrix::zeros(d, d),
                router: Matrix::zeros(d, config.num_experts),
                experts: vec![expert.clone(); config.num_experts],
            })
            .collect();
        Ok(Self {
            config,
            token_embeddings: Matrix::zeros(config.vocab_size, d),
            position_embeddings: Matrix::zeros(config.max_seq_len, d),
            blocks,
            head: Matrix::zeros(d, config.num_classes),
        })
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            token_embeddings: Matrix::zeros(self.token_embeddings.rows(), self.token_embeddings.cols()),
            position_embeddings: Matrix::zeros(
                self.position_embeddings.rows(),
                self.position_embeddings.cols(),
            ),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    wq: Matrix::zeros(b.wq.rows(), b.wq.cols()),
                    wk: Matrix::zeros(b.wk.rows(), b.wk.cols()),
                    wv: Matrix::zeros(b.wv.rows(), b.wv.cols()),
                    wo: Matrix::zeros(b.wo.rows(), b.wo.cols()),
                    router: Matrix::zeros(b.router.rows(), b.router.cols()),
                    experts: b.experts.iter().map(Expert::zeros_like).collect(),
                })
                .collect(),
            head: Matrix::zeros(self.head.rows(), self.head.cols()),
        }
    }

    pub fn config(&self) -> &MoEConfig {
        &self.config
    }

    /// Parameters outside the experts (embeddings, mixing, routers, head).
    pub fn non_expert_params(&self) -> usize {
        self.param_count()
            - self.config.expert_params() * self.config.num_experts * self.config.num_layers
    }

    /// Token plus position embeddings, `n × d_model`. This is all the
    /// activation predictor ever sees of the model.
    pub fn embed(&self, tokens: &[u32]) -> Result<Matrix> {
        ensure(!tokens.is_empty() && tokens.len() <= self.config.max_seq_len, || {
            alloc::format!("sequence length {} outside 1..={}", tokens.len(), self.config.max_seq_len)
        })?;
        let d = self.config.d_model;
        let mut x = Matrix::zeros(tokens.len(), d);
        for (t, &tok) in tokens.iter().enumerate() {
            ensure((tok as usize) < self.config.vocab_size, || {
                alloc::format!("token {tok} outside vocabulary of {}", self.config.vocab_size)
            })?;
            let row = x.row_mut(t);
            for ((r, e), p) in row
                .iter_mut()
                .zip(self.token_embeddings.row(tok as usize))
                .zip(self.position_embeddings.row(t))
            {
                *r = e + p;
            }
        }
        Ok(x)
    }

    /// Self-attention mixing of block `layer` including its residual.
    pub fn mix(&self, layer: usize, x: &Matrix) -> Matrix {
        self.mix_cached(layer, x).h
    }

    pub(crate) fn mix_cached(&self, layer: usize, x: &Matrix) -> MixCache {
        let block = &self.blocks[layer];
        let n = x.rows();
        let d = self.config.d_model;
        let mut q = Matrix::zeros(n, d);
        let mut k = Matrix::zeros(n, d);
        let mut v = Matrix::zeros(n, d);
        for t in 0..n {
            block.wq.vec_mat_into(x.row(t), q.row_mut(t));
            block.wk.vec_mat_into(x.row(t), k.row_mut(t));
            block.wv.vec_mat_into(x.row(t), v.row_mut(t));
        }
        let scale = 1.0 / libm::sqrt(d as f64);
        let mut a = Matrix::zeros(n, n);
        for t in 0..n {
            let row = a.row_mut(t);
            for (s, r) in row.iter_mut().enumerate() {
                *r = crate::numkit::matrix::dot(q.row(t), k.row(s)) * scale;
            }
            softmax_in_place(row);
        }
        let mut m = Matrix::zeros(n, d);
        for t in 0..n {
            let weights = a.row(t).to_vec();
            let out = m.row_mut(t);
            for (s, &w) in weights.iter().enumerate() {
                for (o, &vv) in out.iter_mut().zip(v.row(s)) {
                    *o += w * vv;
                }
            }
        }
        let mut h = x.clone();
        let mut o = vec![0.0; d];
        for t in 0..n {
            block.wo.vec_mat_into(m.row(t), &mut o);
            for (hv, ov) in h.row_mut(t).iter_mut().zip(&o) {
                *hv += ov;
            }
        }
        MixCache { q, k, v, a, m, h }
    }

    /// Router distribution of block `layer` for one mixed token.
    pub fn router_probs(&self, layer: usize, h: &[f64]) -> Vec<f64> {
        let mut logits = self.blocks[layer].router.vec_mat(h);
        softmax_in_place(&mut logits);
        logits
    }

    /// Top-`routing_k` selection with raw router probabilities as α.
    pub fn select(&self, probs: &[f64]) -> Vec<(usize, f64)> {
        crate::numkit::select::topk_unchecked(probs, self.config.routing_k)
            .into_iter()
            .map(|i| (i, probs[i]))
            .collect()
    }

    /// Applies block `layer`'s MoE layer (with residual) to mixed tokens `h`.
    pub fn apply_experts(
        &self,
        layer: usize,
        h: &Matrix,
        selections: &[&[(usize, f64)]],
        mut evals: Option<&mut [u64]>,
    ) -> Result<Matrix> {
        ensure(selections.len() == h.rows(), || "one selection per token".into())?;
        let experts = &self.blocks[layer].experts;
        let mut out = h.clone();
        for (t, sel) in selections.iter().enumerate() {
            let y = moe_layer_forward(h.row(t), sel, experts, evals.as_deref_mut())?;
            for (o, v) in out.row_mut(t).iter_mut().zip(&y) {
                *o += v;
            }
        }
        Ok(out)
    }

    /// Mean-pool then classifier head.
    pub fn classify(&self, x: &Matrix) -> Vec<f64> {
        let pooled = mean_rows(x);
        self.head.vec_mat(&pooled)
    }

    /// Embeds every sequence of `batch` and positions it before block 0.
    pub fn begin(&self, batch: &SequenceBatch) -> Result<LayerState> {
        batch.validate(&self.config)?;
        let states = batch.sequences.iter().map(|s| self.embed(s)).collect::<Result<Vec<_>>>()?;
        Ok(LayerState { states, offsets: batch.offsets(), next_layer: 0 })
    }

    /// Self-attention mixing of the next block for every sequence.
    pub fn mix_next(&self, state: &LayerState) -> Result<MixedLayer> {
        let layer = state.next_layer;
        ensure(layer < self.config.num_layers, || "all layers already applied".into())?;
        Ok(MixedLayer { layer, h: state.states.iter().map(|x| self.mix(layer, x)).collect() })
    }

    /// Expert choices for every mixed token, in flattened batch order.
    pub fn select_layer(&self, mixed: &MixedLayer, state: &LayerState, routing: Routing<'_>) -> Result<Vec<TraceEntry>> {
        let layer = mixed.layer;
        let mut entries = Vec::with_capacity(state.num_tokens());
        for (h, &off) in mixed.h.iter().zip(&state.offsets) {
            for t in 0..h.rows() {
                entries.push(match routing {
                    Routing::Router => {
                        let probs = self.router_probs(layer, h.row(t));
                        let selection = self.select(&probs);
                        TraceEntry { probs: Some(ProbVector::from_normalized(probs)), selection }
                    }
                    Routing::External(table) => {
                        let sel = table
                            .selection(layer, off + t)
                            .ok_or(Error::MissingHashEntry { layer, token: off + t })?;
                        TraceEntry { probs: None, selection: sel.to_vec() }
                    }
                });
            }
        }
        Ok(entries)
    }

    /// Applies the MoE layer of `mixed` with the given selections and
    /// advances `state` past that block.
    pub fn apply_layer(
        &self,
        state: &mut LayerState,
        mixed: MixedLayer,
        entries: &[TraceEntry],
        mut evals: Option<&mut [u64]>,
    ) -> Result<()> {
        ensure(mixed.layer == state.next_layer, || "mixed layer does not follow the state".into())?;
        ensure(entries.len() == state.num_tokens(), || "one selection per token".into())?;
        for ((x, h), &off) in state.states.iter_mut().zip(&mixed.h).zip(&state.offsets) {
            let sels: Vec<&[(usize, f64)]> =
                entries[off..off + h.rows()].iter().map(|e| e.selection.as_slice()).collect();
            *x = self.apply_experts(mixed.layer, h, &sels, evals.as_deref_mut())?;
        }
        state.next_layer += 1;
        Ok(())
    }

    /// Classifier logits once every block has been applied.
    pub fn finish(&self, state: &LayerState) -> Result<Vec<Vec<f64>>> {
        ensure(state.next_layer == self.config.num_layers, || {
            alloc::format!("{} of {} layers applied", state.next_layer, self.config.num_layers)
        })?;
        Ok(state.states.iter().map(|x| self.classify(x)).collect())
    }

    /// Runs every sequence of `batch` and records the routing trace.
    pub fn forward(&self, batch: &SequenceBatch, routing: Routing<'_>) -> Result<ForwardOutput> {
        let mut state = self.begin(batch)?;
        let mut layers = Vec::with_capacity(self.config.num_layers);
        for _ in 0..self.config.num_layers {
            let mixed = self.mix_next(&state)?;
            let entries = self.select_layer(&mixed, &state, routing)?;
            self.apply_layer(&mut state, mixed, &entries, None)?;
            layers.push(entries);
        }
        let logits = self.finish(&state)?;
        Ok(ForwardOutput { logits, trace: ActivationTrace { num_experts: self.config.num_experts, layers } })
    }

    /// Router-mode top-1 expert of every token at `layer` for one sequence.
    pub fn top1_at_layer(&self, tokens: &[u32], layer: usize) -> Result<Vec<usize>> {
        ensure(layer < self.config.num_layers, || alloc::format!("layer {layer} out of range"))?;
        let mut x = self.embed(tokens)?;
        for l in 0..=layer {
            let h = self.mix(l, &x);
            let sels: Vec<Vec<(usize, f64)>> =
                (0..tokens.len()).map(|t| self.select(&self.router_probs(l, h.row(t)))).collect();
            if l == layer {
                return Ok(sels.iter().map(|s| s[0].0).collect());
            }
            let refs: Vec<&[(usize, f64)]> = sels.iter().map(Vec::as_slice).collect();
            x = self.apply_experts(l, &h, &refs, None)?;
        }
        unreachable!()
    }
}

/// Router weights start at four times the Glorot range so that initial
/// routing is decisive and driven by the token embedding.
pub const ROUTER_INIT_GAIN: f64 = 4.0;

fn router_init(d: usize, k: usize, rng: &mut Rng) -> Matrix {
    let scale = ROUTER_INIT_GAIN * libm::sqrt(6.0 / (d + k) as f64);
    Matrix::uniform(d, k, scale, rng)
}

/// Per-sequence hidden states between blocks of a layer-by-layer forward pass.
#[derive(Debug, Clone)]
pub struct LayerState {
    states: Vec<Matrix>,
    offsets: Vec<usize>,
    next_layer: usize,
}

impl LayerState {
    /// Index of the block that runs next.
    pub fn next_layer(&self) -> usize {
        self.next_layer
    }

    pub fn num_tokens(&self) -> usize {
        self.states.iter().map(Matrix::rows).sum()
    }
}

/// Mixed tokens of one block, waiting for their experts.
#[derive(Debug, Clone)]
pub struct MixedLayer {
    layer: usize,
    h: Vec<Matrix>,
}

impl MixedLayer {
    pub fn layer(&self) -> usize {
        self.layer
    }
}

pub(crate) struct MixCache {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub a: Matrix,
    pub m: Matrix,
    pub h: Matrix,
}

pub(crate) fn mean_rows(x: &Matrix) -> Vec<f64> {
    let mut pooled = vec![0.0; x.cols()];
    for t in 0..x.rows() {
        for (p, v) in pooled.iter_mut().zip(x.row(t)) {
            *p += v;
        }
    }
    let inv = 1.0 / x.rows() as f64;
    pooled.iter_mut().for_each(|p| *p *= inv);
    pooled
}

impl ParamSet for MoEModel {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.token_embeddings, &self.position_embeddings];
        for b in &self.blocks {
            out.extend([&b.wq, &b.wk, &b.wv, &b.wo, &b.router]);
            for e in &b.experts {
                out.extend([&e.w1, &e.b1, &e.w2, &e.b2]);
            }
        }
        out.push(&self.head);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.token_embeddings, &mut self.position_embeddings];
        for b in &mut self.blocks {
            out.extend([&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.router]);
            for e in &mut b.experts {
                out.extend([&mut e.w1, &mut e.b1, &mut e.w2, &mut e.b2]);
            }
        }
        out.push(&mut self.head);
        out
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut out = vec![String::from("token_embeddings"), String::from("position_embeddings")];
        for (l, b) in self.blocks.iter().enumerate() {
            for n in ["wq", "wk", "wv", "wo", "router"] {
                out.push(alloc::format!("blocks.{l}.{n}"));
            }
            for e in 0..b.experts.len() {
                for n in ["w1", "b1", "w2", "b2"] {
                    out.push(alloc::format!("blocks.{l}.experts.{e}.{n}"));
                }
            }
        }
        out.push(String::from("head"));
        out
    }
}
