//! Synthetic labeled corpus with planted expert structure.
//!
//! Every token id `v` has a latent expert affinity `v mod num_latent`. A
//! sequence draws a small topic set of latent experts; each position picks a
//! latent `z` from that set and then, with probability `beta`, emits a token
//! whose affinity is `z` (Zipf-ranked within that cluster), otherwise a token
//! drawn Zipf from the whole vocabulary. The label is the majority class over
//! the positions' latents, where latent `z` belongs to class
//! `z mod num_classes`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::ensure;
use crate::model::SequenceBatch;
use crate::numkit::Rng;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub num_sequences: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub num_classes: usize,
    /// Number of latent experts tokens are affiliated with.
    pub num_latent: usize,
    /// Latent experts active in one sequence.
    pub topics_per_sequence: usize,
    /// Probability that an emitted token's affinity equals its position's latent.
    pub beta: f64,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            num_sequences: 2000,
            min_len: 8,
            max_len: 64,
            num_classes: 2,
            num_latent: 32,
            topics_per_sequence: 3,
            beta: 0.9,
            zipf_exponent: 1.0,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        ensure(self.vocab_size >= self.num_latent && self.num_latent >= 1, || {
            "need 1 <= num_latent <= vocab_size".into()
        })?;
        ensure(self.min_len >= 1 && self.min_len <= self.max_len, || "need 1 <= min_len <= max_len".into())?;
        ensure(self.num_classes >= 1, || "need at least one class".into())?;
        ensure(self.topics_per_sequence >= 1 && self.topics_per_sequence <= self.num_latent, || {
            "topics_per_sequence must lie in 1..=num_latent".into()
        })?;
        ensure((0.0..=1.0).contains(&self.beta), || "beta must lie in [0, 1]".into())?;
        ensure(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite(), || "bad zipf exponent".into())
    }

    pub fn affinity(&self, token: u32) -> usize {
        token as usize % self.num_latent
    }

    pub fn class_of_latent(&self, latent: usize) -> usize {
        latent % self.num_classes
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSequence {
    pub tokens: Vec<u32>,
    pub label: usize,
    /// Latent expert of each position.
    pub latents: Vec<usize>,
}

fn zipf_cumulative(n: usize, exponent: f64) -> Vec<f64> {
    let mut acc = 0.0;
    (0..n)
        .map(|r| {
            acc += 1.0 / libm::pow((r + 1) as f64, exponent);
            acc
        })
        .collect()
}

/// Deterministic corpus from `spec` alone.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<LabeledSequence>> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed).split(0x636f_7270);
    let global = zipf_cumulative(spec.vocab_size, spec.zipf_exponent);
    let cluster_sizes: Vec<usize> =
        (0..spec.num_latent).map(|z| (spec.vocab_size - z).div_ceil(spec.num_latent)).collect();
    let cluster_cdfs: Vec<Vec<f64>> =
        cluster_sizes.iter().map(|&n| zipf_cumulative(n, spec.zipf_exponent)).collect();

    let mut out = Vec::with_capacity(spec.num_sequences);
    for _ in 0..spec.num_sequences {
        let len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
        let topics = rng.sample_indices(spec.num_latent, spec.topics_per_sequence);
        let mut tokens = Vec::with_capacity(len);
        let mut latents = Vec::with_capacity(len);
        for _ in 0..len {
            let z = topics[rng.below(topics.len())];
            let token = if rng.bernoulli(spec.beta) {
                let rank = rng.weighted(&cluster_cdfs[z]);
                z + rank * spec.num_latent
            } else {
                rng.weighted(&global)
            };
            tokens.push(token as u32);
            latents.push(z);
        }
        let mut votes = vec![0usize; spec.num_classes];
        for &z in &latents {
            votes[spec.class_of_latent(z)] += 1;
        }
        let label = crate::numkit::argmax(&votes.iter().map(|&v| v as f64).collect::<Vec<_>>());
        out.push(LabeledSequence { tokens, label, latents });
    }
    Ok(out)
}

/// Splits off the last `heldout_fraction` of the corpus.
pub fn split_heldout(corpus: &[LabeledSequence], heldout_fraction: f64) -> (&[LabeledSequence], &[LabeledSequence]) {
    let cut = corpus.len() - libm::round(corpus.len() as f64 * heldout_fraction) as usize;
    corpus.split_at(cut)
}

/// Groups sequences into labeled batches with ids `first_id, first_id + 1, …`.
pub fn into_batches(corpus: &[LabeledSequence], batch_size: usize, first_id: u64) -> Vec<SequenceBatch> {
    corpus
        .chunks(batch_size.max(1))
        .enumerate()
        .map(|(i, chunk)| {
            SequenceBatch::new(
                first_id + i as u64,
                chunk.iter().map(|s| s.tokens.clone()).collect(),
                Some(chunk.iter().map(|s| s.label).collect()),
            )
        })
        .collect()
}
