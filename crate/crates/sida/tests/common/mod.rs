#![allow(dead_code)]

use sida_core::corpus::{generate_corpus, into_batches, CorpusSpec, LabeledSequence};
use sida_core::model::{MoEConfig, MoEModel, SequenceBatch};
use sida_core::predictor::{PredictorConfig, PredictorNet};

pub fn tiny_config(num_experts: usize) -> MoEConfig {
    MoEConfig {
        vocab_size: 40,
        d_model: 8,
        num_layers: 2,
        num_experts,
        expert_hidden: 12,
        max_seq_len: 16,
        routing_k: 1,
        num_classes: 2,
    }
}

pub fn tiny_model(num_experts: usize, seed: u64) -> MoEModel {
    MoEModel::new(tiny_config(num_experts), seed).unwrap()
}

pub fn tiny_predictor(model: &MoEModel, seed: u64) -> PredictorNet {
    let c = model.config();
    let config = PredictorConfig { compress_dim: 6, lstm_hidden: 6, seed, ..PredictorConfig::for_experts(c.num_experts) };
    PredictorNet::new(config, c.d_model, c.num_layers, c.num_experts).unwrap()
}

pub fn tiny_corpus(n: usize, seed: u64) -> Vec<LabeledSequence> {
    generate_corpus(&CorpusSpec {
        vocab_size: 40,
        num_sequences: n,
        min_len: 2,
        max_len: 16,
        num_latent: 8,
        seed,
        ..CorpusSpec::default()
    })
    .unwrap()
}

pub fn tiny_stream(batches: usize, batch_size: usize, seed: u64) -> Vec<SequenceBatch> {
    into_batches(&tiny_corpus(batches * batch_size, seed), batch_size, 0)
}
