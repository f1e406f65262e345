use sida_core::corpus::LabeledSequence;
use sida_core::model::{MoEConfig, MoEModel, Routing, SequenceBatch};
use sida_core::numkit::{sparsemax, ParamSet, Rng};
use sida_core::predictor::{
    build_hash_table, hash_hit_rate, oracle_hash_table, predictor_objective, train_predictor, ExpertHashTable,
    PredictorConfig, PredictorNet, TeacherTargets,
};

/// Two-expert teacher without mixing or position signal: every routing
/// decision is a function of the token id alone.
fn token_routed_teacher() -> MoEModel {
    let config = MoEConfig {
        vocab_size: 40,
        d_model: 12,
        num_layers: 2,
        num_experts: 2,
        expert_hidden: 16,
        max_seq_len: 12,
        ..MoEConfig::default()
    };
    let mut model = MoEModel::new(config, 5).unwrap();
    model.position_embeddings.fill(0.0);
    for block in &mut model.blocks {
        block.wo.fill(0.0);
    }
    model
}

fn random_sequences(n: usize, vocab: u32, seed: u64) -> Vec<LabeledSequence> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            let len = 4 + rng.below(9);
            LabeledSequence {
                tokens: (0..len).map(|_| rng.below(vocab as usize) as u32).collect(),
                label: 0,
                latents: vec![0; len],
            }
        })
        .collect()
}

fn quick_config() -> PredictorConfig {
    PredictorConfig { compress_dim: 8, lstm_hidden: 12, max_steps: 400, ..PredictorConfig::for_experts(2) }
}

#[test]
fn token_determined_routing_is_learned() {
    let teacher = token_routed_teacher();
    let train = random_sequences(300, 40, 1);
    let held = random_sequences(100, 40, 2);
    let (net, report) = train_predictor(quick_config(), &train, &held, &teacher).unwrap();
    assert!(report.heldout_top1 >= 0.99, "top-1 {}", report.heldout_top1);

    let batches: Vec<SequenceBatch> = held
        .chunks(10)
        .enumerate()
        .map(|(i, c)| SequenceBatch::new(i as u64, c.iter().map(|s| s.tokens.clone()).collect(), None))
        .collect();
    let tables: Vec<ExpertHashTable> = batches.iter().map(|b| build_hash_table(&net, &teacher, b, 1).unwrap()).collect();
    let traces: Vec<_> = batches.iter().map(|b| teacher.forward(b, Routing::Router).unwrap().trace).collect();
    assert!(hash_hit_rate(&tables, &traces, 1).unwrap() >= 0.99);
    assert_eq!(hash_hit_rate(&tables, &traces, 2).unwrap(), hash_hit_rate(&tables, &traces, 1).unwrap());
}

#[test]
fn training_is_bitwise_reproducible() {
    let teacher = token_routed_teacher();
    let train = random_sequences(40, 40, 3);
    let cfg = PredictorConfig { max_steps: 30, ..quick_config() };
    let (a, ra) = train_predictor(cfg, &train, &[], &teacher).unwrap();
    let (b, rb) = train_predictor(cfg, &train, &[], &teacher).unwrap();
    assert_eq!(a.flatten(), b.flatten());
    assert_eq!(ra, rb);
    assert_eq!(ra.top_t, 2);
}

#[test]
fn loss_falls_over_first_steps() {
    // full-objective loss on a fixed probe set after 0, 50, ..., 200 steps
    let config = MoEConfig { num_experts: 8, vocab_size: 64, max_seq_len: 16, ..MoEConfig::default() };
    let teacher = MoEModel::new(config, 2).unwrap();
    let train = random_sequences(64, 64, 4);
    let probe: Vec<TeacherTargets> =
        train.iter().take(16).map(|s| TeacherTargets::from_model(&teacher, &s.tokens).unwrap()).collect();
    let refs: Vec<&TeacherTargets> = probe.iter().collect();
    let base = PredictorConfig::for_experts(8);
    let mut last = f64::INFINITY;
    for steps in [0, 50, 100, 150, 200] {
        let (net, _) = train_predictor(PredictorConfig { max_steps: steps, ..base }, &train, &[], &teacher).unwrap();
        let (loss, _) = predictor_objective(&net, &refs, base.lambda, base.top_t).unwrap();
        assert!(loss.total < last, "{steps} steps: {} !< {last}", loss.total);
        last = loss.total;
    }
}

#[test]
fn constant_prediction_hits_one_in_k() {
    // balanced teacher: token t routes to expert t mod K
    let k = 8;
    let entries_for = |n: usize, f: &dyn Fn(usize) -> usize| -> Vec<Vec<(usize, f64)>> {
        (0..n).map(|t| vec![(f(t), 1.0)]).collect()
    };
    let n = 800;
    let teacher_table = ExpertHashTable { batch_id: 0, num_experts: k, entries: vec![entries_for(n, &|t| t % k)] };
    let constant = ExpertHashTable { batch_id: 0, num_experts: k, entries: vec![entries_for(n, &|_| 3)] };
    let trace = sida_core::model::ActivationTrace {
        num_experts: k,
        layers: vec![teacher_table.entries[0]
            .iter()
            .map(|e| sida_core::model::TraceEntry { probs: None, selection: e.clone() })
            .collect()],
    };
    let rate = hash_hit_rate(&[constant], std::slice::from_ref(&trace), 1).unwrap();
    assert_eq!(rate, 1.0 / k as f64);
    assert_eq!(hash_hit_rate(&[teacher_table], &[trace], 1).unwrap(), 1.0);
}

#[test]
fn separated_scores_give_one_hot_attention() {
    let mut rng = Rng::new(8);
    for _ in 0..500 {
        let n = 2 + rng.below(10);
        let mut z: Vec<f64> = (0..n).map(|_| rng.uniform_range(-3.0, 3.0)).collect();
        let top = rng.below(n);
        let runner_up = z.iter().enumerate().filter(|&(i, _)| i != top).map(|(_, &v)| v).fold(f64::MIN, f64::max);
        z[top] = runner_up + 1.0 + rng.uniform();
        let p = sparsemax(&z).unwrap();
        for (i, &v) in p.as_slice().iter().enumerate() {
            assert_eq!(v, if i == top { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn predictor_reads_embeddings_only() {
    // two models sharing input embeddings but not experts give the same table
    let a = token_routed_teacher();
    let mut b = a.clone();
    for block in &mut b.blocks {
        block.router.fill(0.3);
        for e in &mut block.experts {
            e.w1.fill(-1.0);
        }
    }
    let net = PredictorNet::new(quick_config(), 12, 2, 2).unwrap();
    let batch = SequenceBatch::new(4, vec![vec![1, 2, 3], vec![9, 8]], None);
    assert_eq!(build_hash_table(&net, &a, &batch, 2).unwrap(), build_hash_table(&net, &b, &batch, 2).unwrap());
    let oracle = oracle_hash_table(&a, &batch).unwrap();
    assert_eq!(oracle.batch_id, 4);
}

#[test]
fn lightweight_at_default_config() {
    let config = MoEConfig { num_experts: 32, ..MoEConfig::default() };
    let net = PredictorNet::new(PredictorConfig::for_experts(32), config.d_model, config.num_layers, 32).unwrap();
    let bytes = (net.param_count() * 8) as f64;
    assert!(bytes < 0.05 * config.total_expert_bytes() as f64);
}
