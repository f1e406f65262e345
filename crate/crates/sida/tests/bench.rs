use sida::bench::{run_benchmark, BenchBundle, BUNDLE_SCHEMA};
use sida::config::Config;
use sida::report::ServeMode;

fn tiny() -> Config {
    let mut c = Config { seed: 3, ..Config::default() };
    c.corpus.vocab_size = 60;
    c.corpus.num_sequences = 60;
    c.corpus.max_len = 16;
    c.corpus.num_latent = 8;
    c.model.d_model = 8;
    c.model.expert_hidden = 8;
    c.model.max_seq_len = 16;
    c.train.epochs = 1;
    c.predictor.compress_dim = 4;
    c.predictor.lstm_hidden = 4;
    c.predictor.max_steps = 5;
    c.bench.experts = vec![4];
    c.bench.budget_fractions = vec![0.5, 1.0];
    c.bench.samples = 6;
    c.bench.length_buckets = vec![4, 16];
    c.bench.bucket_samples = 3;
    c.bench.overhead_repetitions = 2;
    c
}

fn validate(bundle: &BenchBundle) {
    let schema: serde_json::Value = serde_json::from_str(BUNDLE_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let value = serde_json::to_value(bundle).unwrap();
    let errors: Vec<String> = validator.iter_errors(&value).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
}

#[test]
fn tiny_grid_completes_and_validates() {
    let config = tiny();
    let bundle = run_benchmark(&config);
    assert!(bundle.complete, "{:?}", bundle.errors);
    validate(&bundle);
    assert_eq!(bundle.models.len(), 1);
    assert_eq!(bundle.cells.len(), 2 * 3);
    assert_eq!(bundle.overhead.len(), 1);
    assert_eq!(bundle.reduction_vs_length.len(), 2);
    for c in bundle.cells.iter().filter(|c| c.mode == ServeMode::Oracle) {
        assert_eq!(c.fidelity, Some(1.0));
        assert_eq!(c.hash_hit_rate, Some(1.0));
    }
    let dir = tempfile::tempdir().unwrap();
    bundle.write(dir.path()).unwrap();
    for f in ["bundle.json", "models.csv", "cells.csv", "overhead.csv", "reduction_vs_length.csv", "errors.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let back: BenchBundle = serde_json::from_str(&std::fs::read_to_string(dir.path().join("bundle.json")).unwrap()).unwrap();
    assert_eq!(back, bundle);
}

#[test]
fn failing_stages_leave_a_partial_bundle() {
    let mut config = tiny();
    // one bucket longer than the model accepts, one budget below a layer's working set
    config.bench.length_buckets = vec![4, 40];
    config.bench.budget_fractions = vec![0.01, 1.0];
    let bundle = run_benchmark(&config);
    assert!(!bundle.complete);
    validate(&bundle);
    assert!(bundle.errors.iter().any(|e| e.stage.contains("L=40")), "{:?}", bundle.errors);
    assert!(bundle.errors.iter().any(|e| e.stage.contains("budget=0.01")), "{:?}", bundle.errors);
    assert_eq!(bundle.reduction_vs_length.len(), 1);
    assert_eq!(bundle.cells.len(), 3);
}
