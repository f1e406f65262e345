use sida::config::{fraction_of_experts, Config, SEED_ENV};
use sida::report::{Prefetch, ServeMode};
use sida_core::model::MoEConfig;

#[test]
fn example_file_spells_out_the_defaults() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../sida.example.toml")).unwrap();
    assert_eq!(Config::from_toml(&text).unwrap(), Config::default());
}

#[test]
fn toml_round_trip() {
    let mut c = Config { seed: 99, ..Config::default() };
    c.serve.mode = ServeMode::Standard;
    c.serve.prefetch = Prefetch::Batch;
    c.serve.budget_fraction = Some(0.25);
    c.predictor.top_t = Some(7);
    assert_eq!(Config::from_toml(&c.to_toml().unwrap()).unwrap(), c);
}

#[test]
fn partial_files_fill_in_defaults_and_unknown_keys_fail() {
    let c = Config::from_toml("seed = 3\n[serve]\neval_top_k = 3\n").unwrap();
    assert_eq!(c.seed, 3);
    assert_eq!(c.serve.eval_top_k, 3);
    assert_eq!(c.model, Config::default().model);
    assert!(Config::from_toml("[serve]\nbudget = 1\n").is_err());
    assert!(Config::from_toml("[serve]\nmode = \"fast\"\n").is_err());
}

#[test]
fn seed_variable_overrides_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, "seed = 5\n").unwrap();
    std::env::set_var(SEED_ENV, "1234");
    let loaded = Config::load(Some(&path));
    std::env::set_var(SEED_ENV, "not a number");
    let bad = Config::load(Some(&path));
    std::env::remove_var(SEED_ENV);
    let c = loaded.unwrap();
    assert_eq!(c.seed, 1234);
    assert_eq!(c.corpus_spec().seed, 1234);
    assert_eq!(c.train_config().seed, 1234);
    assert_eq!(c.predictor_config(8).seed, 1234);
    assert!(bad.is_err());
    assert_eq!(Config::load(Some(&path)).unwrap().seed, 5);
}

#[test]
fn budgets_resolve_in_priority_order() {
    let model = MoEConfig::default();
    let all = model.total_expert_bytes();
    let mut c = Config::default();
    assert_eq!(c.budget_bytes(&model).unwrap(), u64::MAX);
    c.serve.budget_fraction = Some(0.25);
    assert_eq!(c.budget_bytes(&model).unwrap(), all / 4);
    c.serve.budget_bytes = Some(123);
    assert_eq!(c.budget_bytes(&model).unwrap(), 123);
    // 64 expert slots: a third is 21 whole experts
    assert_eq!(fraction_of_experts(&model, 1.0 / 3.0).unwrap(), 21 * model.expert_bytes());
    assert!(fraction_of_experts(&model, 0.0).is_err());
    assert!(fraction_of_experts(&model, f64::NAN).is_err());
}

#[test]
fn serve_options_carry_the_section() {
    let mut c = Config::default();
    c.serve.eval_top_k = 3;
    c.serve.selection_overhead_s = 0.001;
    c.serve.budget_bytes = Some(1 << 20);
    let o = c.serve_options(&MoEConfig::default()).unwrap();
    assert_eq!(o.eval_top_k, 3);
    assert_eq!(o.budget.fast_tier_bytes, 1 << 20);
    assert_eq!(o.selection_overhead.as_secs_f64(), 0.001);
    c.serve.selection_overhead_s = -1.0;
    assert!(c.serve_options(&MoEConfig::default()).is_err());
}
