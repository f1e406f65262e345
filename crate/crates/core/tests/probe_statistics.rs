use std::collections::BTreeMap;

use proptest::prelude::*;
use sida_core::numkit::Rng;
use sida_core::probe::{
    corrupt_tokens, estimate_c, expected_change_prob, measure_p_hat, CorruptionMode, CriticalSetModel,
};

/// Counts of how many of the 6 two-subsets of 4 positions are corrupted.
#[test]
fn corrupted_subsets_are_uniform() {
    let tokens = [0u32, 1, 2, 3, 4];
    let mut rng = Rng::new(17);
    let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    let draws = 10_000;
    for _ in 0..draws {
        let out = corrupt_tokens(&tokens, 2, 0.4, 16, &mut rng).unwrap();
        let changed: Vec<usize> = (0..5).filter(|&j| out[j] != tokens[j]).collect();
        *counts.entry(changed).or_default() += 1;
    }
    assert_eq!(counts.len(), 6);
    let expected = draws as f64 / 6.0;
    let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 5 degrees of freedom, 0.1% upper tail
    assert!(chi2 < 20.515, "chi-square {chi2}");
}

#[test]
fn monte_carlo_matches_closed_form_on_grid() {
    let mut rng = Rng::new(23);
    let trials = 4000;
    for len in [8usize, 64] {
        for c in [0usize, 1, 2, 4] {
            let model = CriticalSetModel::planted(len, c, &mut rng).unwrap();
            let tokens: Vec<u32> = (0..len as u32).collect();
            for step in 1..=9 {
                let p = step as f64 / 10.0;
                let expected = expected_change_prob(len, c, p).unwrap();
                let i = rng.below(len);
                let got = measure_p_hat(&model, &tokens, i, p, trials, CorruptionMode::Token, 200, &mut rng).unwrap();
                let se = (expected * (1.0 - expected) / trials as f64).sqrt();
                assert!(
                    (got.p_hat - expected).abs() <= 3.0 * se + 1e-12,
                    "L={len} c={c} p={p}: {} vs {expected}",
                    got.p_hat
                );
            }
        }
    }
}

#[test]
fn planted_critical_count_is_recovered() {
    let mut rng = Rng::new(29);
    let len = 16;
    let grid: Vec<f64> = (1..=9).map(|s| s as f64 / 10.0).collect();
    let model = CriticalSetModel::planted(len, 2, &mut rng).unwrap();
    let tokens: Vec<u32> = (0..len as u32).collect();
    for i in 0..len {
        let curve: Vec<f64> = grid
            .iter()
            .map(|&p| measure_p_hat(&model, &tokens, i, p, 500, CorruptionMode::Token, 100, &mut rng).unwrap().p_hat)
            .collect();
        let c = estimate_c(&grid, &curve, len).unwrap();
        assert!((1..=3).contains(&c), "position {i}: ĉ = {c}");
    }
}

proptest! {
    #[test]
    fn change_probability_is_monotone(len in 2usize..80, c in 0usize..80, p in 0.01f64..0.99, dp in 0.0f64..0.5) {
        let c = c % len;
        let base = expected_change_prob(len, c, p).unwrap();
        let more_p = expected_change_prob(len, c, (p + dp).min(1.0)).unwrap();
        prop_assert!(more_p >= base - 1e-12);
        if c + 1 < len {
            prop_assert!(expected_change_prob(len, c + 1, p).unwrap() >= base - 1e-12);
        }
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn exact_curves_invert(len in 2usize..64, c in 0usize..64) {
        let c = c % len;
        let grid: Vec<f64> = (1..=9).map(|s| s as f64 / 10.0).collect();
        let curve: Vec<f64> = grid.iter().map(|&p| expected_change_prob(len, c, p).unwrap()).collect();
        let got = estimate_c(&grid, &curve, len).unwrap();
        // distinct c can share a curve when every grid point saturates
        let same: Vec<f64> = grid.iter().map(|&p| expected_change_prob(len, got, p).unwrap()).collect();
        prop_assert!(got <= c);
        prop_assert_eq!(same, curve);
    }
}
