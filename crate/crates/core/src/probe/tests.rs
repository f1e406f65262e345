use alloc::vec;
use alloc::vec::Vec;

use super::*;

#[test]
fn no_critical_tokens_never_change() {
    for len in 1..12 {
        for p in [0.05, 0.3, 0.5, 1.0] {
            assert_eq!(expected_change_prob(len, 0, p).unwrap(), 0.0);
        }
    }
}

#[test]
fn two_of_four_with_one_critical() {
    // subsets of size 2 from 4 positions, 3 of 6 avoid the critical one
    assert!((expected_change_prob(5, 1, 0.4).unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn everything_critical_always_changes() {
    for len in 2..10 {
        assert_eq!(expected_change_prob(len, len - 1, 1.0 / len as f64).unwrap(), 1.0);
    }
}

#[test]
fn domain_is_checked() {
    assert!(expected_change_prob(5, 5, 0.5).is_err());
    assert!(expected_change_prob(5, 1, 0.0).is_err());
    assert!(expected_change_prob(5, 1, 1.5).is_err());
}

#[test]
fn estimate_c_inverts_exact_curves() {
    let grid = [0.1, 0.2, 0.3, 0.5, 0.7];
    for c in 0..8 {
        let curve: Vec<f64> = grid.iter().map(|&p| expected_change_prob(20, c, p).unwrap()).collect();
        assert_eq!(estimate_c(&grid, &curve, 20).unwrap(), c);
    }
    assert_eq!(estimate_c(&grid, &[0.0; 5], 20).unwrap(), 0);
    assert!(estimate_c(&[0.5], &[0.1], 20).is_err());
}

#[test]
fn token_corruption_contract() {
    let tokens: Vec<u32> = (0..10).map(|t| t % 4).collect();
    let mut rng = Rng::new(3);
    for _ in 0..200 {
        let out = corrupt_tokens(&tokens, 2, 0.5, 6, &mut rng).unwrap();
        let diff: Vec<usize> = (0..10).filter(|&j| out[j] != tokens[j]).collect();
        assert_eq!(diff.len(), 5);
        assert!(!diff.contains(&2));
        for j in diff {
            assert_ne!(out[j], tokens[2]);
            assert!(out[j] < 6);
        }
    }
    let all = corrupt_tokens(&tokens, 0, 1.0, 6, &mut rng).unwrap();
    assert!((1..10).all(|j| all[j] != tokens[j]));
    assert!(corrupt_tokens(&tokens, 0, 0.5, 2, &mut rng).is_err());
    assert!(corrupt_tokens(&[1], 0, 0.5, 6, &mut rng).is_err());
}

#[test]
fn position_corruption_contract() {
    let tokens: Vec<u32> = (0..12).collect();
    let mut rng = Rng::new(4);
    for _ in 0..1000 {
        let PositionCorruption::Permuted(out) = corrupt_positions(&tokens, 5, 0.5, &mut rng).unwrap() else {
            panic!("distinct tokens can always be deranged")
        };
        assert_eq!(out[5], 5);
        let moved = (0..12).filter(|&j| out[j] != tokens[j]).count();
        assert_eq!(moved, 6);
        let mut sorted = out.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, tokens);
    }
    assert_eq!(corrupt_positions(&[7; 8], 0, 0.5, &mut rng).unwrap(), PositionCorruption::Skipped);
    assert!(corrupt_positions(&tokens, 0, 0.1, &mut rng).is_err());
}

#[test]
fn planted_model_reacts_only_to_its_critical_set() {
    let model = CriticalSetModel { critical: vec![vec![1], vec![0], vec![0, 1]] };
    let base = model.selection(&[1, 2, 3], 0).unwrap();
    assert_eq!(model.selection(&[1, 2, 9], 0).unwrap(), base);
    assert_ne!(model.selection(&[1, 5, 3], 0).unwrap(), base);
}

#[test]
fn zero_trials_is_an_error() {
    let model = CriticalSetModel { critical: vec![vec![], vec![]] };
    let err = measure_p_hat(&model, &[1, 2], 0, 0.5, 0, CorruptionMode::Token, 8, &mut Rng::new(0));
    assert!(err.is_err());
}

#[test]
fn single_corruption_matches_critical_share() {
    // one corrupted position out of L − 1: change probability is c/(L−1)
    let mut rng = Rng::new(9);
    let model = CriticalSetModel::planted(11, 3, &mut rng).unwrap();
    let tokens: Vec<u32> = (0..11).collect();
    let out = measure_p_hat(&model, &tokens, 4, 0.1, 20_000, CorruptionMode::Token, 50, &mut rng).unwrap();
    let expected = expected_change_prob(11, 3, 0.1).unwrap();
    assert!((expected - 0.3).abs() < 1e-15);
    let se = libm::sqrt(expected * (1.0 - expected) / 20_000.0);
    assert!((out.p_hat - expected).abs() < 4.0 * se, "{out:?}");
}
