use proptest::prelude::*;
use sida_core::numkit::{
    grad_check, softmax, softmax_backward, sparsemax, sparsemax_backward, topk, Rng,
};

/// Euclidean projection onto the simplex by bisection on the threshold.
fn projection_by_bisection(z: &[f64]) -> Vec<f64> {
    let mass = |tau: f64| z.iter().map(|&v| (v - tau).max(0.0)).sum::<f64>();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = (max - 1.0, max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    z.iter().map(|&v| (v - tau).max(0.0)).collect()
}

fn random_vector(rng: &mut Rng) -> Vec<f64> {
    let len = 2 + rng.below(63);
    let scale = [0.01, 1.0, 10.0][rng.below(3)];
    (0..len).map(|_| rng.uniform_range(-scale, scale)).collect()
}

#[test]
fn sparsemax_matches_bisection_projection() {
    let mut rng = Rng::new(2024);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let z = random_vector(&mut rng);
        let fast = sparsemax(&z).unwrap();
        for (a, b) in fast.as_slice().iter().zip(projection_by_bisection(&z)) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst < 1e-6, "max error {worst}");
}

#[test]
fn sparsemax_tie_example() {
    // z = [1.1, 1, −5]: τ = 0.55, support {0, 1}
    let p = sparsemax(&[1.1, 1.0, -5.0]).unwrap();
    let oracle = projection_by_bisection(&[1.1, 1.0, -5.0]);
    for (a, b) in p.as_slice().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn softmax_matches_pairwise_form() {
    // p_i = 1 / Σ_j exp(z_j − z_i) never forms the normalizer explicitly
    let mut rng = Rng::new(7);
    for _ in 0..500 {
        let z = random_vector(&mut rng);
        let p = softmax(&z).unwrap();
        for (i, &pi) in p.as_slice().iter().enumerate() {
            let oracle = 1.0 / z.iter().map(|&zj| (zj - z[i]).exp()).sum::<f64>();
            assert!((pi - oracle).abs() < 1e-12, "{pi} vs {oracle}");
        }
    }
}

#[test]
fn softmax_survives_huge_logits() {
    let p = softmax(&[1000.0, 1000.0, -1000.0]).unwrap();
    assert_eq!(p.as_slice(), &[0.5, 0.5, 0.0]);
}

#[test]
fn activation_gradients_match_finite_differences() {
    let mut rng = Rng::new(5);
    let w: Vec<f64> = (0..6).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let z: Vec<f64> = (0..6).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let soft = |z: &[f64]| {
        let p = softmax(z)?;
        let loss = p.as_slice().iter().zip(&w).map(|(a, b)| a * b).sum();
        Ok((loss, softmax_backward(p.as_slice(), &w)))
    };
    assert!(grad_check(soft, &z, 1e-6).unwrap().max_rel_error < 1e-6);
    // keep every coordinate a safe distance from the support boundary
    let z = [0.9, 0.1, 0.55, -2.0, 0.4, -0.7];
    let sparse = |z: &[f64]| {
        let p = sparsemax(z)?;
        let loss = p.as_slice().iter().zip(&w).map(|(a, b)| a * b).sum();
        Ok((loss, sparsemax_backward(p.as_slice(), &w)))
    };
    assert!(grad_check(sparse, &z, 1e-6).unwrap().max_rel_error < 1e-6);
}

proptest! {
    #[test]
    fn sparsemax_is_a_distribution(z in prop::collection::vec(-50.0f64..50.0, 1..64)) {
        let p = sparsemax(&z).unwrap();
        let s: f64 = p.as_slice().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-9);
        prop_assert!(p.as_slice().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn sparsemax_is_shift_invariant(z in prop::collection::vec(-5.0f64..5.0, 1..32), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let a = sparsemax(&z).unwrap();
        let b = sparsemax(&shifted).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn topk_returns_the_largest(z in prop::collection::vec(-10.0f64..10.0, 1..40), k in 1usize..40) {
        let k = k.min(z.len());
        let idx = topk(&z, k).unwrap();
        prop_assert_eq!(idx.len(), k);
        let smallest_kept = idx.iter().map(|&i| z[i]).fold(f64::INFINITY, f64::min);
        for (i, &v) in z.iter().enumerate() {
            if !idx.contains(&i) {
                prop_assert!(v <= smallest_kept);
            }
        }
    }

    #[test]
    fn softmax_is_a_distribution(z in prop::collection::vec(-700.0f64..700.0, 1..64)) {
        let p = softmax(&z).unwrap();
        prop_assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
