use alloc::vec;
use alloc::vec::Vec;

use super::*;

const MB: u64 = 1_000_000;

fn state_with(keys: &[ExpertKey], bytes: u64) -> ResidencyState {
    let mut s = ResidencyState::new();
    for &k in keys {
        s.load(k, bytes, u64::MAX).unwrap();
    }
    s
}

#[test]
fn resident_working_set_needs_no_plan() {
    let s = state_with(&[(0, 1), (0, 2)], 10 * MB);
    let plan = plan_required(&[vec![1, 2]], &s, &MemoryBudget::new(20 * MB), 10 * MB).unwrap();
    assert!(plan.is_empty());
    assert_eq!(plan.estimated_transfer_s, 0.0);
    let (next, t) = apply_plan(&s, &plan).unwrap();
    assert_eq!(next, s);
    assert_eq!(t, 0.0);
}

#[test]
fn cold_start_loads_without_evicting() {
    let plan =
        plan_required(&[vec![3, 5]], &ResidencyState::new(), &MemoryBudget::new(32 * MB), 10 * MB).unwrap();
    assert_eq!(plan.loads(), vec![(0, 3), (0, 5)]);
    assert!(plan.evictions().is_empty());
}

#[test]
fn oldest_unneeded_resident_goes_first() {
    let (a, b, c) = ((0, 0), (0, 1), (0, 2));
    let s = state_with(&[a, b], 10 * MB);
    let plan = plan_required(&[vec![1, 2]], &s, &MemoryBudget::new(20 * MB), 10 * MB).unwrap();
    assert_eq!(plan.evictions(), vec![a]);
    assert_eq!(plan.loads(), vec![c]);
    let (next, _) = apply_plan(&s, &plan).unwrap();
    assert_eq!(next.fifo_order().collect::<Vec<_>>(), vec![b, c]);
}

#[test]
fn transfer_cost_is_linear_plus_latency() {
    let budget = MemoryBudget { fast_tier_bytes: 100 * MB, bandwidth_bytes_per_s: 1e9, per_transfer_latency_s: 1e-3 };
    let plan = plan_required(&[vec![0]], &ResidencyState::new(), &budget, 10 * MB).unwrap();
    assert!((plan.estimated_transfer_s - 0.011).abs() < 1e-15);
}

#[test]
fn completed_layers_yield_when_batch_overflows() {
    // two layers, two experts each, room for three
    let plan =
        plan_required(&[vec![0, 1], vec![0, 1]], &ResidencyState::new(), &MemoryBudget::new(3 * MB), MB).unwrap();
    assert_eq!(plan.loads(), vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    assert_eq!(plan.evictions(), vec![(0, 0)]);
    assert_eq!(plan.steps.iter().filter(|s| s.phase == 1).count(), 3);
    let (next, _) = apply_plan(&ResidencyState::new(), &plan).unwrap();
    assert_eq!(next.used_bytes(), 3 * MB);
}

#[test]
fn later_layers_yield_last_and_are_reloaded() {
    let s = state_with(&[(1, 0)], MB);
    let plan = plan_required(&[vec![0, 1], vec![0]], &s, &MemoryBudget::new(2 * MB), MB).unwrap();
    assert_eq!(plan.evictions(), vec![(1, 0), (0, 0)]);
    assert_eq!(plan.loads(), vec![(0, 0), (0, 1), (1, 0)]);
}

#[test]
fn layer_wider_than_budget_is_unservable() {
    let err = plan_required(&[vec![0, 1, 2]], &ResidencyState::new(), &MemoryBudget::new(2 * MB), MB).unwrap_err();
    assert!(matches!(err, Error::Unservable { layer: 0, expert: 2, .. }), "{err:?}");
}

#[test]
fn oversized_expert_is_unservable() {
    let err = plan_required(&[vec![4]], &ResidencyState::new(), &MemoryBudget::new(MB), 2 * MB).unwrap_err();
    assert!(matches!(err, Error::Unservable { layer: 0, expert: 4, .. }));
}

#[test]
fn stale_plan_is_rejected() {
    let plan = plan_required(&[vec![0]], &ResidencyState::new(), &MemoryBudget::new(MB), MB).unwrap();
    let mut s = state_with(&[(0, 0)], MB);
    let before = s.clone();
    assert!(matches!(s.apply(&plan), Err(Error::PlanMismatch(_))));
    assert_eq!(s, before);
}

#[test]
fn utilization_counts_activated_share() {
    let keys: Vec<ExpertKey> = (0..8).map(|e| (0, e)).collect();
    let s = state_with(&keys, MB);
    let act: BTreeSet<ExpertKey> = [(0, 2), (0, 5)].into_iter().collect();
    assert_eq!(effective_utilization(&s, &act).unwrap(), 0.25);
    let all: BTreeSet<ExpertKey> = keys.iter().copied().collect();
    assert_eq!(effective_utilization(&s, &all).unwrap(), 1.0);
    let outside: BTreeSet<ExpertKey> = [(1, 0)].into_iter().collect();
    assert!(effective_utilization(&s, &outside).is_err());
}

#[test]
fn reduction_counts_distinct_experts() {
    let config = MoEConfig { num_experts: 128, ..MoEConfig::default() };
    let one = |e| vec![vec![(e, 1.0)]];
    let table = ExpertHashTable { batch_id: 0, num_experts: 128, entries: vec![one(3), one(9)] };
    assert!((memory_reduction(&table, &config).unwrap() - (1.0 - 1.0 / 128.0)).abs() < 1e-15);
    let every: Vec<Vec<(usize, f64)>> = (0..128).map(|e| vec![(e, 1.0)]).collect();
    let full = ExpertHashTable { batch_id: 0, num_experts: 128, entries: vec![every.clone(), every] };
    assert_eq!(memory_reduction(&full, &config).unwrap(), 0.0);
}

#[test]
fn planning_is_idempotent() {
    let s = state_with(&[(0, 0), (1, 3), (0, 7)], MB);
    let req = [vec![7, 2], vec![3, 4, 5]];
    let budget = MemoryBudget::new(4 * MB);
    assert_eq!(plan_required(&req, &s, &budget, MB).unwrap(), plan_required(&req, &s, &budget, MB).unwrap());
}

#[test]
fn phases_replay_the_whole_plan() {
    let s = state_with(&[(0, 0), (1, 3), (0, 7)], MB);
    let plan = plan_required(&[vec![7, 2], vec![3, 4, 5]], &s, &MemoryBudget::new(4 * MB), MB).unwrap();
    let (whole, t) = apply_plan(&s, &plan).unwrap();
    let mut stepped = s.clone();
    let mut total = 0.0;
    for p in 0..plan.num_phases() {
        total += stepped.apply(&plan.phase(p)).unwrap();
    }
    assert_eq!(stepped, whole);
    assert_eq!(total, t);
}
