use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use super::ActivationTrace;

/// Distinct experts selected per layer over every token of `trace`.
pub fn distinct_experts(trace: &ActivationTrace) -> Vec<BTreeSet<usize>> {
    trace
        .layers
        .iter()
        .map(|entries| entries.iter().flat_map(|e| e.selection.iter().map(|&(i, _)| i)).collect())
        .collect()
}

/// Per layer, the fraction of experts no token selected: `1 − |distinct| / K`.
pub fn sequence_sparsity(trace: &ActivationTrace) -> Vec<f64> {
    let k = trace.num_experts as f64;
    distinct_experts(trace).iter().map(|s| 1.0 - s.len() as f64 / k).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TraceEntry;
    use alloc::vec;

    fn trace(k: usize, picks: &[usize]) -> ActivationTrace {
        ActivationTrace {
            num_experts: k,
            layers: vec![picks.iter().map(|&i| TraceEntry { probs: None, selection: vec![(i, 1.0)] }).collect()],
        }
    }

    #[test]
    fn all_to_one_expert() {
        assert_eq!(sequence_sparsity(&trace(8, &[0; 5])), vec![7.0 / 8.0]);
    }

    #[test]
    fn every_expert_used() {
        assert_eq!(sequence_sparsity(&trace(4, &[3, 1, 0, 2])), vec![0.0]);
    }
}
