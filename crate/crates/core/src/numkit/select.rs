use alloc::vec::Vec;

use crate::error::ensure;
use crate::Result;

/// Indices of the `k` largest entries, ordered by value descending with the
/// lower index winning ties.
pub fn topk(z: &[f64], k: usize) -> Result<Vec<usize>> {
    ensure(k >= 1 && k <= z.len(), || {
        alloc::format!("topk needs 1 <= k <= {}, got k = {k}", z.len())
    })?;
    Ok(topk_unchecked(z, k))
}

pub(crate) fn topk_unchecked(z: &[f64], k: usize) -> Vec<usize> {
    if k == 1 {
        return alloc::vec![argmax(z)];
    }
    let mut idx: Vec<usize> = (0..z.len()).collect();
    // stable sort keeps lower indices first among equal values
    idx.sort_by(|&a, &b| z[b].total_cmp(&z[a]));
    idx.truncate(k);
    idx
}

/// Index of the largest entry; lowest index on ties. Returns 0 for an empty slice.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn topk_examples() {
        assert_eq!(topk(&[3.0, 1.0, 2.0], 1).unwrap(), vec![0]);
        assert_eq!(topk(&[1.0, 1.0, 1.0], 2).unwrap(), vec![0, 1]);
        assert_eq!(topk(&[0.2, 0.9, 0.9, 0.1], 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn topk_range_is_checked() {
        assert!(topk(&[1.0, 2.0], 0).is_err());
        assert!(topk(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.1, 0.9, 0.9]), 1);
    }
}
