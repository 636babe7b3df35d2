//! Adjusted Rand index.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Per-point cluster assignments. Component indices are zero-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterLabels(pub Vec<usize>);

impl ClusterLabels {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn pairs(n: u64) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Chance-corrected pair-counting agreement between two partitions.
///
/// Returns 1 when the index is undefined (both partitions trivial and
/// identical in pair structure).
pub fn ari(a: &ClusterLabels, b: &ClusterLabels) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "ari: labelings have different lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    for (&x, &y) in a.0.iter().zip(&b.0) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| pairs(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| pairs(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| pairs(c)).sum();
    let total = pairs(a.len() as u64);
    let expected = if total > 0.0 { sum_a * sum_b / total } else { 0.0 };
    let max = 0.5 * (sum_a + sum_b);
    let denom = max - expected;
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((index - expected) / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn l(v: &[usize]) -> ClusterLabels {
        ClusterLabels(v.to_vec())
    }

    #[test]
    fn identical_is_one() {
        let a = l(&[0, 0, 1, 2, 2, 2]);
        assert_eq!(ari(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn relabeling_is_one() {
        assert_eq!(ari(&l(&[1, 1, 2, 2]), &l(&[2, 2, 1, 1])).unwrap(), 1.0);
    }

    #[test]
    fn hand_computed_value() {
        // contingency [[2,1],[0,2]] (rows a, cols b):
        // index = 1 + 0 + 0 + 1 = 2, sum_a = 3 + 1 = 4, sum_b = 1 + 3 = 4,
        // total = 10, expected = 1.6, max = 4 -> (2 - 1.6) / 2.4
        let a = l(&[0, 0, 0, 1, 1]);
        let b = l(&[0, 0, 1, 1, 1]);
        assert!((ari(&a, &b).unwrap() - 0.4 / 2.4).abs() < 1e-15);
    }

    #[test]
    fn symmetric() {
        let mut rng = Rng::new(4);
        for _ in 0..100 {
            let a = ClusterLabels((0..30).map(|_| rng.int_inclusive(0, 3)).collect());
            let b = ClusterLabels((0..30).map(|_| rng.int_inclusive(0, 4)).collect());
            assert_eq!(ari(&a, &b).unwrap(), ari(&b, &a).unwrap());
        }
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(ari(&l(&[0, 1]), &l(&[0])).is_err());
    }

    #[test]
    fn random_labelings_average_zero() {
        let mut rng = Rng::new(5);
        let trials = 10_000;
        let mut sum = 0.0;
        for _ in 0..trials {
            let a = ClusterLabels((0..100).map(|_| rng.int_inclusive(0, 3)).collect());
            let b = ClusterLabels((0..100).map(|_| rng.int_inclusive(0, 3)).collect());
            sum += ari(&a, &b).unwrap();
        }
        let mean = sum / trials as f64;
        assert!(mean.abs() <= 0.01, "{mean}");
    }
}
