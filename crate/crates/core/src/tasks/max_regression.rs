//! Max-value regression: predict `max(x_1, .., x_n)` from the unordered set.

use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MAX_SET_SIZE: usize = 10;
pub const VALUE_RANGE: (f64, f64) = (0.0, 100.0);

/// `batch_size` sets sharing one size `n`, stacked as a `(batch_size*n) x 1`
/// tensor; set `b` occupies rows `b*n .. (b+1)*n`.
#[derive(Clone, Debug)]
pub struct MaxRegressionBatch {
    pub set_size: usize,
    pub sets: Tensor,
    pub targets: Vec<f64>,
}

impl MaxRegressionBatch {
    pub fn batch_size(&self) -> usize {
        self.targets.len()
    }

    pub fn set(&self, b: usize) -> &[f64] {
        &self.sets.data()[b * self.set_size..(b + 1) * self.set_size]
    }

    pub fn targets_tensor(&self) -> Tensor {
        Tensor::from_vec(self.targets.len(), 1, self.targets.clone()).expect("column vector")
    }
}

/// Draws `n ~ Unif{1..10}` once for the batch, then every value from
/// `Unif[0, 100)`.
pub fn gen_max_regression(rng: &mut Rng, batch_size: usize) -> MaxRegressionBatch {
    let n = rng.int_inclusive(1, MAX_SET_SIZE);
    gen_max_regression_with_size(rng, batch_size, n)
}

pub fn gen_max_regression_with_size(rng: &mut Rng, batch_size: usize, n: usize) -> MaxRegressionBatch {
    let (lo, hi) = VALUE_RANGE;
    let data: Vec<f64> = (0..batch_size * n).map(|_| rng.uniform(lo, hi)).collect();
    let targets = data
        .chunks(n)
        .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    MaxRegressionBatch {
        set_size: n,
        sets: Tensor::from_vec(batch_size * n, 1, data).expect("sized"),
        targets,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_are_exact_maxima() {
        let mut rng = Rng::new(1);
        for _ in 0..50 {
            let b = gen_max_regression(&mut rng, 16);
            assert!((1..=MAX_SET_SIZE).contains(&b.set_size));
            for i in 0..b.batch_size() {
                let m = b.set(i).iter().copied().fold(f64::MIN, f64::max);
                assert_eq!(m, b.targets[i]);
                assert!(b.set(i).iter().all(|v| (0.0..100.0).contains(v)));
            }
        }
    }

    #[test]
    fn singleton_target_is_its_element() {
        let mut rng = Rng::new(2);
        let b = gen_max_regression_with_size(&mut rng, 8, 1);
        for i in 0..8 {
            assert_eq!(b.targets[i], b.set(i)[0]);
        }
    }

    #[test]
    fn value_mean_near_fifty() {
        let mut rng = Rng::new(3);
        let mut sum = 0.0;
        let mut count = 0usize;
        while count < 1_000_000 {
            let b = gen_max_regression(&mut rng, 1000);
            sum += b.sets.sum();
            count += b.sets.len();
        }
        let mean = sum / count as f64;
        assert!((49.5..=50.5).contains(&mean), "{mean}");
    }
}
