//! Adam with bias correction, operating on the gradients held in a
//! [`ParamStore`].

use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient entry was NaN or infinite; parameters and moments were left
    /// untouched.
    SkippedNonFinite,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.rows(), p.value.cols())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Number of steps taken, skipped ones included.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> StepOutcome {
        self.t += 1;
        if store.iter().any(|p| !p.grad.all_finite()) {
            return StepOutcome::SkippedNonFinite;
        }
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let w = p.value.data_mut();
            let g = p.grad.data();
            for i in 0..w.len() {
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g[i];
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m.data()[i] / c1;
                let v_hat = v.data()[i] / c2;
                w[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        StepOutcome::Applied
    }
}

/// Rescales all gradients so their joint Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let c = max_norm / norm;
        store.iter_mut().for_each(|p| p.grad.scale_inplace(c));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_rows(&[values]).unwrap()).unwrap();
        s
    }

    fn set_grad(s: &mut ParamStore, g: &[f64]) {
        s.iter_mut().next().unwrap().grad.data_mut().copy_from_slice(g);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store(&[1.0, -2.0]);
        let mut opt = Adam::new(&s);
        assert_eq!(opt.step(&mut s, 1e-3), StepOutcome::Applied);
        assert_eq!(s.iter().next().unwrap().value.data(), &[1.0, -2.0]);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn first_step_is_sign_of_gradient() {
        let mut s = store(&[0.0, 0.0, 0.0]);
        let mut opt = Adam::new(&s);
        set_grad(&mut s, &[3.0, -0.5, 200.0]);
        opt.step(&mut s, 1e-3);
        for (w, sign) in s.iter().next().unwrap().value.data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((w - sign * 1e-3).abs() < 1e-10);
        }
    }

    #[test]
    fn non_finite_gradient_skips() {
        let mut s = store(&[1.0]);
        let mut opt = Adam::new(&s);
        set_grad(&mut s, &[f64::NAN]);
        assert_eq!(opt.step(&mut s, 1e-3), StepOutcome::SkippedNonFinite);
        assert_eq!(s.iter().next().unwrap().value.data(), &[1.0]);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut s = store(&[0.0, 0.0]);
        set_grad(&mut s, &[3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut s, 1.0), 5.0);
        let g = s.iter().next().unwrap().grad.data().to_vec();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }
}
