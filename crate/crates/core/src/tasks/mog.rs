//! Diagonal mixtures of Gaussians: synthetic data, log-likelihood, one-step
//! EM refinement, hard assignment, and the differentiable network head.

use crate::autodiff::{log_sum_exp, CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tasks::ari::ClusterLabels;
use crate::tensor::Tensor;

/// Lower bound on every standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-3;

/// Total responsibility below which an EM component counts as empty.
pub const EMPTY_COMPONENT: f64 = 1e-12;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq)]
pub struct MogParams {
    /// Mixture weights, positive and summing to one.
    pub pi: Vec<f64>,
    /// `k x D` component means.
    pub mu: Tensor,
    /// `k x D` per-dimension standard deviations.
    pub sigma: Tensor,
}

impl MogParams {
    pub fn k(&self) -> usize {
        self.pi.len()
    }

    pub fn dim(&self) -> usize {
        self.mu.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if self.mu.rows() != k || self.sigma.shape() != self.mu.shape() {
            return Err(Error::Dimension {
                op: "mog_params",
                lhs: self.mu.shape(),
                rhs: self.sigma.shape(),
            });
        }
        if let Some(s) = self.sigma.data().iter().find(|s| !(**s > 0.0)) {
            return Err(Error::Contract(format!("standard deviation must be positive, got {s}")));
        }
        Ok(())
    }

    /// `log pi_j + log N(x; mu_j, diag(sigma_j^2))`.
    fn log_joint(&self, x: &[f64], j: usize) -> f64 {
        component_log_joint(x, self.pi[j].ln(), self.mu.row(j), self.sigma.row(j))
    }
}

fn component_log_joint(x: &[f64], log_pi: f64, mu: &[f64], sigma: &[f64]) -> f64 {
    let mut lp = log_pi;
    for ((xd, md), sd) in x.iter().zip(mu).zip(sigma) {
        let z = (xd - md) / sd;
        lp -= HALF_LN_2PI + sd.ln() + 0.5 * z * z;
    }
    lp
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogLik {
    pub total: f64,
    pub per_datum: f64,
}

/// `sum_i log sum_j pi_j N(x_i; mu_j, diag(sigma_j^2))`, via log-sum-exp.
pub fn mog_loglik(x: &Tensor, theta: &MogParams) -> Result<LogLik> {
    theta.validate()?;
    if x.cols() != theta.dim() {
        return Err(Error::Dimension {
            op: "mog_loglik",
            lhs: x.shape(),
            rhs: theta.mu.shape(),
        });
    }
    let mut buf = vec![0.0; theta.k()];
    let mut total = 0.0;
    for i in 0..x.rows() {
        for (j, b) in buf.iter_mut().enumerate() {
            *b = theta.log_joint(x.row(i), j);
        }
        total += log_sum_exp(&buf);
    }
    Ok(LogLik {
        total,
        per_datum: total / x.rows().max(1) as f64,
    })
}

/// Result of one EM iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct EmStep {
    pub params: MogParams,
    /// Components whose total responsibility fell below [`EMPTY_COMPONENT`];
    /// their weight, mean and scale were kept and the remaining weights
    /// rescaled to fill the simplex.
    pub empty_components: Vec<usize>,
}

/// One E-step (log-space responsibilities) and one M-step (weights, means,
/// variances floored at `SIGMA_FLOOR^2`).
pub fn em_step(x: &Tensor, theta: &MogParams) -> Result<EmStep> {
    theta.validate()?;
    let (n, dim, k) = (x.rows(), theta.dim(), theta.k());
    if x.cols() != dim {
        return Err(Error::Dimension {
            op: "em_step",
            lhs: x.shape(),
            rhs: theta.mu.shape(),
        });
    }
    let mut resp = Tensor::zeros(n, k);
    let mut buf = vec![0.0; k];
    for i in 0..n {
        for (j, b) in buf.iter_mut().enumerate() {
            *b = theta.log_joint(x.row(i), j);
        }
        let lse = log_sum_exp(&buf);
        for (r, b) in resp.row_mut(i).iter_mut().zip(&buf) {
            *r = (b - lse).exp();
        }
    }
    let mut mass = vec![0.0; k];
    let mut mu = Tensor::zeros(k, dim);
    for i in 0..n {
        for j in 0..k {
            let r = resp.get(i, j);
            mass[j] += r;
            for (m, xd) in mu.row_mut(j).iter_mut().zip(x.row(i)) {
                *m += r * xd;
            }
        }
    }
    let empty: Vec<usize> = (0..k).filter(|&j| mass[j] < EMPTY_COMPONENT).collect();
    let mut sigma = theta.sigma.clone();
    for j in 0..k {
        if empty.contains(&j) {
            mu.row_mut(j).copy_from_slice(theta.mu.row(j));
            continue;
        }
        mu.row_mut(j).iter_mut().for_each(|m| *m /= mass[j]);
        let mut var = vec![0.0; dim];
        for i in 0..n {
            let r = resp.get(i, j);
            for ((v, xd), md) in var.iter_mut().zip(x.row(i)).zip(mu.row(j)) {
                *v += r * (xd - md) * (xd - md);
            }
        }
        for (s, v) in sigma.row_mut(j).iter_mut().zip(var) {
            *s = (v / mass[j]).max(SIGMA_FLOOR * SIGMA_FLOOR).sqrt();
        }
    }
    let kept: f64 = empty.iter().map(|&j| theta.pi[j]).sum();
    let live: f64 = (0..k).filter(|j| !empty.contains(j)).map(|j| mass[j]).sum();
    let pi = (0..k)
        .map(|j| {
            if empty.contains(&j) {
                theta.pi[j]
            } else {
                (1.0 - kept) * mass[j] / live
            }
        })
        .collect();
    Ok(EmStep {
        params: MogParams { pi, mu, sigma },
        empty_components: empty,
    })
}

/// Most probable component per point; ties go to the lowest index.
pub fn assign_clusters(x: &Tensor, theta: &MogParams) -> Result<ClusterLabels> {
    theta.validate()?;
    let mut labels = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let mut best = 0;
        let mut best_lp = theta.log_joint(x.row(i), 0);
        for j in 1..theta.k() {
            let lp = theta.log_joint(x.row(i), j);
            if lp > best_lp {
                best = j;
                best_lp = lp;
            }
        }
        labels.push(best);
    }
    Ok(ClusterLabels(labels))
}

/// Generative process for synthetic clustering datasets.
#[derive(Clone, Debug, PartialEq)]
pub struct MogGenConfig {
    pub k: usize,
    pub dim: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub mu_lo: f64,
    pub mu_hi: f64,
    pub sigma: f64,
    /// Symmetric Dirichlet concentration for the mixture weights.
    pub alpha: f64,
}

impl Default for MogGenConfig {
    fn default() -> Self {
        Self {
            k: 4,
            dim: 2,
            n_min: 100,
            n_max: 500,
            mu_lo: -4.0,
            mu_hi: 4.0,
            sigma: 0.3,
            alpha: 1.0,
        }
    }
}

impl MogGenConfig {
    /// Six components, 1000 to 5000 points.
    pub fn large_scale() -> Self {
        Self {
            k: 6,
            n_min: 1000,
            n_max: 5000,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MogDataset {
    /// `n x D` points.
    pub points: Tensor,
    pub labels: ClusterLabels,
    pub params: MogParams,
}

/// Samples `n ~ Unif{n_min..n_max}` and a dataset of that size.
pub fn gen_synthetic_mog(rng: &mut Rng, cfg: &MogGenConfig) -> Result<MogDataset> {
    if cfg.n_min == 0 || cfg.n_min > cfg.n_max {
        return Err(Error::Config(format!("empty set-size range [{}, {}]", cfg.n_min, cfg.n_max)));
    }
    let n = rng.int_inclusive(cfg.n_min, cfg.n_max);
    gen_synthetic_mog_with_size(rng, cfg, n)
}

/// Means `~ Unif(mu_lo, mu_hi)^D`, weights `~ Dir(alpha 1_k)`, labels
/// `~ Categorical(pi)`, points `~ N(mu_z, sigma^2 I)`.
pub fn gen_synthetic_mog_with_size(rng: &mut Rng, cfg: &MogGenConfig, n: usize) -> Result<MogDataset> {
    if cfg.k == 0 || cfg.dim == 0 || !(cfg.sigma > 0.0) {
        return Err(Error::Config("mixture needs k >= 1, D >= 1 and sigma > 0".into()));
    }
    let mu = Tensor::from_fn(cfg.k, cfg.dim, |_, _| rng.uniform(cfg.mu_lo, cfg.mu_hi));
    let pi = rng.dirichlet(cfg.k, cfg.alpha);
    let mut labels = Vec::with_capacity(n);
    let mut points = Tensor::zeros(n, cfg.dim);
    for i in 0..n {
        let z = rng.categorical(&pi);
        labels.push(z);
        for d in 0..cfg.dim {
            points.set(i, d, mu.get(z, d) + cfg.sigma * rng.normal());
        }
    }
    Ok(MogDataset {
        points,
        labels: ClusterLabels(labels),
        params: MogParams {
            pi,
            mu,
            sigma: Tensor::filled(cfg.k, cfg.dim, cfg.sigma),
        },
    })
}

/// Differentiable mixture parameters for `groups` datasets.
pub struct MogHead {
    pub groups: usize,
    pub k: usize,
    /// `(groups*k) x 1` normalised log weights.
    pub log_pi: Var,
    /// `(groups*k) x D`.
    pub mu: Var,
    /// `(groups*k) x D`, each entry at least [`SIGMA_FLOOR`].
    pub sigma: Var,
}

impl MogHead {
    /// Plain parameters of dataset `g`.
    pub fn params(&self, g: usize) -> MogParams {
        let k = self.k;
        MogParams {
            pi: (0..k).map(|j| self.log_pi.value().get(g * k + j, 0).exp()).collect(),
            mu: self.mu.value().row_block(g * k, k),
            sigma: self.sigma.value().row_block(g * k, k),
        }
    }
}

/// Maps decoder rows `[logit, raw mean (D), raw scale (D)]` to mixture
/// parameters: `pi = softmax(logits)` within each dataset,
/// `sigma = softplus(raw) + SIGMA_FLOOR`.
pub fn mog_head(tape: &mut Tape, out: &Var, groups: usize, dim: usize) -> Result<MogHead> {
    if out.cols() != 1 + 2 * dim || groups == 0 || out.rows() % groups != 0 {
        return Err(Error::Dimension {
            op: "mog_head",
            lhs: out.shape(),
            rhs: (groups, 1 + 2 * dim),
        });
    }
    let k = out.rows() / groups;
    let parts = tape.split_cols(out, &[1, dim, dim])?;
    let logits = tape.reshape(&parts[0], groups, k)?;
    let log_pi = tape.log_softmax_rows(&logits);
    let log_pi = tape.reshape(&log_pi, groups * k, 1)?;
    let sp = tape.softplus(&parts[2]);
    let sigma = tape.add_scalar(&sp, SIGMA_FLOOR);
    Ok(MogHead {
        groups,
        k,
        log_pi,
        mu: parts[1].clone(),
        sigma,
    })
}

/// Mean per-datum log-likelihood of `x` (`groups` stacked datasets of equal
/// size) under the head's mixtures, as a `1 x 1` tape value.
pub fn mog_loglik_tape(tape: &mut Tape, x: &Tensor, head: &MogHead) -> Result<Var> {
    let groups = head.groups;
    let (k, dim) = (head.k, head.mu.cols());
    if x.cols() != dim || x.rows() % groups != 0 || x.rows() == 0 {
        return Err(Error::Dimension {
            op: "mog_loglik_tape",
            lhs: x.shape(),
            rhs: head.mu.shape(),
        });
    }
    let n = x.rows() / groups;
    let total_points = x.rows() as f64;
    let mut resp = Tensor::zeros(x.rows(), k);
    let mut buf = vec![0.0; k];
    let mut total = 0.0;
    let (lp, mu, sigma) = (head.log_pi.value(), head.mu.value(), head.sigma.value());
    for g in 0..groups {
        for i in g * n..(g + 1) * n {
            for (j, b) in buf.iter_mut().enumerate() {
                let c = g * k + j;
                *b = component_log_joint(x.row(i), lp.get(c, 0), mu.row(c), sigma.row(c));
            }
            let lse = log_sum_exp(&buf);
            total += lse;
            for (r, b) in resp.row_mut(i).iter_mut().zip(&buf) {
                *r = (b - lse).exp();
            }
        }
    }
    let op = MixtureLogLik {
        x: x.clone(),
        resp,
        groups,
        k,
        scale: 1.0 / total_points,
    };
    let inputs = vec![head.log_pi.clone(), head.mu.clone(), head.sigma.clone()];
    Ok(tape.custom(Box::new(op), inputs, Tensor::scalar(total / total_points)))
}

struct MixtureLogLik {
    x: Tensor,
    resp: Tensor,
    groups: usize,
    k: usize,
    scale: f64,
}

impl CustomOp for MixtureLogLik {
    fn name(&self) -> &'static str {
        "mog_loglik"
    }

    fn backward(&self, inputs: &[Var], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (mu, sigma) = (inputs[1].value(), inputs[2].value());
        let dim = mu.cols();
        let gs = grad.get(0, 0) * self.scale;
        let mut d_lp = Tensor::zeros(self.groups * self.k, 1);
        let mut d_mu = Tensor::zeros(mu.rows(), dim);
        let mut d_sigma = Tensor::zeros(mu.rows(), dim);
        let n = self.x.rows() / self.groups;
        for i in 0..self.x.rows() {
            let g = i / n;
            for j in 0..self.k {
                let c = g * self.k + j;
                let r = gs * self.resp.get(i, j);
                d_lp.set(c, 0, d_lp.get(c, 0) + r);
                for d in 0..dim {
                    let s = sigma.get(c, d);
                    let diff = self.x.get(i, d) - mu.get(c, d);
                    let z2 = diff * diff / (s * s);
                    d_mu.set(c, d, d_mu.get(c, d) + r * diff / (s * s));
                    d_sigma.set(c, d, d_sigma.get(c, d) + r * (z2 - 1.0) / s);
                }
            }
        }
        vec![d_lp, d_mu, d_sigma]
    }
}
