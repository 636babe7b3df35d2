//! Property suites run by `stfm check`: gradient checks, permutation
//! equivariance and invariance, the zero-query mean and sum-pooling
//! constructions, and EM monotonicity.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Activation, CustomOp, PoolKind, Tape, Var, Weighting};
use crate::blocks::{att, isab, mab, pma_attention, rffp_layer, sab, IsabParams, MabParams, PmaParams};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_check, GradCheckReport};
use crate::model::{DecoderConfig, EncoderBlock, EncoderConfig, ModelConfig, Pooling, SetModel};
use crate::param::{Bound, ParamStore};
use crate::rng::Rng;
use crate::tasks::mog::{em_step, mog_head, mog_loglik, mog_loglik_tape, MogParams};
use crate::tensor::Tensor;

pub const GRAD_TOL: f64 = 1e-6;
pub const GRAD_STEP: f64 = 1e-4;
pub const PERM_TOL: f64 = 1e-9;
pub const LEMMA_TOL: f64 = 1e-12;
pub const EM_SLACK: f64 = 1e-9;
pub const PERMUTATIONS_PER_ARCH: usize = 100;
pub const RANDOM_ARCHITECTURES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Grad,
    Perm,
    Lemma,
    Em,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "grad" => Suite::Grad,
            "perm" => Suite::Perm,
            "lemma" => Suite::Lemma,
            "em" => Suite::Em,
            "all" => Suite::All,
            other => return Err(Error::Config(format!("unknown suite `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub suite: &'static str,
    pub name: String,
    /// Worst observed error (relative for gradients and permutations, EM
    /// likelihood drop for monotonicity).
    pub worst: f64,
    pub tol: f64,
    /// Seed that reproduces the case.
    pub seed: u64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.worst <= self.tol
    }
}

impl fmt::Display for CaseResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<5} {:<32} worst {:.3e} (tol {:.0e}) seed {}",
            if self.passed() { "ok  " } else { "FAIL" },
            self.suite,
            self.name,
            self.worst,
            self.tol,
            self.seed
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckReport {
    pub cases: Vec<CaseResult>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseResult::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.cases.iter().filter(|c| !c.passed())
    }

    pub fn worst(&self, suite: &str) -> Option<f64> {
        self.cases
            .iter()
            .filter(|c| c.suite == suite)
            .map(|c| c.worst)
            .fold(None, |acc, w| Some(acc.map_or(w, |a: f64| a.max(w))))
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<CheckReport> {
    let mut report = CheckReport::default();
    if matches!(suite, Suite::Grad | Suite::All) {
        grad_suite(seed, &mut report.cases)?;
    }
    if matches!(suite, Suite::Perm | Suite::All) {
        perm_suite(seed, &mut report.cases)?;
    }
    if matches!(suite, Suite::Lemma | Suite::All) {
        lemma_suite(seed, &mut report.cases)?;
    }
    if matches!(suite, Suite::Em | Suite::All) {
        em_suite(seed, &mut report.cases)?;
    }
    Ok(report)
}

fn normal(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.normal())
}

/// Normal entries pushed at least 0.1 away from zero, for ops with a kink.
fn off_zero(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| {
        let z = rng.normal();
        z.signum() * (0.1 + z.abs())
    })
}

/// `sum(x * c)` with a hand-written adjoint, so that injected faults in tape
/// ops never reach the reduction used by the checks.
struct Weighted(Tensor);

impl CustomOp for Weighted {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }

    fn backward(&self, _inputs: &[Var], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        vec![self.0.map(|c| c * grad.get(0, 0))]
    }
}

fn weighted_sum(tape: &mut Tape, x: &Var, seed: u64) -> Var {
    let mut rng = Rng::derive(seed, 99);
    let c = normal(x.rows(), x.cols(), &mut rng);
    let value: f64 = x.value().data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
    tape.custom(Box::new(Weighted(c)), vec![x.clone()], Tensor::scalar(value))
}

/// Finite-difference check of one tape op on random inputs whose leading
/// dimensions are `rows x cols` (both at least 1).
pub fn op_gradcheck(op: &str, rows: usize, cols: usize, seed: u64) -> Result<GradCheckReport> {
    let (r, c) = (rows.max(1), cols.max(1));
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let a = store.add("a", normal(r, c, &mut rng))?;
    macro_rules! check {
        (|$t:ident, $p:ident| $body:expr) => {
            finite_diff_check(&mut store, GRAD_STEP, |$t: &mut Tape, $p: &Bound| {
                let out: Var = $body;
                Ok(weighted_sum($t, &out, seed))
            })
        };
    }
    match op {
        "matmul" => {
            let b = store.add("b", normal(c, r + 1, &mut rng))?;
            check!(|t, p| t.matmul(&p[a], &p[b])?)
        }
        "add" | "sub" | "mul" => {
            let b = store.add("b", normal(r, c, &mut rng))?;
            check!(|t, p| match op {
                "add" => t.add(&p[a], &p[b])?,
                "sub" => t.sub(&p[a], &p[b])?,
                _ => t.mul(&p[a], &p[b])?,
            })
        }
        "scale" => check!(|t, p| t.scale(&p[a], -1.7)),
        "add_scalar" => check!(|t, p| t.add_scalar(&p[a], 0.3)),
        "scale_by" => {
            let s = store.add("s", normal(1, 1, &mut rng))?;
            check!(|t, p| t.scale_by(&p[a], &p[s])?)
        }
        "relu" | "abs" => {
            store.get_mut(a).value = off_zero(r, c, &mut rng);
            check!(|t, p| if op == "relu" { t.relu(&p[a]) } else { t.abs(&p[a]) })
        }
        "softplus" => check!(|t, p| t.softplus(&p[a])),
        "transpose" => check!(|t, p| t.transpose(&p[a])),
        "concat_cols" => {
            let b = store.add("b", normal(r, c + 1, &mut rng))?;
            check!(|t, p| t.concat_cols(&[p[a].clone(), p[b].clone()])?)
        }
        "slice_cols" => {
            let b = store.add("b", normal(r, c + 2, &mut rng))?;
            check!(|t, p| t.slice_cols(&p[b], 1, c + 1)?)
        }
        "broadcast_row" => {
            let row = store.add("row", normal(1, c, &mut rng))?;
            check!(|t, p| t.broadcast_row(&p[row], r)?)
        }
        "add_row" => {
            let row = store.add("row", normal(1, c, &mut rng))?;
            check!(|t, p| t.add_row(&p[a], &p[row])?)
        }
        "reshape" => check!(|t, p| t.reshape(&p[a], 1, r * c)?),
        "softmax_rows" => check!(|t, p| t.softmax_rows(&p[a], 1.3)?),
        "log_softmax_rows" => check!(|t, p| t.log_softmax_rows(&p[a])),
        "layernorm_rows" => {
            let gain = store.add("gain", normal(1, c, &mut rng))?;
            let bias = store.add("bias", normal(1, c, &mut rng))?;
            check!(|t, p| t.layernorm_rows(&p[a], &p[gain], &p[bias], 1e-5)?)
        }
        "sum_all" => check!(|t, p| t.sum_all(&p[a])),
        "mean_all" => check!(|t, p| t.mean_all(&p[a])),
        "attention" => {
            // two groups, two heads; query and key sets of different sizes
            let dh = c.div_ceil(2);
            let q = store.add("q", normal(2 * r, 2 * dh, &mut rng))?;
            let k = store.add("k", normal(2 * (r + 1), 2 * dh, &mut rng))?;
            let v = store.add("v", normal(2 * (r + 1), 2 * dh + 2, &mut rng))?;
            check!(|t, p| {
                let soft = t.attention(&p[q], &p[k], &p[v], 2, 2, 1.7, Weighting::Softmax)?;
                let plus = t.attention(&p[q], &p[k], &p[v], 2, 2, 1.7, Weighting::OnePlus(Activation::Sigmoid))?;
                t.concat_cols(&[soft, plus])?
            })
        }
        "pool_rows" => {
            store.get_mut(a).value = normal(2 * r, c, &mut rng);
            check!(|t, p| {
                let parts = [PoolKind::Mean, PoolKind::Sum, PoolKind::Max]
                    .into_iter()
                    .map(|k| t.pool_rows(&p[a], 2, k))
                    .collect::<Result<Vec<_>>>()?;
                t.concat_cols(&parts)?
            })
        }
        "repeat_rows" => check!(|t, p| t.repeat_rows(&p[a], 3)),
        "tile_rows" => check!(|t, p| t.tile_rows(&p[a], 3)),
        "mog_loglik" => {
            // r datasets of c + 1 points each, two components in 2D
            let groups = r;
            let raw = store.add("raw", normal(2 * groups, 5, &mut rng))?;
            let x = normal(groups * (c + 1), 2, &mut rng);
            finite_diff_check(&mut store, GRAD_STEP, |t, p| {
                let head = mog_head(t, &p[raw], groups, 2)?;
                mog_loglik_tape(t, &x, &head)
            })
        }
        other => Err(Error::Config(format!("no gradient case for op `{other}`"))),
    }
}

/// Ops covered by [`op_gradcheck`].
pub fn grad_ops() -> Vec<&'static str> {
    let mut ops = crate::autodiff::OP_NAMES.to_vec();
    ops.push("mog_loglik");
    ops
}

/// Moves every parameter off its constant initial value (zero biases, unit
/// gains, zero gamma). At those values a ReLU fed by a dead row sits exactly
/// on its kink, where finite differences and the subgradient disagree.
fn jitter(store: &mut ParamStore, rng: &mut Rng) {
    for p in store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v += 0.2 * rng.normal());
    }
}

fn small_mab(seed: u64) -> Result<GradCheckReport> {
    // d = 4, two heads, n = 3 queries against 3 keys
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let params = MabParams::new(&mut store, "mab", 4, 4, 4, 2, &mut rng)?;
    jitter(&mut store, &mut rng);
    let x = normal(3, 4, &mut rng);
    let y = normal(3, 4, &mut rng);
    finite_diff_check(&mut store, GRAD_STEP, |t, p| {
        let (xv, yv) = (t.constant(x.clone()), t.constant(y.clone()));
        let out = mab(t, p, &xv, &yv, &params, 1)?;
        Ok(weighted_sum(t, &out, seed))
    })
}

fn small_model(config: ModelConfig, n: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed);
    let mut model = SetModel::new(config, &mut rng)?;
    jitter(model.params_mut(), &mut rng);
    let x = normal(2 * n, model.config().encoder.input_dim, &mut rng);
    let structure = model.clone();
    finite_diff_check(model.params_mut(), GRAD_STEP, |t, p| {
        let xv = t.constant(x.clone());
        let out = structure.forward(t, p, &xv, 2)?;
        Ok(weighted_sum(t, &out, seed))
    })
}

fn model_config(input_dim: usize, dim: usize, heads: usize, blocks: Vec<EncoderBlock>, pooling: Pooling) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            input_dim,
            dim,
            heads,
            blocks,
        },
        decoder: DecoderConfig {
            pooling,
            post_sabs: 0,
            pma_rff: false,
            hidden: vec![],
            output_dim: 1,
            output_rows: 1,
        },
    }
}

/// The SAB+PMA max-regression shape at width 4 with two heads.
pub fn sab_pma_config() -> ModelConfig {
    model_config(4, 4, 2, vec![EncoderBlock::Sab, EncoderBlock::Sab], Pooling::Pma(1))
}

fn grad_suite(seed: u64, cases: &mut Vec<CaseResult>) -> Result<()> {
    let mut push = |name: String, rep: GradCheckReport, seed: u64| {
        cases.push(CaseResult {
            suite: "grad",
            name,
            worst: if rep.max_rel_error.is_nan() { f64::INFINITY } else { rep.max_rel_error },
            tol: GRAD_TOL,
            seed,
        })
    };
    for (i, op) in grad_ops().into_iter().enumerate() {
        let s = seed.wrapping_add(i as u64);
        let (rows, cols) = (2 + (s % 4) as usize, 2 + (s / 4 % 4) as usize);
        push(format!("op {op} ({rows}x{cols})"), op_gradcheck(op, rows, cols, s)?, s);
    }
    push("mab d=4 h=2 n=3".into(), small_mab(seed)?, seed);
    push("sab+pma d=4 h=2 n=3".into(), small_model(sab_pma_config(), 3, seed)?, seed);
    let isab = model_config(2, 4, 2, vec![EncoderBlock::Isab(2)], Pooling::Pma(2));
    push("isab+pma d=4 h=2 n=3".into(), small_model(isab, 3, seed)?, seed);
    let rffp = model_config(2, 4, 2, vec![EncoderBlock::RffpMean, EncoderBlock::RffpMax], Pooling::Dotprod);
    push("rffp+dotprod d=4 n=3".into(), small_model(rffp, 3, seed)?, seed);
    Ok(())
}

/// A random but valid model configuration with small widths.
pub fn random_architecture(rng: &mut Rng) -> ModelConfig {
    let all = [
        EncoderBlock::Fc,
        EncoderBlock::Linear,
        EncoderBlock::RffpMean,
        EncoderBlock::RffpMax,
        EncoderBlock::Sab,
        EncoderBlock::Isab(1 + rng.int_inclusive(0, 3)),
    ];
    let depth = rng.int_inclusive(1, 3);
    let blocks = (0..depth).map(|_| all[rng.int_inclusive(0, all.len() - 1)]).collect();
    let pooling = [Pooling::Mean, Pooling::Sum, Pooling::Max, Pooling::Dotprod, Pooling::Pma(rng.int_inclusive(1, 3))]
        [rng.int_inclusive(0, 4)];
    let is_pma = matches!(pooling, Pooling::Pma(_));
    let hidden = if rng.int_inclusive(0, 1) == 1 { vec![6] } else { vec![] };
    ModelConfig {
        encoder: EncoderConfig {
            input_dim: rng.int_inclusive(1, 3),
            dim: 8,
            heads: [1, 2, 4][rng.int_inclusive(0, 2)],
            blocks,
        },
        decoder: DecoderConfig {
            pooling,
            post_sabs: rng.int_inclusive(0, 1),
            pma_rff: is_pma && rng.int_inclusive(0, 1) == 1,
            hidden,
            output_dim: 3,
            output_rows: pooling.rows(),
        },
    }
}

/// `max |a - b| / max |b|`.
pub fn relative_diff(a: &Tensor, b: &Tensor) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    let num = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = b.max_abs();
    if num == 0.0 {
        0.0
    } else {
        num / den.max(f64::MIN_POSITIVE)
    }
}

/// A permutation acting independently within each of `groups` blocks.
pub fn grouped_permutation(rng: &mut Rng, groups: usize, n: usize) -> Vec<usize> {
    let mut perm = Vec::with_capacity(groups * n);
    for g in 0..groups {
        perm.extend(rng.permutation(n).into_iter().map(|i| g * n + i));
    }
    perm
}

fn perm_suite(seed: u64, cases: &mut Vec<CaseResult>) -> Result<()> {
    let mut rng = Rng::derive(seed, 10);
    let groups = 2;
    for a in 0..RANDOM_ARCHITECTURES {
        let case_seed = rng.next_u64();
        let mut r = Rng::new(case_seed);
        let config = random_architecture(&mut r);
        let name = format!(
            "model {} -> {}",
            config.encoder.blocks.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
            config.decoder.pooling
        );
        let model = SetModel::new(config, &mut r)?;
        let n = r.int_inclusive(2, 9);
        let x = normal(groups * n, model.config().encoder.input_dim, &mut r);
        let base = model.predict(&x, groups)?;
        let mut worst: f64 = 0.0;
        for _ in 0..PERMUTATIONS_PER_ARCH {
            let perm = grouped_permutation(&mut r, groups, n);
            worst = worst.max(relative_diff(&model.predict(&x.permute_rows(&perm), groups)?, &base));
        }
        cases.push(CaseResult {
            suite: "perm",
            name: format!("{a}: {name}"),
            worst,
            tol: PERM_TOL,
            seed: case_seed,
        });
    }

    // block-level equivariance, and invariance of MAB in the key set
    let case_seed = rng.next_u64();
    let mut r = Rng::new(case_seed);
    let mut store = ParamStore::new();
    let (d, n) = (8, 7);
    let sab_p = MabParams::new(&mut store, "sab", d, d, d, 2, &mut r)?;
    let isab_p = IsabParams::new(&mut store, "isab", d, d, 2, 3, &mut r)?;
    let mab_p = MabParams::new(&mut store, "mab", d, d, d, 4, &mut r)?;
    let lambda = store.add("lambda", Tensor::scalar(0.7))?;
    let gamma = store.add("gamma", Tensor::scalar(-0.4))?;
    let x = normal(groups * n, d, &mut r);
    let y = normal(groups * (n + 2), d, &mut r);
    type BlockFn<'a> = Box<dyn Fn(&mut Tape, &Bound, &Var, &Var) -> Result<Var> + 'a>;
    let blocks: Vec<(&str, bool, BlockFn)> = vec![
        ("sab equivariance", true, Box::new(|t, p, x, _| sab(t, p, x, &sab_p, groups))),
        ("isab equivariance", true, Box::new(|t, p, x, _| isab(t, p, x, &isab_p, groups))),
        ("mab equivariance in X", true, Box::new(|t, p, x, y| mab(t, p, x, y, &mab_p, groups))),
        (
            "rffp-mean equivariance",
            true,
            Box::new(|t, p, x, _| rffp_layer(t, x, &p[lambda], &p[gamma], PoolKind::Mean, groups)),
        ),
        (
            "rffp-max equivariance",
            true,
            Box::new(|t, p, x, _| rffp_layer(t, x, &p[lambda], &p[gamma], PoolKind::Max, groups)),
        ),
        ("mab invariance in Y", false, Box::new(|t, p, x, y| mab(t, p, x, y, &mab_p, groups))),
    ];
    let eval = |f: &BlockFn, x: &Tensor, y: &Tensor| -> Result<Tensor> {
        let mut tape = Tape::inference();
        let p = store.bind(&mut tape);
        let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
        Ok(f(&mut tape, &p, &xv, &yv)?.value().clone())
    };
    for (name, permute_x, f) in &blocks {
        let base = eval(f, &x, &y)?;
        let mut worst: f64 = 0.0;
        for _ in 0..PERMUTATIONS_PER_ARCH {
            if *permute_x {
                let perm = grouped_permutation(&mut r, groups, n);
                let out = eval(f, &x.permute_rows(&perm), &y)?;
                worst = worst.max(relative_diff(&out, &base.permute_rows(&perm)));
            } else {
                let perm = grouped_permutation(&mut r, groups, n + 2);
                worst = worst.max(relative_diff(&eval(f, &x, &y.permute_rows(&perm))?, &base));
            }
        }
        cases.push(CaseResult {
            suite: "perm",
            name: name.to_string(),
            worst,
            tol: PERM_TOL,
            seed: case_seed,
        });
    }
    Ok(())
}

/// `max |a - b| / max(1, |b|)` elementwise.
fn scaled_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// PMA whose projections are identities and whose seeds are zero.
fn identity_pma(store: &mut ParamStore, d: usize, heads: usize, k: usize, rng: &mut Rng) -> Result<PmaParams> {
    let pma = PmaParams::new(store, "pma", d, heads, k, false, rng)?;
    let mh = &pma.mab.multihead;
    for id in [mh.wq, mh.wk, mh.wv, mh.wo] {
        store.get_mut(id).value = Tensor::identity(d);
    }
    store.get_mut(pma.seeds).value = Tensor::zeros(k, d);
    Ok(pma)
}

fn lemma_suite(seed: u64, cases: &mut Vec<CaseResult>) -> Result<()> {
    let mut rng = Rng::derive(seed, 20);
    let mut worst_mean: f64 = 0.0;
    let mut worst_pma_mean: f64 = 0.0;
    let mut worst_sum: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.int_inclusive(1, 40);
        let heads = [1, 2, 4][rng.int_inclusive(0, 2)];
        let d = 4 * rng.int_inclusive(1, 3);
        let z = Tensor::from_fn(n, d, |_, _| rng.uniform(-5.0, 5.0));
        let mean = z.column_means();
        let sum = z.column_sums();

        let mut tape = Tape::inference();
        let q = tape.constant(Tensor::zeros(1, d));
        let zv = tape.constant(z.clone());
        let out = att(&mut tape, &q, &zv, &zv, (d as f64).sqrt())?;
        worst_mean = worst_mean.max(scaled_abs_diff(out.value(), &mean));

        let mut store = ParamStore::new();
        let pma = identity_pma(&mut store, d, heads, 1, &mut rng)?;
        let p = store.bind(&mut tape);
        let soft = pma_attention(&mut tape, &p, &zv, &pma, 1, Weighting::Softmax)?;
        worst_pma_mean = worst_pma_mean.max(scaled_abs_diff(soft.value(), &mean));
        for f in [Activation::Identity, Activation::Relu] {
            let out = pma_attention(&mut tape, &p, &zv, &pma, 1, Weighting::OnePlus(f))?;
            worst_sum = worst_sum.max(scaled_abs_diff(out.value(), &sum));
        }
    }
    for (name, worst) in [
        ("zero query gives mean", worst_mean),
        ("zero seed PMA gives mean", worst_pma_mean),
        ("zero seed 1+f PMA gives sum", worst_sum),
    ] {
        cases.push(CaseResult {
            suite: "lemma",
            name: name.into(),
            worst,
            tol: LEMMA_TOL,
            seed,
        });
    }
    Ok(())
}

fn em_suite(seed: u64, cases: &mut Vec<CaseResult>) -> Result<()> {
    let mut rng = Rng::derive(seed, 30);
    let mut worst_drop: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.int_inclusive(1, 50);
        let k = rng.int_inclusive(1, 5);
        let x = Tensor::from_fn(n, 2, |_, _| rng.uniform(-4.0, 4.0));
        let theta = MogParams {
            pi: rng.dirichlet(k, 1.0),
            mu: Tensor::from_fn(k, 2, |_, _| rng.uniform(-4.0, 4.0)),
            sigma: Tensor::from_fn(k, 2, |_, _| rng.uniform(0.05, 3.0)),
        };
        let before = mog_loglik(&x, &theta)?.total;
        let after = mog_loglik(&x, &em_step(&x, &theta)?.params)?.total;
        worst_drop = worst_drop.max(before - after);
    }
    cases.push(CaseResult {
        suite: "em",
        name: "loglik never decreases (1000 draws)".into(),
        worst: worst_drop,
        tol: EM_SLACK,
        seed,
    });
    Ok(())
}
