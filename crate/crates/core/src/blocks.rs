//! Set attention blocks: Att, Multihead, MAB, SAB, ISAB, PMA, and the
//! rFFp / dot-product pooling baselines.
//!
//! Every block works on a batch of `groups` sets of equal size stacked
//! row-wise: a batch of `B` sets of `n` elements in `d` dimensions is a
//! `(B*n) x d` tensor. Row-wise layers act on the stack directly and attention
//! never mixes rows from different sets.

use crate::autodiff::{PoolKind, Tape, Var, Weighting};
use crate::error::{Error, Result};
use crate::param::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Xavier/Glorot uniform initialisation.
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.uniform(-a, a))
}

/// Standard normal entries scaled by `1/sqrt(cols)`; used for inducing
/// points and seed vectors.
pub fn scaled_normal(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let s = 1.0 / (cols as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| s * rng.normal())
}

/// Plain attention `softmax(Q K^T / scale) V` built from primitive tape ops.
///
/// The block implementations use the fused grouped kernel in
/// [`Tape::attention`]; this composition is kept as the reference route.
pub fn att(tape: &mut Tape, q: &Var, k: &Var, v: &Var, scale: f64) -> Result<Var> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::Dimension {
            op: "att",
            lhs: q.shape(),
            rhs: k.shape(),
        });
    }
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, &kt)?;
    let w = tape.softmax_rows(&scores, scale)?;
    tape.matmul(&w, v)
}

/// Dense layer `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.w"), xavier_uniform(d_in, d_out, rng))?;
        let bias = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(1, d_out))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: &Var) -> Result<Var> {
        let y = tape.matmul(x, &p[self.weight])?;
        match self.bias {
            Some(b) => tape.add_row(&y, &p[b]),
            None => Ok(y),
        }
    }
}

/// Layer-normalisation gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(1, d))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, d))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: &Var) -> Result<Var> {
        tape.layernorm_rows(x, &p[self.gain], &p[self.bias], LAYERNORM_EPS)
    }
}

/// Multihead attention parameters.
///
/// The per-head projections `W_j^Q, W_j^K, W_j^V` (each `d_in x d/h`) are
/// stored side by side as column blocks of one `d_in x d` matrix, so head `j`
/// owns columns `j*d/h .. (j+1)*d/h`. `W^O` is `d x d`.
#[derive(Clone, Debug)]
pub struct MultiheadParams {
    pub heads: usize,
    pub dim: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl MultiheadParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dq_in: usize,
        dkv_in: usize,
        dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "model dimension {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            heads,
            dim,
            wq: store.add(format!("{name}.wq"), xavier_uniform(dq_in, dim, rng))?,
            wk: store.add(format!("{name}.wk"), xavier_uniform(dkv_in, dim, rng))?,
            wv: store.add(format!("{name}.wv"), xavier_uniform(dkv_in, dim, rng))?,
            wo: store.add(format!("{name}.wo"), xavier_uniform(dim, dim, rng))?,
        })
    }

    /// Softmax temperature: the square root of the full model dimension.
    pub fn scale(&self) -> f64 {
        (self.dim as f64).sqrt()
    }
}

/// `concat_j Att(Q W_j^Q, K W_j^K, V W_j^V) W^O` over `groups` stacked sets.
#[allow(clippy::too_many_arguments)]
pub fn multihead(
    tape: &mut Tape,
    p: &Bound,
    q: &Var,
    k: &Var,
    v: &Var,
    mh: &MultiheadParams,
    groups: usize,
    weighting: Weighting,
) -> Result<Var> {
    let qp = tape.matmul(q, &p[mh.wq])?;
    let kp = tape.matmul(k, &p[mh.wk])?;
    let vp = tape.matmul(v, &p[mh.wv])?;
    let o = tape.attention(&qp, &kp, &vp, groups, mh.heads, mh.scale(), weighting)?;
    tape.matmul(&o, &p[mh.wo])
}

/// Multihead attention block parameters.
#[derive(Clone, Debug)]
pub struct MabParams {
    pub multihead: MultiheadParams,
    /// Learned affine `d_x -> d` map on the residual branch, present only
    /// when the query set is not already `d`-dimensional.
    pub residual: Option<Linear>,
    pub ff: Linear,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
}

impl MabParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dx: usize,
        dy: usize,
        dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let multihead = MultiheadParams::new(store, &format!("{name}.mh"), dx, dy, dim, heads, rng)?;
        let residual = if dx != dim {
            Some(Linear::new(store, &format!("{name}.res"), dx, dim, true, rng)?)
        } else {
            None
        };
        Ok(Self {
            multihead,
            residual,
            ff: Linear::new(store, &format!("{name}.ff"), dim, dim, true, rng)?,
            ln1: LayerNormParams::new(store, &format!("{name}.ln1"), dim)?,
            ln2: LayerNormParams::new(store, &format!("{name}.ln2"), dim)?,
        })
    }
}

/// `MAB(X, Y) = LayerNorm(H + rFF(H))`, `H = LayerNorm(X + Multihead(X, Y, Y))`.
pub fn mab(tape: &mut Tape, p: &Bound, x: &Var, y: &Var, params: &MabParams, groups: usize) -> Result<Var> {
    mab_weighted(tape, p, x, y, params, groups, Weighting::Softmax)
}

pub fn mab_weighted(
    tape: &mut Tape,
    p: &Bound,
    x: &Var,
    y: &Var,
    params: &MabParams,
    groups: usize,
    weighting: Weighting,
) -> Result<Var> {
    let att = multihead(tape, p, x, y, y, &params.multihead, groups, weighting)?;
    let res = match &params.residual {
        Some(r) => r.forward(tape, p, x)?,
        None => x.clone(),
    };
    let h = tape.add(&res, &att)?;
    let h = params.ln1.forward(tape, p, &h)?;
    let ff = params.ff.forward(tape, p, &h)?;
    let ff = tape.relu(&ff);
    let out = tape.add(&h, &ff)?;
    params.ln2.forward(tape, p, &out)
}

/// `SAB(X) = MAB(X, X)`.
pub fn sab(tape: &mut Tape, p: &Bound, x: &Var, params: &MabParams, groups: usize) -> Result<Var> {
    mab(tape, p, x, x, params, groups)
}

#[derive(Clone, Debug)]
pub struct IsabParams {
    pub inducing: ParamId,
    pub num_inducing: usize,
    /// `H = MAB(I, X)`.
    pub mab1: MabParams,
    /// `MAB(X, H)`.
    pub mab2: MabParams,
}

impl IsabParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        dim: usize,
        heads: usize,
        m: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("ISAB needs at least one inducing point".into()));
        }
        Ok(Self {
            inducing: store.add(format!("{name}.inducing"), scaled_normal(m, dim, rng))?,
            num_inducing: m,
            mab1: MabParams::new(store, &format!("{name}.mab1"), dim, d_in, dim, heads, rng)?,
            mab2: MabParams::new(store, &format!("{name}.mab2"), d_in, dim, dim, heads, rng)?,
        })
    }
}

/// `ISAB_m(X) = MAB(X, MAB(I, X))`.
pub fn isab(tape: &mut Tape, p: &Bound, x: &Var, params: &IsabParams, groups: usize) -> Result<Var> {
    let h = isab_inducing(tape, p, x, params, groups)?;
    mab(tape, p, x, &h, &params.mab2, groups)
}

/// The `m x d` (per set) intermediate `H = MAB(I, X)`.
pub fn isab_inducing(tape: &mut Tape, p: &Bound, x: &Var, params: &IsabParams, groups: usize) -> Result<Var> {
    let i = tape.tile_rows(&p[params.inducing], groups);
    mab(tape, p, &i, x, &params.mab1, groups)
}

#[derive(Clone, Debug)]
pub struct PmaParams {
    pub seeds: ParamId,
    pub num_seeds: usize,
    pub mab: MabParams,
    /// Optional row-wise `FC(d, ReLU)` applied to `Z` before attending.
    pub rff: Option<Linear>,
}

impl PmaParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        k: usize,
        with_rff: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("PMA needs at least one seed vector".into()));
        }
        let seeds = store.add(format!("{name}.seeds"), scaled_normal(k, dim, rng))?;
        let mab = MabParams::new(store, &format!("{name}.mab"), dim, dim, dim, heads, rng)?;
        let rff = if with_rff {
            Some(Linear::new(store, &format!("{name}.rff"), dim, dim, true, rng)?)
        } else {
            None
        };
        Ok(Self {
            seeds,
            num_seeds: k,
            mab,
            rff,
        })
    }
}

/// `PMA_k(Z) = MAB(S, rFF(Z))`; `k` rows per set.
pub fn pma(tape: &mut Tape, p: &Bound, z: &Var, params: &PmaParams, groups: usize) -> Result<Var> {
    let z = pma_input(tape, p, z, params)?;
    let s = tape.tile_rows(&p[params.seeds], groups);
    mab(tape, p, &s, &z, &params.mab, groups)
}

/// The multihead aggregation inside PMA, `Multihead(S, rFF(Z), rFF(Z))`,
/// before residual and normalisation; `weighting` selects the score map.
pub fn pma_attention(
    tape: &mut Tape,
    p: &Bound,
    z: &Var,
    params: &PmaParams,
    groups: usize,
    weighting: Weighting,
) -> Result<Var> {
    let z = pma_input(tape, p, z, params)?;
    let s = tape.tile_rows(&p[params.seeds], groups);
    multihead(tape, p, &s, &z, &z, &params.mab.multihead, groups, weighting)
}

fn pma_input(tape: &mut Tape, p: &Bound, z: &Var, params: &PmaParams) -> Result<Var> {
    match &params.rff {
        Some(ff) => {
            let y = ff.forward(tape, p, z)?;
            Ok(tape.relu(&y))
        }
        None => Ok(z.clone()),
    }
}

/// Permutation-equivariant layer `ReLU(lambda * x_i + gamma * pool(X))`.
pub fn rffp_layer(
    tape: &mut Tape,
    x: &Var,
    lambda: &Var,
    gamma: &Var,
    pool: PoolKind,
    groups: usize,
) -> Result<Var> {
    let n = x.rows() / groups.max(1);
    let pooled = tape.pool_rows(x, groups, pool)?;
    let spread = tape.repeat_rows(&pooled, n);
    let a = tape.scale_by(x, lambda)?;
    let b = tape.scale_by(&spread, gamma)?;
    let s = tape.add(&a, &b)?;
    Ok(tape.relu(&s))
}

/// `softmax(Z w^T)`-weighted sum of the rows of each set; one row per set.
pub fn dotprod_pool(tape: &mut Tape, z: &Var, w: &Var, groups: usize) -> Result<Var> {
    if w.shape() != (1, z.cols()) {
        return Err(Error::Dimension {
            op: "dotprod_pool",
            lhs: z.shape(),
            rhs: w.shape(),
        });
    }
    let q = tape.tile_rows(w, groups);
    tape.attention(&q, z, z, groups, 1, 1.0, Weighting::Softmax)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| rng.normal())
    }

    fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
        a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
    }

    #[test]
    fn att_zero_query_is_column_mean() {
        let mut rng = Rng::new(1);
        let mut tape = Tape::new();
        let x = random(7, 3, &mut rng);
        let q = tape.constant(Tensor::zeros(1, 3));
        let xv = tape.constant(x.clone());
        let out = att(&mut tape, &q, &xv, &xv, 3f64.sqrt()).unwrap();
        let mean = x.column_means();
        for (a, b) in out.value().data().iter().zip(mean.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn att_single_key_returns_its_value() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&[[3.0, -1.0], [0.5, 2.0]]).unwrap());
        let k = tape.constant(Tensor::from_rows(&[[1.0, 1.0]]).unwrap());
        let v = tape.constant(Tensor::from_rows(&[[4.0, 5.0, 6.0]]).unwrap());
        let out = att(&mut tape, &q, &k, &v, 1.0).unwrap();
        for r in 0..2 {
            assert_eq!(out.value().row(r), &[4.0, 5.0, 6.0]);
        }
    }

    #[test]
    fn att_hand_evaluation() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&[[1.0, 0.0]]).unwrap());
        let k = tape.constant(Tensor::from_rows(&[[10.0, 0.0], [0.0, 10.0]]).unwrap());
        let v = tape.constant(Tensor::from_rows(&[[2.0, 0.0], [0.0, 4.0]]).unwrap());
        let out = att(&mut tape, &q, &k, &v, 1.0).unwrap();
        // scores [10, 0]; w = e^10 / (e^10 + 1)
        let w = 1.0 / (1.0 + (-10f64).exp());
        assert!((out.value().get(0, 0) - 2.0 * w).abs() < 1e-14);
        assert!((out.value().get(0, 1) - 4.0 * (1.0 - w)).abs() < 1e-14);
    }

    #[test]
    fn att_dimension_mismatch() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros(1, 2));
        let k = tape.constant(Tensor::zeros(3, 3));
        assert!(att(&mut tape, &q, &k, &k, 1.0).is_err());
    }

    #[test]
    fn fused_attention_matches_composition_per_head() {
        let mut rng = Rng::new(9);
        let (groups, nq, nk, d, heads) = (3, 4, 5, 6, 3);
        let q = random(groups * nq, d, &mut rng);
        let k = random(groups * nk, d, &mut rng);
        let v = random(groups * nk, d, &mut rng);
        let mut tape = Tape::inference();
        let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let fused = tape.attention(&qv, &kv, &vv, groups, heads, 1.7, Weighting::Softmax).unwrap();
        let dh = d / heads;
        for g in 0..groups {
            let mut outs = Vec::new();
            for h in 0..heads {
                let sl = |t: &Tensor, n: usize| t.row_block(g * n, n).slice_cols(h * dh, (h + 1) * dh).unwrap();
                let qs = tape.constant(sl(&q, nq));
                let ks = tape.constant(sl(&k, nk));
                let vs = tape.constant(sl(&v, nk));
                outs.push(att(&mut tape, &qs, &ks, &vs, 1.7).unwrap());
            }
            let cat = tape.concat_cols(&outs).unwrap();
            assert!(close(&fused.value().row_block(g * nq, nq), cat.value(), 1e-13));
        }
    }

    fn identity_multihead(store: &mut ParamStore, d: usize) -> MultiheadParams {
        let mut rng = Rng::new(0);
        let mh = MultiheadParams::new(store, "mh", d, d, d, 1, &mut rng).unwrap();
        for id in [mh.wq, mh.wk, mh.wv, mh.wo] {
            store.get_mut(id).value = Tensor::identity(d);
        }
        mh
    }

    #[test]
    fn single_head_identity_multihead_is_att() {
        let mut rng = Rng::new(2);
        let mut store = ParamStore::new();
        let mh = identity_multihead(&mut store, 4);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let q = tape.constant(random(3, 4, &mut rng));
        let k = tape.constant(random(5, 4, &mut rng));
        let v = tape.constant(random(5, 4, &mut rng));
        let a = multihead(&mut tape, &p, &q, &k, &v, &mh, 1, Weighting::Softmax).unwrap();
        let b = att(&mut tape, &q, &k, &v, 2.0).unwrap();
        assert!(close(a.value(), b.value(), 1e-13));
    }

    #[test]
    fn multihead_zero_values_give_zero() {
        let mut rng = Rng::new(3);
        let mut store = ParamStore::new();
        let mh = MultiheadParams::new(&mut store, "mh", 4, 4, 4, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let q = tape.constant(random(3, 4, &mut rng));
        let k = tape.constant(random(5, 4, &mut rng));
        let v = tape.constant(Tensor::zeros(5, 4));
        let a = multihead(&mut tape, &p, &q, &k, &v, &mh, 1, Weighting::Softmax).unwrap();
        assert!(a.value().data().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn multihead_rejects_indivisible_heads() {
        let mut rng = Rng::new(3);
        let mut store = ParamStore::new();
        assert!(MultiheadParams::new(&mut store, "mh", 5, 5, 5, 2, &mut rng).is_err());
    }

    #[test]
    fn sab_is_mab_with_self() {
        let mut rng = Rng::new(4);
        let mut store = ParamStore::new();
        let params = MabParams::new(&mut store, "sab", 4, 4, 4, 2, &mut rng).unwrap();
        let mut tape = Tape::inference();
        let p = store.bind(&mut tape);
        let x = tape.constant(random(6, 4, &mut rng));
        let a = sab(&mut tape, &p, &x, &params, 1).unwrap();
        let b = mab(&mut tape, &p, &x, &x, &params, 1).unwrap();
        assert_eq!(a.value(), b.value());
    }

    #[test]
    fn mab_output_shape_independent_of_key_count() {
        let mut rng = Rng::new(5);
        let mut store = ParamStore::new();
        let params = MabParams::new(&mut store, "mab", 4, 3, 4, 2, &mut rng).unwrap();
        let mut tape = Tape::inference();
        let p = store.bind(&mut tape);
        let x = tape.constant(random(6, 4, &mut rng));
        for ny in [1, 2, 9] {
            let y = tape.constant(random(ny, 3, &mut rng));
            assert_eq!(mab(&mut tape, &p, &x, &y, &params, 1).unwrap().shape(), (6, 4));
        }
    }

    #[test]
    fn isab_shapes() {
        let mut rng = Rng::new(6);
        let mut store = ParamStore::new();
        let params = IsabParams::new(&mut store, "isab", 3, 8, 2, 5, &mut rng).unwrap();
        let mut tape = Tape::inference();
        let p = store.bind(&mut tape);
        let x = tape.constant(random(2 * 11, 3, &mut rng));
        assert_eq!(isab_inducing(&mut tape, &p, &x, &params, 2).unwrap().shape(), (2 * 5, 8));
        assert_eq!(isab(&mut tape, &p, &x, &params, 2).unwrap().shape(), (2 * 11, 8));
    }

    #[test]
    fn rffp_reductions() {
        let mut rng = Rng::new(7);
        let x = random(5, 3, &mut rng);
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let one = tape.constant(Tensor::scalar(1.0));
        let zero = tape.constant(Tensor::scalar(0.0));
        let y = rffp_layer(&mut tape, &xv, &one, &zero, PoolKind::Max, 1).unwrap();
        assert_eq!(y.value(), &x.map(|v| v.max(0.0)));

        let single = Tensor::from_rows(&[[0.7, -0.2]]).unwrap();
        let sv = tape.constant(single.clone());
        let (l, g) = (tape.constant(Tensor::scalar(1.5)), tape.constant(Tensor::scalar(-0.5)));
        let y = rffp_layer(&mut tape, &sv, &l, &g, PoolKind::Mean, 1).unwrap();
        assert!(close(y.value(), &single.map(|v| (1.0 * v).max(0.0)), 1e-15));
    }

    #[test]
    fn dotprod_pool_edge_cases() {
        let mut rng = Rng::new(8);
        let z = random(6, 3, &mut rng);
        let mut tape = Tape::inference();
        let zv = tape.constant(z.clone());
        let w = tape.constant(Tensor::zeros(1, 3));
        let out = dotprod_pool(&mut tape, &zv, &w, 1).unwrap();
        assert!(close(out.value(), &z.column_means(), 1e-14));

        let one = tape.constant(z.row_block(2, 1));
        let w = tape.constant(random(1, 3, &mut rng));
        let out = dotprod_pool(&mut tape, &one, &w, 1).unwrap();
        assert_eq!(out.value(), &z.row_block(2, 1));
    }
}
