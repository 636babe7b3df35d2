//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each operation computes its
//! value eagerly and, when at least one input is tracked and the tape is
//! recording, appends a node holding what its adjoint rule needs. Nodes are
//! appended in evaluation order, so the tape is topologically sorted and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! A non-recording tape (see [`Tape::inference`]) keeps nothing: intermediate
//! values are freed as soon as the caller drops them.

use std::cell::Cell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::param::ParamId;
use crate::tensor::{gemm, Tensor};

/// A value produced on a tape. Cheap to clone.
#[derive(Clone)]
pub struct Var {
    id: Option<usize>,
    value: Rc<Tensor>,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("value", &self.value)
            .finish()
    }
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn rows(&self) -> usize {
        self.value.rows()
    }

    pub fn cols(&self) -> usize {
        self.value.cols()
    }

    /// Tape node index; `None` for constants and for values built on a
    /// non-recording tape.
    pub fn node(&self) -> Option<usize> {
        self.id
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }
}

/// Row aggregation used by pooling decoders and rFFp layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Mean,
    Sum,
    Max,
}

/// Scalar nonlinearity `f` in the un-normalised weighting `1 + f(.)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

/// How attention scores are turned into weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weighting {
    /// Row-wise softmax of the scaled scores.
    Softmax,
    /// Element-wise `1 + f(score / scale)`, no normalisation.
    OnePlus(Activation),
}

/// User-defined operation with a hand-written adjoint.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, given the output gradient.
    /// Entries for untracked inputs are ignored.
    fn backward(&self, inputs: &[Var], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Relu(Var),
    Softplus(Var),
    Abs(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    BroadcastRow(Var),
    AddRow(Var, Var),
    Reshape(Var),
    SoftmaxRows(Var, f64),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    SumAll(Var),
    MeanAll(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        heads: usize,
        scale: f64,
        weighting: Weighting,
        probs: Vec<Tensor>,
    },
    Pool {
        x: Var,
        groups: usize,
        kind: PoolKind,
        argmax: Vec<usize>,
    },
    RepeatRows(Var, usize),
    TileRows(Var),
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::ScaleBy(..) => "scale_by",
            Op::Relu(..) => "relu",
            Op::Softplus(..) => "softplus",
            Op::Abs(..) => "abs",
            Op::Transpose(..) => "transpose",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::BroadcastRow(..) => "broadcast_row",
            Op::AddRow(..) => "add_row",
            Op::Reshape(..) => "reshape",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::LayerNorm { .. } => "layernorm_rows",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::Attention { .. } => "attention",
            Op::Pool { .. } => "pool_rows",
            Op::RepeatRows(..) => "repeat_rows",
            Op::TileRows(..) => "tile_rows",
            Op::Custom(op, _) => op.name(),
        }
    }
}

struct Node {
    op: Op,
    value: Rc<Tensor>,
    param: Option<ParamId>,
}

/// Operation record for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that records nothing; every result is a constant.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of the recorded operations in evaluation order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    pub fn constant(&self, value: Tensor) -> Var {
        Var {
            id: None,
            value: Rc::new(value),
        }
    }

    /// A tracked leaf not tied to a parameter store.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, None)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        self.push_leaf(value, Some(id))
    }

    fn push_leaf(&mut self, value: Tensor, param: Option<ParamId>) -> Var {
        let value = Rc::new(value);
        if !self.recording {
            return Var { id: None, value };
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            value: value.clone(),
            param,
        });
        Var {
            id: Some(id),
            value,
        }
    }

    fn tracks(&self, inputs: &[&Var]) -> bool {
        self.recording && inputs.iter().any(|v| v.id.is_some())
    }

    fn record(&mut self, value: Tensor, tracked: bool, op: impl FnOnce() -> Op) -> Var {
        let value = Rc::new(value);
        if !tracked {
            return Var { id: None, value };
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: op(),
            value: value.clone(),
            param: None,
        });
        Var {
            id: Some(id),
            value,
        }
    }

    pub fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = a.value().matmul(b.value())?;
        let t = self.tracks(&[a, b]);
        Ok(self.record(value, t, || Op::MatMul(a.clone(), b.clone())))
    }

    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = a.value().zip_map(b.value(), |x, y| x + y).map_err(|_| Error::Dimension {
            op: "add",
            lhs: a.shape(),
            rhs: b.shape(),
        })?;
        let t = self.tracks(&[a, b]);
        Ok(self.record(value, t, || Op::Add(a.clone(), b.clone())))
    }

    pub fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = a.value().zip_map(b.value(), |x, y| x - y).map_err(|_| Error::Dimension {
            op: "sub",
            lhs: a.shape(),
            rhs: b.shape(),
        })?;
        let t = self.tracks(&[a, b]);
        Ok(self.record(value, t, || Op::Sub(a.clone(), b.clone())))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = a.value().zip_map(b.value(), |x, y| x * y).map_err(|_| Error::Dimension {
            op: "mul",
            lhs: a.shape(),
            rhs: b.shape(),
        })?;
        let t = self.tracks(&[a, b]);
        Ok(self.record(value, t, || Op::Mul(a.clone(), b.clone())))
    }

    pub fn scale(&mut self, a: &Var, c: f64) -> Var {
        let value = a.value().map(|x| c * x);
        let t = self.tracks(&[a]);
        self.record(value, t, || Op::Scale(a.clone(), c))
    }

    pub fn add_scalar(&mut self, a: &Var, c: f64) -> Var {
        let value = a.value().map(|x| x + c);
        let t = self.tracks(&[a]);
        self.record(value, t, || Op::AddScalar(a.clone()))
    }

    /// `x * s` for a 1x1 `s`.
    pub fn scale_by(&mut self, x: &Var, s: &Var) -> Result<Var> {
        if s.shape() != (1, 1) {
            return Err(Error::Dimension {
                op: "scale_by",
                lhs: x.shape(),
                rhs: s.shape(),
            });
        }
        let c = s.value().get(0, 0);
        let value = x.value().map(|v| c * v);
        let t = self.tracks(&[x, s]);
        Ok(self.record(value, t, || Op::ScaleBy(x.clone(), s.clone())))
    }

    pub fn relu(&mut self, a: &Var) -> Var {
        let value = a.value().map(|x| x.max(0.0));
        let t = self.tracks(&[a]);
        self.record(value, t, || Op::Relu(a.clone()))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: &Var) -> Var {
        let value = a.value().map(softplus);
        let t = self.tracks(&[a]);
        self.record(value, t, || Op::Softplus(a.clone()))
    }

    pub fn abs(&mut self, a: &Var) -> Var {
        let value = a.value().map(f64::abs);
        let t = self.tracks(&[a]);
        self.record(value, t, || Op::Abs(a.clone()))
    }

    pub fn transpose(&mut self, a: &Var) -> Var {
        let value = a.value().transpose();
        let t = self.tracks(&[a]);
        self.record(value, t, || Op::Transpose(a.clone()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| p.value()).collect();
        let value = Tensor::concat_cols(&refs)?;
        let t = self.tracks(&parts.iter().collect::<Vec<_>>());
        Ok(self.record(value, t, || Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: &Var, start: usize, end: usize) -> Result<Var> {
        let value = a.value().slice_cols(start, end)?;
        let t = self.tracks(&[a]);
        Ok(self.record(value, t, || Op::SliceCols(a.clone(), start)))
    }

    /// Splits into consecutive column blocks of the given widths.
    pub fn split_cols(&mut self, a: &Var, widths: &[usize]) -> Result<Vec<Var>> {
        let total: usize = widths.iter().sum();
        if total != a.cols() {
            return Err(Error::Contract(format!(
                "split_cols: widths sum to {total}, tensor has {} columns",
                a.cols()
            )));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(widths.len());
        for &w in widths {
            out.push(self.slice_cols(a, start, start + w)?);
            start += w;
        }
        Ok(out)
    }

    /// Repeats a `1 x d` row `n` times.
    pub fn broadcast_row(&mut self, row: &Var, n: usize) -> Result<Var> {
        if row.rows() != 1 {
            return Err(Error::Dimension {
                op: "broadcast_row",
                lhs: row.shape(),
                rhs: (n, row.cols()),
            });
        }
        let r = row.value().row(0);
        let mut data = Vec::with_capacity(n * r.len());
        for _ in 0..n {
            data.extend_from_slice(r);
        }
        let value = Tensor::from_vec(n, r.len(), data)?;
        let t = self.tracks(&[row]);
        Ok(self.record(value, t, || Op::BroadcastRow(row.clone())))
    }

    /// `x + 1 * row`, the bias add of a dense layer.
    pub fn add_row(&mut self, x: &Var, row: &Var) -> Result<Var> {
        if row.rows() != 1 || row.cols() != x.cols() {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: x.shape(),
                rhs: row.shape(),
            });
        }
        let mut value = x.value().clone();
        let b = row.value().row(0);
        for r in 0..value.rows() {
            for (v, bb) in value.row_mut(r).iter_mut().zip(b) {
                *v += bb;
            }
        }
        let t = self.tracks(&[x, row]);
        Ok(self.record(value, t, || Op::AddRow(x.clone(), row.clone())))
    }

    /// Row-major reinterpretation with a new shape.
    pub fn reshape(&mut self, a: &Var, rows: usize, cols: usize) -> Result<Var> {
        let value = a.value().reshape(rows, cols)?;
        let t = self.tracks(&[a]);
        Ok(self.record(value, t, || Op::Reshape(a.clone())))
    }

    /// Row-wise `softmax(x / scale)` with max subtraction.
    pub fn softmax_rows(&mut self, x: &Var, scale: f64) -> Result<Var> {
        if !(scale > 0.0) {
            return Err(Error::Contract(format!("softmax scale must be > 0, got {scale}")));
        }
        let mut value = x.value().clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r), 1.0 / scale);
        }
        let t = self.tracks(&[x]);
        Ok(self.record(value, t, || Op::SoftmaxRows(x.clone(), scale)))
    }

    pub fn log_softmax_rows(&mut self, x: &Var) -> Var {
        let mut value = x.value().clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = self.tracks(&[x]);
        self.record(value, t, || Op::LogSoftmaxRows(x.clone()))
    }

    /// Per-row standardisation followed by `* gain + bias` (both `1 x d`).
    pub fn layernorm_rows(&mut self, x: &Var, gain: &Var, bias: &Var, eps: f64) -> Result<Var> {
        let d = x.cols();
        if gain.shape() != (1, d) || bias.shape() != (1, d) {
            return Err(Error::Dimension {
                op: "layernorm_rows",
                lhs: x.shape(),
                rhs: gain.shape(),
            });
        }
        if !(eps > 0.0) {
            return Err(Error::Contract(format!("layernorm eps must be > 0, got {eps}")));
        }
        let n = x.rows();
        let mut xhat = x.value().clone();
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = xhat.row_mut(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let mut value = xhat.clone();
        let (g, b) = (gain.value().row(0), bias.value().row(0));
        for r in 0..n {
            for ((v, gg), bb) in value.row_mut(r).iter_mut().zip(g).zip(b) {
                *v = *v * gg + bb;
            }
        }
        let t = self.tracks(&[x, gain, bias]);
        Ok(self.record(value, t, || Op::LayerNorm {
            x: x.clone(),
            gain: gain.clone(),
            bias: bias.clone(),
            xhat,
            inv_std,
        }))
    }

    pub fn sum_all(&mut self, a: &Var) -> Var {
        let value = Tensor::scalar(a.value().sum());
        let t = self.tracks(&[a]);
        self.record(value, t, || Op::SumAll(a.clone()))
    }

    pub fn mean_all(&mut self, a: &Var) -> Var {
        let n = a.value().len().max(1) as f64;
        let value = Tensor::scalar(a.value().sum() / n);
        let t = self.tracks(&[a]);
        self.record(value, t, || Op::MeanAll(a.clone()))
    }

    /// Grouped multi-head attention.
    ///
    /// `q` holds `groups` stacked query sets of equal size, `k` and `v` hold
    /// the matching key/value sets. Head `j` reads column block `j` of each
    /// operand; the per-head outputs are written side by side, which is the
    /// concatenation over heads. Scores are divided by `scale` before the
    /// weighting is applied.
    pub fn attention(
        &mut self,
        q: &Var,
        k: &Var,
        v: &Var,
        groups: usize,
        heads: usize,
        scale: f64,
        weighting: Weighting,
    ) -> Result<Var> {
        let dims_err = || Error::Dimension {
            op: "attention",
            lhs: q.shape(),
            rhs: k.shape(),
        };
        if q.cols() != k.cols() || k.rows() != v.rows() {
            return Err(dims_err());
        }
        if groups == 0
            || heads == 0
            || q.rows() % groups != 0
            || k.rows() % groups != 0
            || q.cols() % heads != 0
            || v.cols() % heads != 0
        {
            return Err(Error::Contract(format!(
                "attention: {groups} groups / {heads} heads do not divide shapes {:?}, {:?}, {:?}",
                q.shape(),
                k.shape(),
                v.shape()
            )));
        }
        if !(scale > 0.0) {
            return Err(Error::Contract(format!("attention scale must be > 0, got {scale}")));
        }
        let nq = q.rows() / groups;
        let nk = k.rows() / groups;
        let dqh = q.cols() / heads;
        let dvh = v.cols() / heads;
        let tracked = self.tracks(&[q, k, v]);
        let mut out = Tensor::zeros(q.rows(), v.cols());
        let mut probs = Vec::new();
        let mut p = Tensor::zeros(nq, nk);
        for g in 0..groups {
            for h in 0..heads {
                let qs = q.value().block(g * nq, nq, h * dqh, dqh);
                let ks = k.value().block(g * nk, nk, h * dqh, dqh);
                gemm(1.0 / scale, qs, ks.t(), 0.0, p.view_mut());
                apply_weighting(&mut p, weighting);
                let vs = v.value().block(g * nk, nk, h * dvh, dvh);
                gemm(1.0, p.view(), vs, 0.0, out.block_mut(g * nq, nq, h * dvh, dvh));
                if tracked {
                    probs.push(p.clone());
                }
            }
        }
        Ok(self.record(out, tracked, || Op::Attention {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            groups,
            heads,
            scale,
            weighting,
            probs,
        }))
    }

    /// Reduces each of `groups` consecutive row blocks to a single row.
    /// Max ties resolve to the first row attaining the maximum.
    pub fn pool_rows(&mut self, x: &Var, groups: usize, kind: PoolKind) -> Result<Var> {
        if groups == 0 || x.rows() % groups != 0 || x.rows() == 0 {
            return Err(Error::Contract(format!(
                "pool_rows: {} rows not divisible into {groups} nonempty groups",
                x.rows()
            )));
        }
        let n = x.rows() / groups;
        let d = x.cols();
        let mut out = Tensor::zeros(groups, d);
        let mut argmax = Vec::new();
        for g in 0..groups {
            match kind {
                PoolKind::Sum | PoolKind::Mean => {
                    let o = out.row_mut(g);
                    for r in g * n..(g + 1) * n {
                        for (a, b) in o.iter_mut().zip(x.value().row(r)) {
                            *a += b;
                        }
                    }
                    if kind == PoolKind::Mean {
                        o.iter_mut().for_each(|a| *a /= n as f64);
                    }
                }
                PoolKind::Max => {
                    for c in 0..d {
                        let mut best = g * n;
                        for r in g * n + 1..(g + 1) * n {
                            if x.value().get(r, c) > x.value().get(best, c) {
                                best = r;
                            }
                        }
                        out.set(g, c, x.value().get(best, c));
                        argmax.push(best);
                    }
                }
            }
        }
        let t = self.tracks(&[x]);
        Ok(self.record(out, t, || Op::Pool {
            x: x.clone(),
            groups,
            kind,
            argmax,
        }))
    }

    /// Repeats row `g` of `x` `times` times in place: `[a, b] -> [a, a, b, b]`.
    pub fn repeat_rows(&mut self, x: &Var, times: usize) -> Var {
        let mut data = Vec::with_capacity(x.value().len() * times);
        for r in 0..x.rows() {
            for _ in 0..times {
                data.extend_from_slice(x.value().row(r));
            }
        }
        let value = Tensor::from_vec(x.rows() * times, x.cols(), data).expect("sized");
        let t = self.tracks(&[x]);
        self.record(value, t, || Op::RepeatRows(x.clone(), times))
    }

    /// Stacks `times` copies of the whole of `x`: `[a, b] -> [a, b, a, b]`.
    pub fn tile_rows(&mut self, x: &Var, times: usize) -> Var {
        let mut data = Vec::with_capacity(x.value().len() * times);
        for _ in 0..times {
            data.extend_from_slice(x.value().data());
        }
        let value = Tensor::from_vec(x.rows() * times, x.cols(), data).expect("sized");
        let t = self.tracks(&[x]);
        self.record(value, t, || Op::TileRows(x.clone()))
    }

    /// Records an operation whose value the caller computed already.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: Vec<Var>, value: Tensor) -> Var {
        let t = self.tracks(&inputs.iter().collect::<Vec<_>>());
        self.record(value, t, || Op::Custom(op, inputs))
    }

    /// Reverse sweep from a `1 x 1` loss.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if loss.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward requires a 1x1 loss, got {}x{}",
                loss.rows(),
                loss.cols()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        let Some(root) = loss.id else {
            return Ok(Gradients { grads, params });
        };
        grads[root] = Some(Tensor::scalar(1.0));
        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[i].take() else { continue };
            if FAULT.with(|f| f.get()) == Some(node.op.name()) {
                g.scale_inplace(-1.0);
            }
            backprop(&node.op, &node.value, &g, &mut grads);
        }
        Ok(Gradients { grads, params })
    }
}

thread_local! {
    static FAULT: Cell<Option<&'static str>> = const { Cell::new(None) };
}

/// Negates the adjoint of every op named `op` on this thread (`None` clears).
///
/// Exists so the gradient-check suite can prove it detects a broken rule.
pub fn inject_fault(op: Option<&'static str>) {
    FAULT.with(|f| f.set(op));
}

/// Names accepted by [`inject_fault`].
pub const OP_NAMES: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "scale_by",
    "relu",
    "softplus",
    "abs",
    "transpose",
    "concat_cols",
    "slice_cols",
    "broadcast_row",
    "add_row",
    "reshape",
    "softmax_rows",
    "log_softmax_rows",
    "layernorm_rows",
    "sum_all",
    "mean_all",
    "attention",
    "pool_rows",
    "repeat_rows",
    "tile_rows",
];

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to a tracked leaf; `None` if it did not
    /// participate in the loss.
    pub fn wrt(&self, v: &Var) -> Option<&Tensor> {
        v.id.and_then(|i| self.grads.get(i)).and_then(Option::as_ref)
    }

    /// Gradient with respect to a parameter, summed over every leaf bound
    /// to it.
    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        let mut out: Option<Tensor> = None;
        for &(p, node) in &self.params {
            if p != id {
                continue;
            }
            if let Some(g) = &self.grads[node] {
                match &mut out {
                    Some(o) => o.add_assign(g).expect("leaf gradients share shape"),
                    None => out = Some(g.clone()),
                }
            }
        }
        out
    }
}

/// Mutable gradient slot for `v`, zero-initialised on first use.
fn slot<'a>(grads: &'a mut [Option<Tensor>], v: &Var) -> Option<&'a mut Tensor> {
    let id = v.id?;
    let (r, c) = v.shape();
    Some(grads[id].get_or_insert_with(|| Tensor::zeros(r, c)))
}

fn accumulate(grads: &mut [Option<Tensor>], v: &Var, g: &Tensor) {
    if let Some(s) = slot(grads, v) {
        s.add_assign(g).expect("gradient shape matches value");
    }
}

fn accumulate_map(grads: &mut [Option<Tensor>], v: &Var, g: &Tensor, f: impl Fn(usize, f64) -> f64) {
    if let Some(s) = slot(grads, v) {
        for (i, (a, b)) in s.data_mut().iter_mut().zip(g.data()).enumerate() {
            *a += f(i, *b);
        }
    }
}

fn backprop(op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if let Some(s) = slot(grads, a) {
                gemm(1.0, g.view(), b.value().view().t(), 1.0, s.view_mut());
            }
            if let Some(s) = slot(grads, b) {
                gemm(1.0, a.value().view().t(), g.view(), 1.0, s.view_mut());
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, a, g);
            accumulate(grads, b, g);
        }
        Op::Sub(a, b) => {
            accumulate(grads, a, g);
            accumulate_map(grads, b, g, |_, x| -x);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (a.value().data(), b.value().data());
            accumulate_map(grads, a, g, |i, x| x * bv[i]);
            accumulate_map(grads, b, g, |i, x| x * av[i]);
        }
        Op::Scale(a, c) => accumulate_map(grads, a, g, |_, x| c * x),
        Op::AddScalar(a) => accumulate(grads, a, g),
        Op::ScaleBy(x, s) => {
            let c = s.value().get(0, 0);
            accumulate_map(grads, x, g, |_, v| c * v);
            let ds: f64 = g.data().iter().zip(x.value().data()).map(|(a, b)| a * b).sum();
            accumulate(grads, s, &Tensor::scalar(ds));
        }
        Op::Relu(a) => {
            let av = a.value().data();
            accumulate_map(grads, a, g, |i, x| if av[i] > 0.0 { x } else { 0.0 });
        }
        Op::Softplus(a) => {
            let av = a.value().data();
            accumulate_map(grads, a, g, |i, x| x * sigmoid(av[i]));
        }
        Op::Abs(a) => {
            let av = a.value().data();
            accumulate_map(grads, a, g, |i, x| x * sign(av[i]));
        }
        Op::Transpose(a) => accumulate(grads, a, &g.transpose()),
        Op::ConcatCols(parts) => {
            let mut start = 0;
            for p in parts {
                let w = p.cols();
                accumulate(grads, p, &g.slice_cols(start, start + w).expect("in range"));
                start += w;
            }
        }
        Op::SliceCols(a, start) => {
            if let Some(s) = slot(grads, a) {
                let w = g.cols();
                for r in 0..g.rows() {
                    for (d, x) in s.row_mut(r)[*start..start + w].iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
            }
        }
        Op::BroadcastRow(row) => accumulate(grads, row, &g.column_sums()),
        Op::AddRow(x, row) => {
            accumulate(grads, x, g);
            accumulate(grads, row, &g.column_sums());
        }
        Op::Reshape(a) => {
            let (r, c) = a.shape();
            accumulate(grads, a, &g.reshape(r, c).expect("same size"));
        }
        Op::SoftmaxRows(x, scale) => {
            let mut dx = Tensor::zeros(out.rows(), out.cols());
            for r in 0..out.rows() {
                let (y, gr) = (out.row(r), g.row(r));
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((d, yy), gg) in dx.row_mut(r).iter_mut().zip(y).zip(gr) {
                    *d = yy * (gg - dot) / scale;
                }
            }
            accumulate(grads, x, &dx);
        }
        Op::LogSoftmaxRows(x) => {
            let mut dx = Tensor::zeros(out.rows(), out.cols());
            for r in 0..out.rows() {
                let (y, gr) = (out.row(r), g.row(r));
                let gsum: f64 = gr.iter().sum();
                for ((d, yy), gg) in dx.row_mut(r).iter_mut().zip(y).zip(gr) {
                    *d = gg - yy.exp() * gsum;
                }
            }
            accumulate(grads, x, &dx);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let (n, d) = xhat.shape();
            let gv = gain.value().row(0);
            if x.is_tracked() {
                let mut dx = Tensor::zeros(n, d);
                for r in 0..n {
                    let (xh, gr) = (xhat.row(r), g.row(r));
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for c in 0..d {
                        let dxh = gr[c] * gv[c];
                        s1 += dxh;
                        s2 += dxh * xh[c];
                    }
                    let k = inv_std[r] / d as f64;
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        let dxh = gr[c] * gv[c];
                        *o = k * (d as f64 * dxh - s1 - xh[c] * s2);
                    }
                }
                accumulate(grads, x, &dx);
            }
            if gain.is_tracked() {
                let mut dg = Tensor::zeros(1, d);
                for r in 0..n {
                    for ((o, a), b) in dg.row_mut(0).iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                        *o += a * b;
                    }
                }
                accumulate(grads, gain, &dg);
            }
            accumulate(grads, bias, &g.column_sums());
        }
        Op::SumAll(a) => {
            let s = g.get(0, 0);
            accumulate_map(grads, a, a.value(), |_, _| s);
        }
        Op::MeanAll(a) => {
            let s = g.get(0, 0) / a.value().len().max(1) as f64;
            accumulate_map(grads, a, a.value(), |_, _| s);
        }
        Op::Attention {
            q,
            k,
            v,
            groups,
            heads,
            scale,
            weighting,
            probs,
        } => attention_backward(q, k, v, *groups, *heads, *scale, *weighting, probs, g, grads),
        Op::Pool {
            x,
            groups,
            kind,
            argmax,
        } => {
            if let Some(s) = slot(grads, x) {
                let n = x.rows() / groups;
                let d = x.cols();
                for gi in 0..*groups {
                    match kind {
                        PoolKind::Sum | PoolKind::Mean => {
                            let f = if *kind == PoolKind::Mean { 1.0 / n as f64 } else { 1.0 };
                            for r in gi * n..(gi + 1) * n {
                                for (o, gg) in s.row_mut(r).iter_mut().zip(g.row(gi)) {
                                    *o += f * gg;
                                }
                            }
                        }
                        PoolKind::Max => {
                            for c in 0..d {
                                let r = argmax[gi * d + c];
                                let cur = s.get(r, c);
                                s.set(r, c, cur + g.get(gi, c));
                            }
                        }
                    }
                }
            }
        }
        Op::RepeatRows(x, times) => {
            if let Some(s) = slot(grads, x) {
                for r in 0..g.rows() {
                    for (o, gg) in s.row_mut(r / times).iter_mut().zip(g.row(r)) {
                        *o += gg;
                    }
                }
            }
        }
        Op::TileRows(x) => {
            if let Some(s) = slot(grads, x) {
                let n = s.rows();
                for r in 0..g.rows() {
                    for (o, gg) in s.row_mut(r % n).iter_mut().zip(g.row(r)) {
                        *o += gg;
                    }
                }
            }
        }
        Op::Custom(op, inputs) => {
            let gs = op.backward(inputs, out, g);
            for (inp, gi) in inputs.iter().zip(&gs) {
                if inp.is_tracked() {
                    accumulate(grads, inp, gi);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &Var,
    k: &Var,
    v: &Var,
    groups: usize,
    heads: usize,
    scale: f64,
    weighting: Weighting,
    probs: &[Tensor],
    g: &Tensor,
    grads: &mut [Option<Tensor>],
) {
    let nq = q.rows() / groups;
    let nk = k.rows() / groups;
    let dqh = q.cols() / heads;
    let dvh = v.cols() / heads;
    let mut dq = Tensor::zeros(q.rows(), q.cols());
    let mut dk = Tensor::zeros(k.rows(), k.cols());
    let mut dv = Tensor::zeros(v.rows(), v.cols());
    let mut dp = Tensor::zeros(nq, nk);
    for gi in 0..groups {
        for h in 0..heads {
            let p = &probs[gi * heads + h];
            let dout = g.block(gi * nq, nq, h * dvh, dvh);
            let vs = v.value().block(gi * nk, nk, h * dvh, dvh);
            gemm(1.0, p.view().t(), dout, 1.0, dv.block_mut(gi * nk, nk, h * dvh, dvh));
            gemm(1.0, dout, vs.t(), 0.0, dp.view_mut());
            // dp <- d(loss)/d(score / scale)
            match weighting {
                Weighting::Softmax => {
                    for r in 0..nq {
                        let pr = p.row(r);
                        let row = dp.row_mut(r);
                        let dot: f64 = pr.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
                        for (d, pp) in row.iter_mut().zip(pr) {
                            *d = pp * (*d - dot);
                        }
                    }
                }
                Weighting::OnePlus(act) => {
                    for (d, pp) in dp.data_mut().iter_mut().zip(p.data()) {
                        let f = pp - 1.0;
                        *d *= match act {
                            Activation::Identity => 1.0,
                            Activation::Relu => {
                                if f > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Activation::Sigmoid => f * (1.0 - f),
                        };
                    }
                }
            }
            let qs = q.value().block(gi * nq, nq, h * dqh, dqh);
            let ks = k.value().block(gi * nk, nk, h * dqh, dqh);
            gemm(1.0 / scale, dp.view(), ks, 1.0, dq.block_mut(gi * nq, nq, h * dqh, dqh));
            gemm(1.0 / scale, dp.view().t(), qs, 1.0, dk.block_mut(gi * nk, nk, h * dqh, dqh));
        }
    }
    accumulate(grads, q, &dq);
    accumulate(grads, k, &dk);
    accumulate(grads, v, &dv);
}

fn apply_weighting(scores: &mut Tensor, weighting: Weighting) {
    match weighting {
        Weighting::Softmax => {
            for r in 0..scores.rows() {
                softmax_in_place(scores.row_mut(r), 1.0);
            }
        }
        Weighting::OnePlus(act) => {
            for s in scores.data_mut() {
                *s = 1.0
                    + match act {
                        Activation::Identity => *s,
                        Activation::Relu => s.max(0.0),
                        Activation::Sigmoid => sigmoid(*s),
                    };
            }
        }
    }
}

/// `row <- softmax(row * inv_scale)`.
fn softmax_in_place(row: &mut [f64], inv_scale: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) * inv_scale).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Stable `ln(sum(exp(xs)))`; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[&[-1.0, 2.0]]));
        assert_eq!(tape.relu(&x).value().data(), &[0.0, 2.0]);
    }

    #[test]
    fn softmax_uniform_and_shift_invariant() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[0.0, 0.0, 0.0], &[7.5, 7.5, 7.5]]));
        let y = tape.softmax_rows(&x, 1.0).unwrap();
        for v in y.value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[1000.0, 0.0]]));
        let y = tape.softmax_rows(&x, 1.0).unwrap();
        assert_eq!(y.value().get(0, 0), 1.0);
        // e^-1000 underflows to zero in f64; extended precision agrees it is < 1e-434
        assert!(y.value().get(0, 1) >= 0.0 && y.value().get(0, 1) < 1e-300);
        assert!(y.value().all_finite());
    }

    #[test]
    fn softmax_rejects_nonpositive_scale() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[1.0]]));
        assert!(tape.softmax_rows(&x, 0.0).is_err());
    }

    #[test]
    fn layernorm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[3.0, 3.0, 3.0]]));
        let g = tape.constant(Tensor::ones(1, 3));
        let b = tape.constant(Tensor::zeros(1, 3));
        let y = tape.layernorm_rows(&x, &g, &b, 1e-5).unwrap();
        assert!(y.value().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn layernorm_standardised_row_unchanged() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[-1.0, 1.0]]));
        let g = tape.constant(Tensor::ones(1, 2));
        let b = tape.constant(Tensor::zeros(1, 2));
        let y = tape.layernorm_rows(&x, &g, &b, 1e-14).unwrap();
        assert!((y.value().get(0, 0) + 1.0).abs() < 1e-12);
        assert!((y.value().get(0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn split_concat_round_trip() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(3, 6, |r, c| (r * 6 + c) as f64));
        let parts = tape.split_cols(&x, &[2, 1, 3]).unwrap();
        let y = tape.concat_cols(&parts).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_fn(2, 3, |r, c| (r + c) as f64));
        let loss = tape.sum_all(&w);
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.wrt(&w).unwrap(), &Tensor::ones(2, 3));
    }

    #[test]
    fn backward_of_zero_times_f_is_zero() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_fn(2, 2, |r, c| (r as f64) - c as f64));
        let f = tape.relu(&w);
        let s = tape.sum_all(&f);
        let loss = tape.scale(&s, 0.0);
        let g = tape.backward(&loss).unwrap();
        assert!(g.wrt(&w).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::zeros(2, 1));
        assert!(matches!(tape.backward(&w), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::ones(1, 1));
        let b = tape.leaf(Tensor::ones(1, 1));
        let loss = tape.sum_all(&a);
        let g = tape.backward(&loss).unwrap();
        assert!(g.wrt(&b).is_none());
    }

    #[test]
    fn inference_tape_records_nothing() {
        let mut tape = Tape::inference();
        let a = tape.leaf(Tensor::ones(2, 2));
        let b = tape.matmul(&a, &a).unwrap();
        assert!(!b.is_tracked());
        assert!(tape.is_empty());
    }

    #[test]
    fn max_pool_ties_go_to_first_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[&[1.0], &[1.0]]));
        let p = tape.pool_rows(&x, 1, PoolKind::Max).unwrap();
        let loss = tape.sum_all(&p);
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn log_sum_exp_handles_neg_infinity() {
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, 0.0]), 0.0);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }
}
