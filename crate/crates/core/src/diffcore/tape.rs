use std::cell::{Ref, RefCell};

use super::tensor::{matmul_raw, Tensor};
use crate::error::{Error, Result};

/// Denominator guard for normalization and cosine.
pub const EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Abs(usize),
    Square(usize),
    Exp(usize),
    Sum(usize),
    Mean(usize),
    Transpose(usize),
    NormalizeRows(usize, f64),
    RowCosine(usize, usize, f64),
    CrossEntropy(usize, Vec<usize>),
    CrossEntropyRows(usize, Vec<usize>),
    ComplementNllRows(usize, Vec<usize>),
    LogSoftmaxRows(usize),
    SortRows(usize, Vec<usize>),
    PairwiseSqDist(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Nodes are appended in evaluation order, which is a topological order by
/// construction: every operation consumes only nodes that already exist.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients of a scalar output with respect to every node that depends on a
/// parameter.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like `like` when `v` did not
    /// influence the output.
    pub fn wrt_or_zeros(&self, v: Var<'_>) -> Tensor {
        match self.wrt(v) {
            Some(g) => g.clone(),
            None => v.value().zeros_like(),
        }
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse-mode accumulation from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.len() != 1 {
            return Err(Error::NonScalarOutput(out.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.id + 1];
        if !out.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.id] = Some(Tensor::filled(out.value.shape(), 1.0));

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].clone() else {
                continue;
            };
            let val = |i: usize| &nodes[i].value;
            let mut acc = |i: usize, t: Tensor| {
                if !nodes[i].requires_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(existing) => existing.axpy(1.0, &t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if nodes[*a].requires_grad {
                        let bt = bv.transpose();
                        acc(*a, matmul_raw(g.data(), bt.data(), g.rows(), g.cols(), bt.cols()));
                    }
                    if nodes[*b].requires_grad {
                        let at = av.transpose();
                        acc(*b, matmul_raw(at.data(), g.data(), at.rows(), at.cols(), g.cols()));
                    }
                }
                Op::AddRow(a, bias) => {
                    if nodes[*bias].requires_grad {
                        let mut gb = val(*bias).zeros_like();
                        let n = gb.len();
                        for r in 0..g.rows() {
                            for (o, v) in gb.data_mut().iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                                *o += v;
                            }
                        }
                        acc(*bias, gb);
                    }
                    acc(*a, g);
                }
                Op::Add(a, b) => {
                    acc(*b, g.clone());
                    acc(*a, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|v| -v));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    acc(*a, zip_map(&g, bv, |x, y| x * y));
                    acc(*b, zip_map(&g, av, |x, y| x * y));
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(*a, g.map(|v| v * c));
                }
                Op::AddScalar(a) => acc(*a, g),
                Op::Relu(a) => {
                    acc(*a, zip_map(&g, val(*a), |x, y| if y > 0.0 { x } else { 0.0 }));
                }
                Op::Abs(a) => {
                    acc(*a, zip_map(&g, val(*a), |x, y| x * sign(y)));
                }
                Op::Square(a) => {
                    acc(*a, zip_map(&g, val(*a), |x, y| 2.0 * x * y));
                }
                Op::Exp(a) => {
                    acc(*a, zip_map(&g, &node.value, |x, y| x * y));
                }
                Op::Sum(a) => {
                    let gv = g.item();
                    acc(*a, Tensor::filled(val(*a).shape(), gv));
                }
                Op::Mean(a) => {
                    let av = val(*a);
                    let gv = g.item() / av.len() as f64;
                    acc(*a, Tensor::filled(av.shape(), gv));
                }
                Op::Transpose(a) => acc(*a, g.transpose()),
                Op::NormalizeRows(a, eps) => {
                    let av = val(*a);
                    let y = &node.value;
                    let c = av.cols();
                    let mut ga = av.zeros_like();
                    for r in 0..av.rows() {
                        let x = av.row(r);
                        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let gr = g.row(r);
                        let out = ga.row_mut(r);
                        if n > *eps {
                            let yr = y.row(r);
                            let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                            for j in 0..c {
                                out[j] = (gr[j] - yr[j] * dot) / n;
                            }
                        } else {
                            for j in 0..c {
                                out[j] = gr[j] / eps;
                            }
                        }
                    }
                    acc(*a, ga);
                }
                Op::RowCosine(a, b, eps) => {
                    let (av, bv) = (val(*a), val(*b));
                    let c = av.cols();
                    let mut ga = av.zeros_like();
                    let mut gb = bv.zeros_like();
                    for r in 0..av.rows() {
                        let (x, y) = (av.row(r), bv.row(r));
                        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let gr = g.data()[r];
                        let cosv = node.value.data()[r];
                        let denom = nx * ny;
                        {
                            let oa = ga.row_mut(r);
                            for j in 0..c {
                                oa[j] = if denom > *eps {
                                    gr * (y[j] / denom - cosv * x[j] / (nx * nx))
                                } else {
                                    gr * y[j] / eps
                                };
                            }
                        }
                        let ob = gb.row_mut(r);
                        for j in 0..c {
                            ob[j] = if denom > *eps {
                                gr * (x[j] / denom - cosv * y[j] / (ny * ny))
                            } else {
                                gr * x[j] / eps
                            };
                        }
                    }
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::CrossEntropy(a, labels) => {
                    let av = val(*a);
                    let n = av.rows() as f64;
                    let scale = g.item() / n;
                    let mut ga = softmax_rows(av);
                    for (r, &l) in labels.iter().enumerate() {
                        ga.row_mut(r)[l] -= 1.0;
                    }
                    ga.data_mut().iter_mut().for_each(|v| *v *= scale);
                    acc(*a, ga);
                }
                Op::CrossEntropyRows(a, labels) => {
                    let av = val(*a);
                    let mut ga = softmax_rows(av);
                    for (r, &l) in labels.iter().enumerate() {
                        let gr = g.data()[r];
                        let row = ga.row_mut(r);
                        row[l] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= gr);
                    }
                    acc(*a, ga);
                }
                Op::ComplementNllRows(a, labels) => {
                    let av = val(*a);
                    let mut ga = av.zeros_like();
                    for (r, &l) in labels.iter().enumerate() {
                        let (lse_all, lse_rest) = split_logsumexp(av.row(r), l);
                        let gr = g.data()[r];
                        let p_y = (av.row(r)[l] - lse_all).exp();
                        for (j, (o, &z)) in ga.row_mut(r).iter_mut().zip(av.row(r)).enumerate() {
                            *o = if j == l {
                                gr * p_y
                            } else {
                                -gr * p_y * (z - lse_rest).exp()
                            };
                        }
                    }
                    acc(*a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    for r in 0..y.rows() {
                        let gs: f64 = g.row(r).iter().sum();
                        let yr = y.row(r);
                        for (o, &lv) in ga.row_mut(r).iter_mut().zip(yr) {
                            *o -= lv.exp() * gs;
                        }
                    }
                    acc(*a, ga);
                }
                Op::SortRows(a, perm) => {
                    let c = g.cols();
                    let mut ga = val(*a).zeros_like();
                    for r in 0..g.rows() {
                        for j in 0..c {
                            let src = perm[r * c + j];
                            ga.row_mut(r)[src] += g.row(r)[j];
                        }
                    }
                    acc(*a, ga);
                }
                Op::PairwiseSqDist(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let d = av.cols();
                    let m = bv.rows();
                    let mut ga = av.zeros_like();
                    let mut gb = bv.zeros_like();
                    for i in 0..av.rows() {
                        for j in 0..m {
                            let gij = g.data()[i * m + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for t in 0..d {
                                let diff = 2.0 * gij * (av.row(i)[t] - bv.row(j)[t]);
                                ga.row_mut(i)[t] += diff;
                                gb.row_mut(j)[t] -= diff;
                            }
                        }
                    }
                    acc(*a, ga);
                    acc(*b, gb);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map on equal shapes")
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..t.rows() {
        let row = out.row_mut(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

fn log_softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..t.rows() {
        let row = out.row_mut(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

fn check_labels(t: &Tensor, labels: &[usize]) -> Result<()> {
    if t.shape().len() != 2 || labels.len() != t.rows() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            left: t.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= t.cols()) {
        return Err(Error::LabelOutOfRange {
            label: l,
            classes: t.cols(),
        });
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn value_ref(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value_ref().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value_ref().item()
    }

    /// A constant copy of this node; no gradient flows back through it.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.rg(self.id);
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: &Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.rg(self.id) || self.tape.rg(other.id);
        self.tape.push(value, op, rg)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.value_ref().matmul(&other.value_ref())?;
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    /// Adds a bias row (length `cols`) to every row.
    pub fn add_row(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let v = {
            let a = self.value_ref();
            let b = bias.value_ref();
            if b.len() != a.cols() || a.shape().len() != 2 {
                return Err(shape_err("add_row", &a, &b));
            }
            let mut out = a.clone();
            for r in 0..a.rows() {
                for (o, bv) in out.row_mut(r).iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            out
        };
        Ok(self.binary(bias, v, Op::AddRow(self.id, bias.id)))
    }

    /// `x · W + b`.
    pub fn affine(&self, w: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
        self.matmul(w)?.add_row(b)
    }

    fn elementwise(
        &self,
        other: &Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let a = self.value_ref();
        let b = other.value_ref();
        if a.shape() != b.shape() {
            return Err(shape_err(name, &a, &b));
        }
        Ok(zip_map(&a, &b, f))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.elementwise(other, "add", |x, y| x + y)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.elementwise(other, "sub", |x, y| x - y)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.elementwise(other, "mul", |x, y| x * y)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = self.value_ref().map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let v = self.value_ref().map(|x| x + c);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        let v = self.value_ref().map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn abs(&self) -> Var<'t> {
        let v = self.value_ref().map(f64::abs);
        self.unary(v, Op::Abs(self.id))
    }

    pub fn square(&self) -> Var<'t> {
        let v = self.value_ref().map(|x| x * x);
        self.unary(v, Op::Square(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        let v = self.value_ref().map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn sum(&self) -> Var<'t> {
        let v = Tensor::scalar(self.value_ref().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let v = {
            let a = self.value_ref();
            Tensor::scalar(a.sum() / a.len() as f64)
        };
        self.unary(v, Op::Mean(self.id))
    }

    pub fn transpose(&self) -> Var<'t> {
        let v = self.value_ref().transpose();
        self.unary(v, Op::Transpose(self.id))
    }

    /// Divides each row by `max(‖row‖₂, eps)`.
    pub fn l2_normalize_rows(&self, eps: f64) -> Var<'t> {
        let v = {
            let mut out = self.value_ref().clone();
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
                row.iter_mut().for_each(|v| *v /= n);
            }
            out
        };
        self.unary(v, Op::NormalizeRows(self.id, eps))
    }

    /// Per-row cosine similarity, returned as a vector of length `rows`.
    pub fn row_cosine(&self, other: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        let v = {
            let a = self.value_ref();
            let b = other.value_ref();
            if a.shape() != b.shape() {
                return Err(shape_err("row_cosine", &a, &b));
            }
            let out = (0..a.rows())
                .map(|r| cosine(a.row(r), b.row(r), eps))
                .collect();
            Tensor::vector(out)
        };
        Ok(self.binary(other, v, Op::RowCosine(self.id, other.id, eps)))
    }

    /// Mean softmax cross-entropy over rows.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let v = {
            let a = self.value_ref();
            check_labels(&a, labels)?;
            let ls = log_softmax_rows(&a);
            let total: f64 = labels.iter().enumerate().map(|(r, &l)| -ls.row(r)[l]).sum();
            Tensor::scalar(total / labels.len() as f64)
        };
        Ok(self.unary(v, Op::CrossEntropy(self.id, labels.to_vec())))
    }

    /// Per-row softmax cross-entropy, as a vector.
    pub fn cross_entropy_rows(&self, labels: &[usize]) -> Result<Var<'t>> {
        let v = {
            let a = self.value_ref();
            check_labels(&a, labels)?;
            let ls = log_softmax_rows(&a);
            Tensor::vector(labels.iter().enumerate().map(|(r, &l)| -ls.row(r)[l]).collect())
        };
        Ok(self.unary(v, Op::CrossEntropyRows(self.id, labels.to_vec())))
    }

    /// Per-row `−log(1 − p_label)` under the row softmax. Bounded below by
    /// zero and non-saturating for confidently correct rows.
    pub fn complement_nll_rows(&self, labels: &[usize]) -> Result<Var<'t>> {
        let v = {
            let a = self.value_ref();
            check_labels(&a, labels)?;
            if a.cols() < 2 {
                return Err(crate::error::invalid("complement_nll_rows needs at least two columns"));
            }
            Tensor::vector(
                labels
                    .iter()
                    .enumerate()
                    .map(|(r, &l)| {
                        let (all, rest) = split_logsumexp(a.row(r), l);
                        all - rest
                    })
                    .collect(),
            )
        };
        Ok(self.unary(v, Op::ComplementNllRows(self.id, labels.to_vec())))
    }

    pub fn log_softmax_rows(&self) -> Var<'t> {
        let v = log_softmax_rows(&self.value_ref());
        self.unary(v, Op::LogSoftmaxRows(self.id))
    }

    /// Sorts each row ascending; the gradient is routed back through the
    /// sorting permutation.
    pub fn sort_rows(&self) -> Var<'t> {
        let (v, perm) = {
            let a = self.value_ref();
            let c = a.cols();
            let mut out = a.clone();
            let mut perm = Vec::with_capacity(a.len());
            for r in 0..a.rows() {
                let row = a.row(r);
                let mut idx: Vec<usize> = (0..c).collect();
                idx.sort_by(|&i, &j| row[i].total_cmp(&row[j]).then(i.cmp(&j)));
                for (o, &i) in out.row_mut(r).iter_mut().zip(&idx) {
                    *o = row[i];
                }
                perm.extend(idx);
            }
            (out, perm)
        };
        self.unary(v, Op::SortRows(self.id, perm))
    }

    /// `D[i][j] = ‖self_i − other_j‖²`.
    pub fn pairwise_sq_dist(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = {
            let a = self.value_ref();
            let b = other.value_ref();
            if a.cols() != b.cols() {
                return Err(shape_err("pairwise_sq_dist", &a, &b));
            }
            let (n, m) = (a.rows(), b.rows());
            let mut out = vec![0.0; n * m];
            for i in 0..n {
                for j in 0..m {
                    out[i * m + j] = a
                        .row(i)
                        .iter()
                        .zip(b.row(j))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                }
            }
            Tensor::matrix(n, m, out)
        };
        Ok(self.binary(other, v, Op::PairwiseSqDist(self.id, other.id)))
    }
}

/// Cosine of two slices with the shared denominator guard.
pub fn cosine(a: &[f64], b: &[f64], eps: f64) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb).max(eps)
}

/// `(log Σ_j e^{z_j}, log Σ_{j≠skip} e^{z_j})` for one row.
fn split_logsumexp(row: &[f64], skip: usize) -> (f64, f64) {
    let lse = |it: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = it.collect();
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    let all = lse(&mut row.iter().cloned());
    let rest = lse(&mut row.iter().enumerate().filter(|(j, _)| *j != skip).map(|(_, &z)| z));
    (all, rest)
}
