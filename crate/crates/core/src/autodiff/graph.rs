//! Recorded computation graph with exact reverse-mode differentiation.
//!
//! Operations are appended to a linear tape in topological order; every
//! entry caches its forward value so the backward pass never recomputes.
//! Handles into the tape are lightweight [`Var`] ids, parameters are named
//! leaves, and gradients come back as a name-keyed [`GradientMap`].

use std::collections::BTreeMap;

use crate::autodiff::special::{digamma, ln_gamma, trigamma};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

/// Gradients keyed by parameter name, shapes mirroring the parameters.
pub type GradientMap = BTreeMap<String, Tensor>;

/// Named parameter tensors, the unit the optimizer and the finite-difference
/// harness operate on.
pub type ParamMap = BTreeMap<String, Tensor>;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Ln(usize),
    Abs(usize),
    Relu(usize),
    Digamma(usize),
    LnGamma(usize),
    Scale(usize, f64),
    AddConst(usize, f64),
    SumAll(usize),
    SumAxis(usize, usize),
    RepeatRow(usize, usize),
    RepeatCol(usize, usize),
    ConcatCols(usize, usize),
    PairwiseSqDist(usize, usize),
    PairwiseTv(usize),
    LogSumExpRows(usize),
    PrefixSumExclusive(usize),
    SuffixSumExclusive(usize),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Linear tape of primitive applications.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, usize>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Enter a plain tensor as an untracked leaf (inputs, masks, constants).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { op: Op::Leaf, value });
        Var { id }
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    /// Enter a named parameter leaf; its gradient can be requested later.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Result<Var> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("parameter {:?} registered twice", name)));
        }
        let v = self.leaf(value);
        self.params.insert(name, v.id);
        Ok(v)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.id].value.scalar_value()
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = self.eval(&op)?;
        let id = self.nodes.len();
        self.nodes.push(Node { op, value });
        Ok(Var { id })
    }

    fn val(&self, id: usize) -> &Tensor {
        &self.nodes[id].value
    }

    // ---- primitive application -------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a.id, b.id))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a.id))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a.id, b.id))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a.id, b.id))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a.id, b.id))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Div(a.id, b.id))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Neg(a.id))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a.id))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Ln(a.id))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Abs(a.id))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a.id))
    }

    pub fn digamma_t(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Digamma(a.id))
    }

    pub fn ln_gamma_t(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LnGamma(a.id))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(a.id, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::AddConst(a.id, c))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumAll(a.id))
    }

    /// Sum a matrix over `axis` (0 collapses rows, 1 collapses columns).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.push(Op::SumAxis(a.id, axis))
    }

    /// Mean over rows of a matrix, as a vector of column means.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let n = self.val(a.id).shape()[0] as f64;
        let s = self.sum_axis(a, 0)?;
        self.scale(s, 1.0 / n)
    }

    /// Tile a (row) vector into `n` identical rows.
    pub fn repeat_row(&mut self, v: Var, n: usize) -> Result<Var> {
        self.push(Op::RepeatRow(v.id, n))
    }

    /// Tile a vector into `m` identical columns.
    pub fn repeat_col(&mut self, v: Var, m: usize) -> Result<Var> {
        self.push(Op::RepeatCol(v.id, m))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::ConcatCols(a.id, b.id))
    }

    /// Squared Euclidean distances between all rows of `a` and all rows of `b`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::PairwiseSqDist(a.id, b.id))
    }

    /// Total variation distances between all row pairs of a simplex matrix.
    pub fn pairwise_tv(&mut self, a: Var) -> Result<Var> {
        self.push(Op::PairwiseTv(a.id))
    }

    pub fn log_sum_exp_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LogSumExpRows(a.id))
    }

    /// out[i] = sum of v[j] for j < i.
    pub fn prefix_sum_exclusive(&mut self, v: Var) -> Result<Var> {
        self.push(Op::PrefixSumExclusive(v.id))
    }

    /// out[i] = sum of v[j] for j > i.
    pub fn suffix_sum_exclusive(&mut self, v: Var) -> Result<Var> {
        self.push(Op::SuffixSumExclusive(v.id))
    }

    // ---- forward evaluation ----------------------------------------------

    fn eval(&self, op: &Op) -> Result<Tensor> {
        match *op {
            Op::Leaf => unreachable!("leaves are never re-evaluated through eval"),
            Op::MatMul(a, b) => eval_matmul(self.val(a), self.val(b)),
            Op::Transpose(a) => eval_transpose(self.val(a)),
            Op::Add(a, b) => eval_zip("add", self.val(a), self.val(b), |x, y| Ok(x + y)),
            Op::Sub(a, b) => eval_zip("sub", self.val(a), self.val(b), |x, y| Ok(x - y)),
            Op::Mul(a, b) => eval_zip("mul", self.val(a), self.val(b), |x, y| Ok(x * y)),
            Op::Div(a, b) => eval_zip("div", self.val(a), self.val(b), |x, y| {
                if y == 0.0 {
                    Err(Error::domain("div", "division by zero"))
                } else {
                    Ok(x / y)
                }
            }),
            Op::Neg(a) => eval_map("neg", self.val(a), |x| Ok(-x)),
            Op::Exp(a) => eval_map("exp", self.val(a), |x| {
                let y = x.exp();
                if y.is_finite() {
                    Ok(y)
                } else {
                    Err(Error::numeric("exp", format!("exp({}) overflowed", x)))
                }
            }),
            Op::Ln(a) => eval_map("ln", self.val(a), |x| {
                if x > 0.0 {
                    Ok(x.ln())
                } else {
                    Err(Error::domain("ln", format!("log of non-positive value {}", x)))
                }
            }),
            Op::Abs(a) => eval_map("abs", self.val(a), |x| Ok(x.abs())),
            Op::Relu(a) => eval_map("relu", self.val(a), |x| Ok(x.max(0.0))),
            Op::Digamma(a) => eval_map("digamma", self.val(a), digamma),
            Op::LnGamma(a) => eval_map("ln_gamma", self.val(a), ln_gamma),
            Op::Scale(a, c) => eval_map("scale", self.val(a), |x| Ok(c * x)),
            Op::AddConst(a, c) => eval_map("add_const", self.val(a), |x| Ok(x + c)),
            Op::SumAll(a) => Ok(Tensor::scalar(self.val(a).data().iter().sum())),
            Op::SumAxis(a, axis) => eval_sum_axis(self.val(a), axis),
            Op::RepeatRow(v, n) => eval_repeat_row(self.val(v), n),
            Op::RepeatCol(v, m) => eval_repeat_col(self.val(v), m),
            Op::ConcatCols(a, b) => eval_concat_cols(self.val(a), self.val(b)),
            Op::PairwiseSqDist(a, b) => eval_pairwise_sq_dist(self.val(a), self.val(b)),
            Op::PairwiseTv(a) => eval_pairwise_tv(self.val(a)),
            Op::LogSumExpRows(a) => eval_log_sum_exp_rows(self.val(a)),
            Op::PrefixSumExclusive(v) => eval_prefix_sum(self.val(v), false),
            Op::SuffixSumExclusive(v) => eval_prefix_sum(self.val(v), true),
        }
    }

    /// Recompute every non-leaf entry from the recorded leaves and return the
    /// recomputed values in node order. Replay of an unmodified graph must
    /// reproduce the stored values bit-exactly.
    pub fn replay_forward(&self) -> Result<Vec<Tensor>> {
        let mut out: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => {
                    // Evaluate against already-replayed values.
                    let replayed = ReplayView { values: &out };
                    replayed.eval(op)?
                }
            };
            out.push(value);
        }
        Ok(out)
    }

    // ---- reverse pass ------------------------------------------------------

    /// Reverse-mode gradients of a scalar `loss` with respect to the named
    /// parameters. Parameters the loss does not reach get zero gradients.
    pub fn backward(&self, loss: Var, targets: &[&str]) -> Result<GradientMap> {
        if !self.val(loss.id).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.val(loss.id).shape()
            )));
        }
        let mut target_ids = Vec::with_capacity(targets.len());
        for &name in targets {
            match self.params.get(name) {
                Some(&id) => target_ids.push((name.to_string(), id)),
                None => return Err(Error::Contract(format!("unknown parameter {:?}", name))),
            }
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for i in (0..=loss.id).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else { continue };
            self.accumulate(i, g, lower);
        }

        let mut out = GradientMap::new();
        for (name, id) in target_ids {
            let shape = self.val(id).shape().to_vec();
            let grad = match grads[id].take() {
                Some(data) => Tensor::new(shape, data)?,
                None => Tensor::zeros(&shape),
            };
            out.insert(name, grad);
        }
        Ok(out)
    }

    /// Gradients with respect to every registered parameter.
    pub fn backward_all(&self, loss: Var) -> Result<GradientMap> {
        let names: Vec<&str> = self.params.keys().map(|s| s.as_str()).collect();
        self.backward(loss, &names)
    }

    fn accumulate(&self, i: usize, g: &[f64], lower: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        macro_rules! into {
            ($id:expr) => {
                lower[$id].get_or_insert_with(|| vec![0.0; self.nodes[$id].value.len()])
            };
        }
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(a), self.val(b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.cols();
                {
                    let da = into!(a);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let brow = tb.row(kk);
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += grow[j] * brow[j];
                            }
                            da[i * k + kk] += acc;
                        }
                    }
                }
                {
                    let db = into!(b);
                    for i in 0..m {
                        let arow = ta.row(i);
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let aik = arow[kk];
                            let drow = &mut db[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                drow[j] += aik * grow[j];
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.val(a).rows(), self.val(a).cols());
                let da = into!(a);
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Add(a, b) => {
                for (d, &gi) in into!(a).iter_mut().zip(g) {
                    *d += gi;
                }
                for (d, &gi) in into!(b).iter_mut().zip(g) {
                    *d += gi;
                }
            }
            Op::Sub(a, b) => {
                for (d, &gi) in into!(a).iter_mut().zip(g) {
                    *d += gi;
                }
                for (d, &gi) in into!(b).iter_mut().zip(g) {
                    *d -= gi;
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(a), self.val(b));
                for ((d, &gi), &bv) in into!(a).iter_mut().zip(g).zip(tb.data()) {
                    *d += gi * bv;
                }
                for ((d, &gi), &av) in into!(b).iter_mut().zip(g).zip(ta.data()) {
                    *d += gi * av;
                }
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.val(a), self.val(b));
                for ((d, &gi), &bv) in into!(a).iter_mut().zip(g).zip(tb.data()) {
                    *d += gi / bv;
                }
                for (((d, &gi), &av), &bv) in into!(b).iter_mut().zip(g).zip(ta.data()).zip(tb.data()) {
                    *d -= gi * av / (bv * bv);
                }
            }
            Op::Neg(a) => {
                for (d, &gi) in into!(a).iter_mut().zip(g) {
                    *d -= gi;
                }
            }
            Op::Exp(a) => {
                let out = &node.value;
                for ((d, &gi), &ov) in into!(a).iter_mut().zip(g).zip(out.data()) {
                    *d += gi * ov;
                }
            }
            Op::Ln(a) => {
                let ta = self.val(a);
                for ((d, &gi), &av) in into!(a).iter_mut().zip(g).zip(ta.data()) {
                    *d += gi / av;
                }
            }
            Op::Abs(a) => {
                // sign(0) is defined as 0
                let ta = self.val(a);
                for ((d, &gi), &av) in into!(a).iter_mut().zip(g).zip(ta.data()) {
                    *d += gi * if av > 0.0 { 1.0 } else if av < 0.0 { -1.0 } else { 0.0 };
                }
            }
            Op::Relu(a) => {
                // derivative at 0 is defined as 0
                let ta = self.val(a);
                for ((d, &gi), &av) in into!(a).iter_mut().zip(g).zip(ta.data()) {
                    if av > 0.0 {
                        *d += gi;
                    }
                }
            }
            Op::Digamma(a) => {
                let ta = self.val(a);
                for ((d, &gi), &av) in into!(a).iter_mut().zip(g).zip(ta.data()) {
                    *d += gi * trigamma(av).expect("digamma recorded on positive input");
                }
            }
            Op::LnGamma(a) => {
                let ta = self.val(a);
                for ((d, &gi), &av) in into!(a).iter_mut().zip(g).zip(ta.data()) {
                    *d += gi * digamma(av).expect("ln_gamma recorded on positive input");
                }
            }
            Op::Scale(a, c) => {
                for (d, &gi) in into!(a).iter_mut().zip(g) {
                    *d += c * gi;
                }
            }
            Op::AddConst(a, _) => {
                for (d, &gi) in into!(a).iter_mut().zip(g) {
                    *d += gi;
                }
            }
            Op::SumAll(a) => {
                let gs = g[0];
                for d in into!(a).iter_mut() {
                    *d += gs;
                }
            }
            Op::SumAxis(a, axis) => {
                let (r, c) = (self.val(a).rows(), self.val(a).cols());
                let da = into!(a);
                if axis == 0 {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j];
                        }
                    }
                } else {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[i];
                        }
                    }
                }
            }
            Op::RepeatRow(v, n) => {
                let s = self.val(v).len();
                let dv = into!(v);
                for i in 0..n {
                    for j in 0..s {
                        dv[j] += g[i * s + j];
                    }
                }
            }
            Op::RepeatCol(v, m) => {
                let n = self.val(v).len();
                let dv = into!(v);
                for i in 0..n {
                    for j in 0..m {
                        dv[i] += g[i * m + j];
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (n, p) = (self.val(a).rows(), self.val(a).cols());
                let q = self.val(b).cols();
                {
                    let da = into!(a);
                    for i in 0..n {
                        for j in 0..p {
                            da[i * p + j] += g[i * (p + q) + j];
                        }
                    }
                }
                {
                    let db = into!(b);
                    for i in 0..n {
                        for j in 0..q {
                            db[i * q + j] += g[i * (p + q) + p + j];
                        }
                    }
                }
            }
            Op::PairwiseSqDist(a, b) => {
                let (ta, tb) = (self.val(a), self.val(b));
                let (n, s) = (ta.rows(), ta.cols());
                let k = tb.rows();
                {
                    let da = into!(a);
                    for i in 0..n {
                        let arow = ta.row(i);
                        for kk in 0..k {
                            let gik = g[i * k + kk];
                            if gik == 0.0 {
                                continue;
                            }
                            let brow = tb.row(kk);
                            for j in 0..s {
                                da[i * s + j] += gik * 2.0 * (arow[j] - brow[j]);
                            }
                        }
                    }
                }
                {
                    let db = into!(b);
                    for i in 0..n {
                        let arow = ta.row(i);
                        for kk in 0..k {
                            let gik = g[i * k + kk];
                            if gik == 0.0 {
                                continue;
                            }
                            let brow = tb.row(kk);
                            for j in 0..s {
                                db[kk * s + j] += gik * 2.0 * (brow[j] - arow[j]);
                            }
                        }
                    }
                }
            }
            Op::PairwiseTv(a) => {
                let ta = self.val(a);
                let (n, k) = (ta.rows(), ta.cols());
                let da = into!(a);
                for i in 0..n {
                    let ri = ta.row(i);
                    for j in 0..n {
                        let w = g[i * n + j] + g[j * n + i];
                        if w == 0.0 || i == j {
                            continue;
                        }
                        let rj = ta.row(j);
                        for kk in 0..k {
                            let diff = ri[kk] - rj[kk];
                            let sign = if diff > 0.0 { 1.0 } else if diff < 0.0 { -1.0 } else { 0.0 };
                            da[i * k + kk] += 0.5 * w * sign;
                        }
                    }
                }
            }
            Op::LogSumExpRows(a) => {
                let ta = self.val(a);
                let (n, k) = (ta.rows(), ta.cols());
                let out = node.value.data();
                let da = into!(a);
                for i in 0..n {
                    let gi = g[i];
                    if gi == 0.0 {
                        continue;
                    }
                    let row = ta.row(i);
                    for j in 0..k {
                        da[i * k + j] += gi * (row[j] - out[i]).exp();
                    }
                }
            }
            Op::PrefixSumExclusive(v) => {
                let k = self.val(v).len();
                let dv = into!(v);
                let mut acc = 0.0;
                for j in (0..k).rev() {
                    dv[j] += acc;
                    acc += g[j];
                }
            }
            Op::SuffixSumExclusive(v) => {
                let k = self.val(v).len();
                let dv = into!(v);
                let mut acc = 0.0;
                for j in 0..k {
                    dv[j] += acc;
                    acc += g[j];
                }
            }
        }
    }
}

/// Read-only view used by [`Graph::replay_forward`].
struct ReplayView<'a> {
    values: &'a [Tensor],
}

impl ReplayView<'_> {
    fn eval(&self, op: &Op) -> Result<Tensor> {
        // Mirror Graph::eval against replayed values by constructing a
        // temporary graph-like dispatch. The arms are shared through the
        // free eval_* functions, so replay takes the same code paths.
        let v = |id: usize| &self.values[id];
        match *op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => eval_matmul(v(a), v(b)),
            Op::Transpose(a) => eval_transpose(v(a)),
            Op::Add(a, b) => eval_zip("add", v(a), v(b), |x, y| Ok(x + y)),
            Op::Sub(a, b) => eval_zip("sub", v(a), v(b), |x, y| Ok(x - y)),
            Op::Mul(a, b) => eval_zip("mul", v(a), v(b), |x, y| Ok(x * y)),
            Op::Div(a, b) => eval_zip("div", v(a), v(b), |x, y| {
                if y == 0.0 {
                    Err(Error::domain("div", "division by zero"))
                } else {
                    Ok(x / y)
                }
            }),
            Op::Neg(a) => eval_map("neg", v(a), |x| Ok(-x)),
            Op::Exp(a) => eval_map("exp", v(a), |x| Ok(x.exp())),
            Op::Ln(a) => eval_map("ln", v(a), |x| Ok(x.ln())),
            Op::Abs(a) => eval_map("abs", v(a), |x| Ok(x.abs())),
            Op::Relu(a) => eval_map("relu", v(a), |x| Ok(x.max(0.0))),
            Op::Digamma(a) => eval_map("digamma", v(a), digamma),
            Op::LnGamma(a) => eval_map("ln_gamma", v(a), ln_gamma),
            Op::Scale(a, c) => eval_map("scale", v(a), |x| Ok(c * x)),
            Op::AddConst(a, c) => eval_map("add_const", v(a), |x| Ok(x + c)),
            Op::SumAll(a) => Ok(Tensor::scalar(v(a).data().iter().sum())),
            Op::SumAxis(a, axis) => eval_sum_axis(v(a), axis),
            Op::RepeatRow(a, n) => eval_repeat_row(v(a), n),
            Op::RepeatCol(a, m) => eval_repeat_col(v(a), m),
            Op::ConcatCols(a, b) => eval_concat_cols(v(a), v(b)),
            Op::PairwiseSqDist(a, b) => eval_pairwise_sq_dist(v(a), v(b)),
            Op::PairwiseTv(a) => eval_pairwise_tv(v(a)),
            Op::LogSumExpRows(a) => eval_log_sum_exp_rows(v(a)),
            Op::PrefixSumExclusive(a) => eval_prefix_sum(v(a), false),
            Op::SuffixSumExclusive(a) => eval_prefix_sum(v(a), true),
        }
    }
}

// ---- forward kernels -------------------------------------------------------

fn eval_zip(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> Result<f64>,
) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut data = Vec::with_capacity(a.len());
    for (&x, &y) in a.data().iter().zip(b.data()) {
        data.push(f(x, y)?);
    }
    Tensor::new(a.shape().to_vec(), data)
}

fn eval_map(_op: &'static str, a: &Tensor, f: impl Fn(f64) -> Result<f64>) -> Result<Tensor> {
    let mut data = Vec::with_capacity(a.len());
    for &x in a.data() {
        data.push(f(x)?);
    }
    Tensor::new(a.shape().to_vec(), data)
}

fn eval_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
        return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = arow[kk];
            let brow = b.row(kk);
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

fn eval_transpose(a: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 {
        return Err(Error::shape("transpose", format!("{:?}", a.shape())));
    }
    let (r, c) = (a.rows(), a.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.get2(i, j);
        }
    }
    Tensor::new(vec![c, r], out)
}

fn eval_sum_axis(a: &Tensor, axis: usize) -> Result<Tensor> {
    if a.shape().len() != 2 || axis > 1 {
        return Err(Error::shape("sum_axis", format!("shape {:?}, axis {}", a.shape(), axis)));
    }
    let (r, c) = (a.rows(), a.cols());
    if axis == 0 {
        let mut out = vec![0.0; c];
        for i in 0..r {
            let row = a.row(i);
            for j in 0..c {
                out[j] += row[j];
            }
        }
        Ok(Tensor::vector(out))
    } else {
        let mut out = vec![0.0; r];
        for i in 0..r {
            out[i] = a.row(i).iter().sum();
        }
        Ok(Tensor::vector(out))
    }
}

fn eval_repeat_row(v: &Tensor, n: usize) -> Result<Tensor> {
    let s = match v.shape() {
        [s] => *s,
        [1, s] => *s,
        other => return Err(Error::shape("repeat_row", format!("{:?}", other))),
    };
    let mut out = Vec::with_capacity(n * s);
    for _ in 0..n {
        out.extend_from_slice(v.data());
    }
    Tensor::new(vec![n, s], out)
}

fn eval_repeat_col(v: &Tensor, m: usize) -> Result<Tensor> {
    let n = match v.shape() {
        [n] => *n,
        other => return Err(Error::shape("repeat_col", format!("{:?}", other))),
    };
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        for _ in 0..m {
            out.push(v.data()[i]);
        }
    }
    Tensor::new(vec![n, m], out)
}

fn eval_concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.rows() != b.rows() {
        return Err(Error::shape("concat_cols", format!("{:?} | {:?}", a.shape(), b.shape())));
    }
    let n = a.rows();
    let (p, q) = (a.cols(), b.cols());
    let mut out = Vec::with_capacity(n * (p + q));
    for i in 0..n {
        out.extend_from_slice(a.row(i));
        out.extend_from_slice(b.row(i));
    }
    Tensor::new(vec![n, p + q], out)
}

fn eval_pairwise_sq_dist(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.cols() {
        return Err(Error::shape("pairwise_sq_dist", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (n, s) = (a.rows(), a.cols());
    let k = b.rows();
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let arow = a.row(i);
        for kk in 0..k {
            let brow = b.row(kk);
            let mut acc = 0.0;
            for j in 0..s {
                let d = arow[j] - brow[j];
                acc += d * d;
            }
            out[i * k + kk] = acc;
        }
    }
    Tensor::new(vec![n, k], out)
}

fn eval_pairwise_tv(a: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 {
        return Err(Error::shape("pairwise_tv", format!("{:?}", a.shape())));
    }
    let (n, k) = (a.rows(), a.cols());
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let ri = a.row(i);
        for j in (i + 1)..n {
            let rj = a.row(j);
            let mut acc = 0.0;
            for kk in 0..k {
                acc += (ri[kk] - rj[kk]).abs();
            }
            let d = 0.5 * acc;
            out[i * n + j] = d;
            out[j * n + i] = d;
        }
    }
    Tensor::new(vec![n, n], out)
}

fn eval_log_sum_exp_rows(a: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 {
        return Err(Error::shape("log_sum_exp_rows", format!("{:?}", a.shape())));
    }
    let (n, _k) = (a.rows(), a.cols());
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = a.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|&x| (x - m).exp()).sum();
        out.push(m + s.ln());
    }
    Ok(Tensor::vector(out))
}

fn eval_prefix_sum(v: &Tensor, reverse: bool) -> Result<Tensor> {
    if v.shape().len() != 1 {
        return Err(Error::shape("prefix_sum", format!("{:?}", v.shape())));
    }
    let k = v.len();
    let mut out = vec![0.0; k];
    let mut acc = 0.0;
    if reverse {
        for j in (0..k).rev() {
            out[j] = acc;
            acc += v.data()[j];
        }
    } else {
        for j in 0..k {
            out[j] = acc;
            acc += v.data()[j];
        }
    }
    Ok(Tensor::vector(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn square_value_and_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(3.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.scalar_value(y), 9.0);
        let grads = g.backward(y, &["x"]).unwrap();
        assert_eq!(grads["x"].scalar_value(), 6.0);
    }

    #[test]
    fn relu_negative_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(-1.0)).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.scalar_value(y), 0.0);
        let grads = g.backward(y, &["x"]).unwrap();
        assert_eq!(grads["x"].scalar_value(), 0.0);
    }

    #[test]
    fn log_sum_exp_of_two_zeros() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let y = g.log_sum_exp_rows(x).unwrap();
        assert_abs_diff_eq!(g.value(y).data()[0], std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        assert_eq!(g.scalar_value(loss), 5.0);
        let grads = g.backward(loss, &["x"]).unwrap();
        assert_eq!(grads["x"].data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreachable_target_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(1.0)).unwrap();
        let _unused = g.param("w", Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let loss = g.mul(x, x).unwrap();
        let grads = g.backward(loss, &["x", "w"]).unwrap();
        assert_eq!(grads["w"].data(), &[0.0, 0.0, 0.0]);
        assert_eq!(grads["w"].shape(), &[3]);
    }

    #[test]
    fn digamma_gradient_is_trigamma() {
        // psi'(2) = pi^2/6 - 1
        let mut g = Graph::new();
        let a = g.param("a", Tensor::scalar(2.0)).unwrap();
        let y = g.digamma_t(a).unwrap();
        let grads = g.backward(y, &["a"]).unwrap();
        let expected = std::f64::consts::PI.powi(2) / 6.0 - 1.0;
        assert_abs_diff_eq!(grads["a"].scalar_value(), expected, epsilon = 1e-12);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let y = g.mul(x, x).unwrap();
        assert!(g.backward(y, &["x"]).is_err());
    }

    #[test]
    fn ln_of_zero_is_domain_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0));
        let err = g.ln(x).unwrap_err();
        assert!(err.to_string().contains("ln"));
    }

    #[test]
    fn div_by_zero_is_domain_error() {
        let mut g = Graph::new();
        let a = g.scalar(1.0);
        let b = g.scalar(0.0);
        assert!(g.div(a, b).is_err());
    }

    #[test]
    fn shape_mismatch_is_conformance_error() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(g.add(a, b).is_err());
        let m = g.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let n = g.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        assert!(g.matmul(m, n).is_err());
    }

    #[test]
    fn replay_reproduces_forward_bit_exactly() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::matrix(3, 2, vec![0.3, -1.2, 2.4, 0.01, -5.0, 1.7]).unwrap()).unwrap();
        let w = g.leaf(Tensor::matrix(2, 4, (0..8).map(|i| (i as f64).sin()).collect()).unwrap());
        let h = g.matmul(x, w).unwrap();
        let r = g.relu(h).unwrap();
        let e = g.exp(r).unwrap();
        let lse = g.log_sum_exp_rows(e).unwrap();
        let _loss = g.sum_all(lse).unwrap();
        let replayed = g.replay_forward().unwrap();
        for (i, t) in replayed.iter().enumerate() {
            assert_eq!(t.data(), g.nodes[i].value.data(), "node {} differs", i);
        }
    }

    #[test]
    fn matmul_backward_matches_hand_computation() {
        // loss = sum(A @ B) with A 2x2, B 2x2 -> dA[i,k] = sum_j B[k,j]
        let mut g = Graph::new();
        let a = g.param("a", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let b = g.param("b", Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap()).unwrap();
        let c = g.matmul(a, b).unwrap();
        let loss = g.sum_all(c).unwrap();
        let grads = g.backward(loss, &["a", "b"]).unwrap();
        assert_eq!(grads["a"].data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads["b"].data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn prefix_and_suffix_sums() {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let p = g.prefix_sum_exclusive(v).unwrap();
        let s = g.suffix_sum_exclusive(v).unwrap();
        assert_eq!(g.value(p).data(), &[0.0, 1.0, 3.0]);
        assert_eq!(g.value(s).data(), &[5.0, 3.0, 0.0]);
    }

    #[test]
    fn duplicate_param_name_rejected() {
        let mut g = Graph::new();
        g.param("w", Tensor::scalar(1.0)).unwrap();
        assert!(g.param("w", Tensor::scalar(2.0)).is_err());
    }
}
