use std::cell::{Cell, Ref, RefCell};
use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::{RowSupport, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    AddScalar(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Matmul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    AddRow {
        a: usize,
        bias: usize,
        cols: usize,
    },
    OuterSum {
        u: usize,
        v: usize,
    },
    SoftmaxRows {
        a: usize,
        support: Arc<RowSupport>,
    },
    MixBlocks {
        att: usize,
        x: usize,
        n: usize,
        cols: usize,
        per_block: bool,
        support: Option<Arc<RowSupport>>,
    },
    ShiftRows {
        a: usize,
        k: usize,
        cols: usize,
    },
    SliceRows {
        a: usize,
        start: usize,
        cols: usize,
    },
    ConcatRows(Vec<usize>),
    Reshape(usize),
    Sum(usize),
    Mean(usize),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Records primitive operations during a forward pass and replays them in
/// reverse to compute gradients.
///
/// Node ids grow with creation order and every op only references earlier
/// nodes, so walking ids downwards is a reverse topological order.
pub struct Tape<S> {
    nodes: RefCell<Vec<Node<S>>>,
    grads: RefCell<Vec<Option<Vec<S>>>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf: gradients are tracked.
    pub fn param(&self, t: &Tensor<S>) -> Result<Var<'_, S>> {
        self.push("param", t.clone(), Op::Leaf, true)
    }

    /// Constant leaf: no gradient flows into it.
    pub fn constant(&self, t: Tensor<S>) -> Result<Var<'_, S>> {
        self.push("constant", t, Op::Leaf, false)
    }

    fn push(&self, name: &'static str, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Result<Var<'_, S>> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v`
    /// was reachable and tracked.
    pub fn grad(&self, v: Var<'_, S>) -> Option<Tensor<S>> {
        let grads = self.grads.borrow();
        let g = grads.get(v.id)?.as_ref()?;
        let shape = self.nodes.borrow()[v.id].value.shape().to_vec();
        Some(Tensor::new(shape, g.clone()).expect("gradient shape matches value"))
    }

    /// Back-propagates from a scalar `loss` through every recorded op.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<()> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Rank(root.value.shape().to_vec()));
        }
        self.consumed.set(true);
        let mut grads: Vec<Option<Vec<S>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![S::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(id);
            let Some(g) = hi[0].as_ref() else { continue };
            backprop(&nodes, node, g, lo);
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }
}

fn slot<'g, S: Scalar>(nodes: &[Node<S>], grads: &'g mut [Option<Vec<S>>], id: usize) -> Option<&'g mut Vec<S>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![S::zero(); len]))
}

fn backprop<S: Scalar>(nodes: &[Node<S>], node: &Node<S>, g: &[S], lo: &mut [Option<Vec<S>>]) {
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(ga) = slot(nodes, lo, *a) {
                ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }
            if let Some(gb) = slot(nodes, lo, *b) {
                gb.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, lo, *a) {
                ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }
            if let Some(gb) = slot(nodes, lo, *b) {
                gb.iter_mut().zip(g).for_each(|(d, &s)| *d -= s);
            }
        }
        Op::Mul(a, b) => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            if let Some(ga) = slot(nodes, lo, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
            }
            if let Some(gb) = slot(nodes, lo, *b) {
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = slot(nodes, lo, *a) {
                ga.iter_mut().zip(g).for_each(|(d, &v)| *d += *s * v);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(ga) = slot(nodes, lo, *a) {
                ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }
        }
        Op::Tanh(a) => {
            if let Some(ga) = slot(nodes, lo, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * (S::one() - out[i] * out[i]);
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(ga) = slot(nodes, lo, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * out[i] * (S::one() - out[i]);
                }
            }
        }
        Op::Relu(a) => {
            let av = nodes[*a].value.data();
            if let Some(ga) = slot(nodes, lo, *a) {
                for i in 0..g.len() {
                    if av[i] > S::zero() {
                        ga[i] += g[i];
                    }
                }
            }
        }
        Op::Matmul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            if let Some(ga) = slot(nodes, lo, *a) {
                // dA += dY · Bᵀ
                gemm(g, bv, ga, m, n, k, false, true);
            }
            if let Some(gb) = slot(nodes, lo, *b) {
                // dB += Aᵀ · dY
                gemm(av, g, gb, k, m, n, true, false);
            }
        }
        Op::AddRow { a, bias, cols } => {
            if let Some(ga) = slot(nodes, lo, *a) {
                ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }
            if let Some(gb) = slot(nodes, lo, *bias) {
                for (i, &s) in g.iter().enumerate() {
                    gb[i % cols] += s;
                }
            }
        }
        Op::OuterSum { u, v } => {
            let m = nodes[*v].value.len();
            if let Some(gu) = slot(nodes, lo, *u) {
                for (i, d) in gu.iter_mut().enumerate() {
                    *d += g[i * m..(i + 1) * m].iter().copied().sum::<S>();
                }
            }
            if let Some(gv) = slot(nodes, lo, *v) {
                for (idx, &s) in g.iter().enumerate() {
                    gv[idx % m] += s;
                }
            }
        }
        Op::SoftmaxRows { a, support } => {
            let cols = support.n_cols();
            if let Some(ga) = slot(nodes, lo, *a) {
                for i in 0..support.n_rows() {
                    let row = support.row(i);
                    let base = i * cols;
                    let dot: S = row.iter().map(|&j| out[base + j] * g[base + j]).sum();
                    for &j in row {
                        ga[base + j] += out[base + j] * (g[base + j] - dot);
                    }
                }
            }
        }
        Op::MixBlocks {
            att,
            x,
            n,
            cols,
            per_block,
            support,
        } => {
            let (n, cols) = (*n, *cols);
            let av = nodes[*att].value.data();
            let xv = nodes[*x].value.data();
            let blocks = xv.len() / (n * cols);
            let full;
            let sup = match support {
                Some(s) => s.as_ref(),
                None => {
                    full = RowSupport::full(n, n);
                    &full
                }
            };
            if let Some(gx) = slot(nodes, lo, *x) {
                for b in 0..blocks {
                    let ab = if *per_block { &av[b * n * n..(b + 1) * n * n] } else { av };
                    for i in 0..n {
                        let gi = &g[(b * n + i) * cols..(b * n + i + 1) * cols];
                        for &j in sup.row(i) {
                            let w = ab[i * n + j];
                            let xj = &mut gx[(b * n + j) * cols..(b * n + j + 1) * cols];
                            for c in 0..cols {
                                xj[c] += w * gi[c];
                            }
                        }
                    }
                }
            }
            if let Some(ga) = slot(nodes, lo, *att) {
                for b in 0..blocks {
                    let off = if *per_block { b * n * n } else { 0 };
                    for i in 0..n {
                        let gi = &g[(b * n + i) * cols..(b * n + i + 1) * cols];
                        for &j in sup.row(i) {
                            let xj = &xv[(b * n + j) * cols..(b * n + j + 1) * cols];
                            let mut acc = S::zero();
                            for c in 0..cols {
                                acc += gi[c] * xj[c];
                            }
                            ga[off + i * n + j] += acc;
                        }
                    }
                }
            }
        }
        Op::ShiftRows { a, k, cols } => {
            if let Some(ga) = slot(nodes, lo, *a) {
                let shift = k * cols;
                for idx in shift..g.len() {
                    ga[idx - shift] += g[idx];
                }
            }
        }
        Op::SliceRows { a, start, cols } => {
            if let Some(ga) = slot(nodes, lo, *a) {
                let off = start * cols;
                for (idx, &s) in g.iter().enumerate() {
                    ga[off + idx] += s;
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                if let Some(gp) = slot(nodes, lo, p) {
                    gp.iter_mut().zip(&g[off..off + len]).for_each(|(d, &s)| *d += s);
                }
                off += len;
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = slot(nodes, lo, *a) {
                ga.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(ga) = slot(nodes, lo, *a) {
                let scale = g[0] / S::lit(ga.len() as f64);
                ga.iter_mut().for_each(|d| *d += scale);
            }
        }
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    // Split by sign so exp never overflows.
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Numerically stable masked softmax of one row into `out`.
///
/// Entries outside `cols` are left untouched (callers zero-initialize).
fn softmax_into<S: Scalar>(scores: &[S], cols: &[usize], out: &mut [S]) {
    if cols.is_empty() {
        return;
    }
    let max = cols.iter().map(|&j| scores[j]).fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for &j in cols {
        let e = (scores[j] - max).exp();
        out[j] = e;
        total += e;
    }
    for &j in cols {
        out[j] /= total;
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor<S>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    fn same_shape(&self, other: &Var<'t, S>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(Error::dim(op, &a, &b));
        }
        Ok(())
    }

    fn zip_with(&self, other: Var<'t, S>, name: &'static str, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Self> {
        self.same_shape(&other, name)?;
        let value = {
            let (a, b) = (self.value(), other.value());
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        let rg = self.tape.rg(self.id) || self.tape.rg(other.id);
        self.tape.push(name, value, op, rg)
    }

    fn map(&self, name: &'static str, f: impl Fn(S) -> S, op: Op<S>) -> Result<Self> {
        let value = {
            let a = self.value();
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())?
        };
        self.tape.push(name, value, op, self.tape.rg(self.id))
    }

    pub fn add(self, other: Var<'t, S>) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t, S>) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t, S>) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, s: S) -> Result<Self> {
        self.map("scale", |a| a * s, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: S) -> Result<Self> {
        self.map("add_scalar", |a| a + s, Op::AddScalar(self.id))
    }

    pub fn tanh(self) -> Result<Self> {
        self.map("tanh", |a| a.tanh(), Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Result<Self> {
        self.map("sigmoid", sigmoid, Op::Sigmoid(self.id))
    }

    pub fn relu(self) -> Result<Self> {
        self.map("relu", |a| a.max(S::zero()), Op::Relu(self.id))
    }

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(self, other: Var<'t, S>) -> Result<Self> {
        let (as_, bs) = (self.shape(), other.shape());
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[0] {
            return Err(Error::dim("matmul", &as_, &bs));
        }
        let (m, k, n) = (as_[0], as_[1], bs[1]);
        let value = {
            let (a, b) = (self.value(), other.value());
            let (av, bv) = (a.data(), b.data());
            let mut out = vec![S::zero(); m * n];
            gemm(av, bv, &mut out, m, k, n, false, false);
            Tensor::new(vec![m, n], out)?
        };
        let rg = self.tape.rg(self.id) || self.tape.rg(other.id);
        self.tape.push("matmul", value, Op::Matmul { a: self.id, b: other.id, m, k, n }, rg)
    }

    /// Adds a length-`cols` bias vector to every row of a matrix.
    pub fn add_row(self, bias: Var<'t, S>) -> Result<Self> {
        let (as_, bs) = (self.shape(), bias.shape());
        let cols = *as_.last().unwrap_or(&1);
        if as_.len() != 2 || bias.value().len() != cols {
            return Err(Error::dim("add_row", &as_, &bs));
        }
        let value = {
            let (a, b) = (self.value(), bias.value());
            let bv = b.data();
            let data = a.data().iter().enumerate().map(|(i, &x)| x + bv[i % cols]).collect();
            Tensor::new(as_.clone(), data)?
        };
        let rg = self.tape.rg(self.id) || self.tape.rg(bias.id);
        self.tape.push(
            "add_row",
            value,
            Op::AddRow {
                a: self.id,
                bias: bias.id,
                cols,
            },
            rg,
        )
    }

    /// `out[i][j] = self[i] + other[j]` for flat vectors `self` and `other`.
    pub fn outer_sum(self, other: Var<'t, S>) -> Result<Self> {
        let value = {
            let (u, v) = (self.value(), other.value());
            let (n, m) = (u.len(), v.len());
            Tensor::from_fn2(n, m, |i, j| u.data()[i] + v.data()[j])
        };
        let rg = self.tape.rg(self.id) || self.tape.rg(other.id);
        self.tape.push("outer_sum", value, Op::OuterSum { u: self.id, v: other.id }, rg)
    }

    /// Row-wise softmax restricted to `support`; entries outside the
    /// support are exactly zero and rows with empty support are all zero.
    pub fn softmax_rows(self, support: &Arc<RowSupport>) -> Result<Self> {
        let s = self.shape();
        if s.len() != 2 || s[0] != support.n_rows() || s[1] != support.n_cols() {
            return Err(Error::dim("softmax_rows", &s, &[support.n_rows(), support.n_cols()]));
        }
        let cols = s[1];
        let value = {
            let a = self.value();
            let mut out = vec![S::zero(); a.len()];
            for i in 0..s[0] {
                softmax_into(
                    &a.data()[i * cols..(i + 1) * cols],
                    support.row(i),
                    &mut out[i * cols..(i + 1) * cols],
                );
            }
            Tensor::new(s.clone(), out)?
        };
        self.tape.push(
            "softmax_rows",
            value,
            Op::SoftmaxRows {
                a: self.id,
                support: Arc::clone(support),
            },
            self.tape.rg(self.id),
        )
    }

    /// Softmax of a vector over the entries where `mask` is true.
    pub fn softmax_masked(self, mask: &[bool]) -> Result<Self> {
        let s = self.shape();
        let n = self.value().len();
        if mask.len() != n {
            return Err(Error::dim("softmax_masked", &s, &[mask.len()]));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::DegenerateMask);
        }
        let support = Arc::new(RowSupport::from_mask(1, n, mask)?);
        let row = self.reshape(&[1, n])?.softmax_rows(&support)?;
        row.reshape(&s)
    }

    /// Applies an `[n,n]` mixing matrix to every consecutive block of `n`
    /// rows of `self` (`[blocks·n, cols]`). With a `[blocks,n,n]` matrix each
    /// block gets its own mixer. When `support` is given the mixer is read
    /// only on supported entries, as if it were zero elsewhere.
    pub fn mix_blocks(self, att: Var<'t, S>, support: Option<&Arc<RowSupport>>) -> Result<Self> {
        let (xs, ats) = (self.shape(), att.shape());
        if xs.len() != 2 {
            return Err(Error::dim("mix_blocks", &ats, &xs));
        }
        let (per_block, n) = match ats.as_slice() {
            [a, b] if a == b => (false, *a),
            [_, a, b] if a == b => (true, *a),
            _ => return Err(Error::dim("mix_blocks", &ats, &xs)),
        };
        let cols = xs[1];
        if xs[0] % n != 0 || (per_block && ats[0] != xs[0] / n) {
            return Err(Error::dim("mix_blocks", &ats, &xs));
        }
        if let Some(s) = support {
            if s.n_rows() != n || s.n_cols() != n {
                return Err(Error::dim("mix_blocks support", &[n, n], &[s.n_rows(), s.n_cols()]));
            }
        }
        let blocks = xs[0] / n;
        let value = {
            let (a, x) = (att.value(), self.value());
            let (av, xv) = (a.data(), x.data());
            let mut out = vec![S::zero(); xv.len()];
            for b in 0..blocks {
                let ab = if per_block { &av[b * n * n..(b + 1) * n * n] } else { av };
                for i in 0..n {
                    let row = &mut out[(b * n + i) * cols..(b * n + i + 1) * cols];
                    let mut accumulate = |j: usize| {
                        let w = ab[i * n + j];
                        if w != S::zero() {
                            let xj = &xv[(b * n + j) * cols..(b * n + j + 1) * cols];
                            for c in 0..cols {
                                row[c] += w * xj[c];
                            }
                        }
                    };
                    match support {
                        Some(s) => s.row(i).iter().for_each(|&j| accumulate(j)),
                        None => (0..n).for_each(accumulate),
                    }
                }
            }
            Tensor::new(xs.clone(), out)?
        };
        let rg = self.tape.rg(self.id) || self.tape.rg(att.id);
        self.tape.push(
            "mix_blocks",
            value,
            Op::MixBlocks {
                att: att.id,
                x: self.id,
                n,
                cols,
                per_block,
                support: support.cloned(),
            },
            rg,
        )
    }

    /// Moves rows of a matrix down by `k`, filling the top with zeros.
    pub fn shift_rows(self, k: usize) -> Result<Self> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::dim("shift_rows", &s, &[2]));
        }
        let cols = s[1];
        let value = {
            let a = self.value();
            let mut out = vec![S::zero(); a.len()];
            let shift = (k * cols).min(a.len());
            out[shift..].copy_from_slice(&a.data()[..a.len() - shift]);
            Tensor::new(s.clone(), out)?
        };
        self.tape
            .push("shift_rows", value, Op::ShiftRows { a: self.id, k, cols }, self.tape.rg(self.id))
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Self> {
        let s = self.shape();
        if s.len() != 2 || len == 0 || start + len > s[0] {
            return Err(Error::dim("slice_rows", &s, &[start, len]));
        }
        let cols = s[1];
        let value = {
            let a = self.value();
            Tensor::new(vec![len, cols], a.data()[start * cols..(start + len) * cols].to_vec())?
        };
        self.tape.push(
            "slice_rows",
            value,
            Op::SliceRows { a: self.id, start, cols },
            self.tape.rg(self.id),
        )
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(parts: &[Var<'t, S>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::dim("concat_rows", &[], &[]))?;
        let tape = first.tape;
        let cols = first.shape()[first.shape().len() - 1];
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = p.value();
            let (r, c) = v.dims2();
            if c != cols || v.shape().len() != 2 {
                return Err(Error::dim("concat_rows", &first.shape(), v.shape()));
            }
            data.extend_from_slice(v.data());
            rows += r;
        }
        let rg = parts.iter().any(|p| tape.rg(p.id));
        let ids = parts.iter().map(|p| p.id).collect();
        tape.push("concat_rows", Tensor::new(vec![rows, cols], data)?, Op::ConcatRows(ids), rg)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let value = self.value().clone().reshape(shape)?;
        self.tape.push("reshape", value, Op::Reshape(self.id), self.tape.rg(self.id))
    }

    pub fn sum(self) -> Result<Self> {
        let v = self.value().data().iter().copied().sum();
        self.tape
            .push("sum", Tensor::scalar(v), Op::Sum(self.id), self.tape.rg(self.id))
    }

    pub fn mean(self) -> Result<Self> {
        let v = {
            let a = self.value();
            a.data().iter().copied().sum::<S>() / S::lit(a.len() as f64)
        };
        self.tape
            .push("mean", Tensor::scalar(v), Op::Mean(self.id), self.tape.rg(self.id))
    }
}

/// `out += op(a) · op(b)` for row-major slices, where `op` optionally
/// transposes; `op(a)` is `[m, k]` and `op(b)` is `[k, n]`.
#[allow(clippy::too_many_arguments)]
fn gemm<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize, ta: bool, tb: bool) {
    let av = if ta {
        ArrayView2::from_shape((k, m), a).expect("gemm lhs").reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).expect("gemm lhs")
    };
    let bv = if tb {
        ArrayView2::from_shape((n, k), b).expect("gemm rhs").reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).expect("gemm rhs")
    };
    let mut ov = ArrayViewMut2::from_shape((m, n), out).expect("gemm out");
    general_mat_mul(S::one(), &av, &bv, S::one(), &mut ov);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let tape = Tape::new();
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let eye = tape.constant(Tensor::eye(2)).unwrap();
        assert_eq!(eye.matmul(m).unwrap().value().data(), &[1., 2., 3., 4.]);
        let p = tape.constant(t(&[2, 2], &[1., 0., 0., 0.])).unwrap();
        let b = tape.constant(t(&[2, 2], &[5., 6., 7., 8.])).unwrap();
        assert_eq!(p.matmul(b).unwrap().value().data(), &[5., 6., 0., 0.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let msg = a.matmul(b).err().unwrap().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn elementwise_basics() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0)).unwrap();
        assert_eq!(z.tanh().unwrap().value().data()[0], 0.0);
        assert_eq!(z.sigmoid().unwrap().value().data()[0], 0.5);
        let a = tape.constant(t(&[3], &[1., 2., 3.])).unwrap();
        let zero = tape.constant(Tensor::zeros(&[3])).unwrap();
        assert_eq!(a.mul(zero).unwrap().value().data(), &[0., 0., 0.]);
        let bad = tape.constant(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(a.add(bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn sigmoid_saturates_without_overflow() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[-1000., 1000.])).unwrap();
        let y = x.sigmoid().unwrap();
        assert_eq!(y.value().data(), &[0., 1.]);
    }

    #[test]
    fn masked_softmax_cases() {
        let tape = Tape::new();
        let s = tape.constant(Tensor::<f64>::zeros(&[3])).unwrap();
        let y = s.softmax_masked(&[true; 3]).unwrap();
        for &v in y.value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = tape.constant(t(&[2], &[5., -1000.])).unwrap();
        let y = s.softmax_masked(&[true, true]).unwrap();
        assert!((y.value().data()[0] - 1.0).abs() < 1e-15);
        assert!(y.value().data()[1] < 1e-300);

        let s = tape.constant(t(&[3], &[1., 2., 3.])).unwrap();
        let y = s.softmax_masked(&[true, false, true]).unwrap();
        let (e1, e3) = (1f64.exp(), 3f64.exp());
        let want = [e1 / (e1 + e3), 0.0, e3 / (e1 + e3)];
        for (a, b) in y.value().data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(y.value().data()[1], 0.0);

        let s = tape.constant(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(s.softmax_masked(&[false, false]), Err(Error::DegenerateMask)));
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let tape = Tape::new();
        let w = tape.param(&t(&[3], &[1., 2., 3.])).unwrap();
        let loss = w.sum().unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[1., 1., 1.]);

        let tape = Tape::new();
        let w = tape.param(&t(&[3], &[1., 2., 3.])).unwrap();
        let loss = w.mul(w).unwrap().sum().unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[2., 4., 6.]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let tape = Tape::new();
        let w = tape.param(&t(&[3], &[1., 2., 3.])).unwrap();
        assert!(matches!(tape.backward(w), Err(Error::Rank(_))));
        let loss = w.sum().unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(t(&[2], &[1., 2.])).unwrap();
        let w = tape.param(&t(&[2], &[3., 4.])).unwrap();
        let loss = c.mul(w).unwrap().sum().unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(w).unwrap().data(), &[1., 2.]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let tape = Tape::new();
        let a = tape.constant(t(&[1], &[1e308])).unwrap();
        assert!(matches!(a.scale(10.0), Err(Error::NonFinite("scale"))));
    }

    #[test]
    fn shift_and_slice_rows() {
        let tape = Tape::new();
        let a = tape.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.])).unwrap();
        assert_eq!(a.shift_rows(1).unwrap().value().data(), &[0., 0., 1., 2., 3., 4.]);
        assert_eq!(a.shift_rows(5).unwrap().value().data(), &[0.; 6]);
        assert_eq!(a.slice_rows(2, 1).unwrap().value().data(), &[5., 6.]);
    }

    #[test]
    fn empty_support_row_is_zero() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let sup = Arc::new(RowSupport::from_mask(2, 2, &[true, true, false, false]).unwrap());
        let y = a.softmax_rows(&sup).unwrap();
        assert_eq!(&y.value().data()[2..], &[0., 0.]);
    }
}
