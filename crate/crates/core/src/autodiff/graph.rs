//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op in forward order as it is evaluated. Calling
//! [`Graph::backward`] walks the recorded nodes in exact reverse order and
//! accumulates gradients into the [`ParamStore`] the parameters came from.
//! A graph is built per minibatch and dropped afterwards.

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_acc, Tensor};
use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    /// Row `i` of the output is the mean of rows `groups[i]` of a parameter table.
    GatherMean { param: ParamId, groups: Vec<Vec<usize>> },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Transpose(Var),
    Sum(Var),
    MeanRows(Var),
    Max { input: Var, argmax: usize },
    Softmax { input: Var, temperature: f64 },
    KlBernoulli { input: Var, prior: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn ensure_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AutodiffError::ShapeMismatch { op, lhs: a.shape(), rhs: b.shape() });
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite(op));
        }
        self.nodes.push(Node { value, op: kind, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Constant, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let p = store.get(id);
        self.push("param", p.value.clone(), Op::Param(id), p.trainable)
    }

    /// Embedding lookup: one output row per index.
    pub fn gather_rows(&mut self, store: &ParamStore, id: ParamId, rows: &[usize]) -> Result<Var> {
        let groups = rows.iter().map(|&r| vec![r]).collect();
        self.gather_mean(store, id, groups)
    }

    /// Mean-over-set lookup: output row `i` is the mean of table rows `groups[i]`.
    pub fn gather_mean(&mut self, store: &ParamStore, id: ParamId, groups: Vec<Vec<usize>>) -> Result<Var> {
        let p = store.get(id);
        let table = &p.value;
        let mut out = Tensor::zeros(groups.len(), table.cols());
        for (i, group) in groups.iter().enumerate() {
            if group.is_empty() {
                return Err(AutodiffError::InvalidArgument {
                    op: "gather_mean",
                    detail: format!("group {i} is empty"),
                });
            }
            let w = 1.0 / group.len() as f64;
            for &r in group {
                if r >= table.rows() {
                    return Err(AutodiffError::InvalidArgument {
                        op: "gather_mean",
                        detail: format!("row {r} out of range for {} ({} rows)", p.name, table.rows()),
                    });
                }
                for (o, &v) in out.row_mut(i).iter_mut().zip(table.row(r)) {
                    *o += w * v;
                }
            }
        }
        let trainable = p.trainable;
        self.push("gather_mean", out, Op::GatherMean { param: id, groups }, trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(AutodiffError::ShapeMismatch { op: "matmul", lhs: av.shape(), rhs: bv.shape() });
        }
        let out = av.matmul(bv);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", out, Op::MatMul(a, b), rg)
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, kind: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        ensure_same(op, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(op, out, kind, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds the `1 x n` row `row` to every row of the `m x n` matrix `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(AutodiffError::ShapeMismatch { op: "add_row", lhs: av.shape(), rhs: rv.shape() });
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push("add_row", out, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        self.push("scale", out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v + s);
        let rg = self.rg(a);
        self.push("add_scalar", out, Op::AddScalar(a), rg)
    }

    /// `max(0, x)`. The subgradient at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(a);
        self.push("relu", out, Op::Relu(a), rg)
    }

    /// `[x]_+`; the same op as [`Graph::relu`] under the name the losses use.
    pub fn hinge(&mut self, a: Var) -> Result<Var> {
        self.relu(a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push("sigmoid", out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push("tanh", out, Op::Tanh(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape(),
                    rhs: v.shape(),
                });
            }
            cols += v.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let v = self.value(p);
                out.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
                offset += v.cols();
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape(),
                    rhs: v.shape(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat_rows", Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start >= end || end > av.cols() {
            return Err(AutodiffError::InvalidArgument {
                op: "slice_cols",
                detail: format!("range {start}..{end} invalid for shape {:?}", av.shape()),
            });
        }
        let mut out = Tensor::zeros(av.rows(), end - start);
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..end]);
        }
        let rg = self.rg(a);
        self.push("slice_cols", out, Op::SliceCols(a, start), rg)
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start >= end || end > av.rows() {
            return Err(AutodiffError::InvalidArgument {
                op: "slice_rows",
                detail: format!("range {start}..{end} invalid for shape {:?}", av.shape()),
            });
        }
        let c = av.cols();
        let out = Tensor::from_vec(end - start, c, av.data()[start * c..end * c].to_vec());
        let rg = self.rg(a);
        self.push("slice_rows", out, Op::SliceRows(a, start), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push("transpose", out, Op::Transpose(a), rg)
    }

    /// Sum of all elements, as a `1 x 1` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.rg(a);
        self.push("sum", out, Op::Sum(a), rg)
    }

    /// Mean over rows: `m x n -> 1 x n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let mut out = Tensor::zeros(1, av.cols());
        let w = 1.0 / av.rows() as f64;
        for r in 0..av.rows() {
            for (o, &v) in out.data_mut().iter_mut().zip(av.row(r)) {
                *o += w * v;
            }
        }
        let rg = self.rg(a);
        self.push("mean_rows", out, Op::MeanRows(a), rg)
    }

    /// Maximum over all elements. Backward routes the whole gradient to the
    /// first maximal element in row-major order.
    pub fn max(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(AutodiffError::InvalidArgument { op: "max", detail: "empty input".into() });
        }
        let argmax = argmax_first(av.data());
        let out = Tensor::scalar(av.data()[argmax]);
        let rg = self.rg(a);
        self.push("max", out, Op::Max { input: a, argmax }, rg)
    }

    /// `softmax(x / temperature)` over all elements, preserving shape.
    pub fn temperature_softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(AutodiffError::InvalidArgument {
                op: "temperature_softmax",
                detail: format!("temperature must be positive, got {temperature}"),
            });
        }
        let av = self.value(a);
        let probs = softmax_with_temperature(av.data(), temperature);
        let out = Tensor::from_vec(av.rows(), av.cols(), probs);
        let rg = self.rg(a);
        self.push("temperature_softmax", out, Op::Softmax { input: a, temperature }, rg)
    }

    /// `KL(Bernoulli(p) || Bernoulli(prior))` for a `1 x 1` probability `p`.
    pub fn kl_bernoulli(&mut self, p: Var, prior: f64) -> Result<Var> {
        let pv = self.value(p);
        if pv.shape() != [1, 1] {
            return Err(AutodiffError::InvalidArgument {
                op: "kl_bernoulli",
                detail: format!("expected a 1x1 probability, got {:?}", pv.shape()),
            });
        }
        let value = kl_bernoulli(pv.item(), prior).map_err(|detail| AutodiffError::InvalidArgument {
            op: "kl_bernoulli",
            detail,
        })?;
        let rg = self.rg(p);
        self.push("kl_bernoulli", Tensor::scalar(value), Op::KlBernoulli { input: p, prior }, rg)
    }

    /// Propagates d`loss` back through the tape and adds the result to the
    /// `grad` of every trainable parameter that `loss` depends on.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let shape = self.value(loss).shape();
        if shape != [1, 1] {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let out = &node.value;
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let p = store.get_mut(*id);
                    if p.trainable {
                        p.grad.add_assign(&g);
                    }
                }
                Op::GatherMean { param, groups } => {
                    let p = store.get_mut(*param);
                    if p.trainable {
                        for (gi, group) in groups.iter().enumerate() {
                            let w = 1.0 / group.len() as f64;
                            for &r in group {
                                for (dst, &src) in p.grad.row_mut(r).iter_mut().zip(g.row(gi)) {
                                    *dst += w * src;
                                }
                            }
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if self.rg(*a) {
                        // dA = G * B^T
                        let mut da = Tensor::zeros(m, k);
                        for i in 0..m {
                            let g_row = g.row(i);
                            let da_row = da.row_mut(i);
                            for (p, d) in da_row.iter_mut().enumerate() {
                                *d = g_row.iter().zip(bv.row(p)).map(|(x, y)| x * y).sum();
                            }
                        }
                        accumulate(&mut grads, *a, da);
                    }
                    if self.rg(*b) {
                        // dB = A^T * G
                        let mut db = Tensor::zeros(k, n);
                        let at = av.transpose();
                        matmul_acc(at.data(), g.data(), db.data_mut(), k, m, n);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.map(|v| -v));
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        let d = zip_map(&g, bv, |x, y| x * y);
                        accumulate(&mut grads, *a, d);
                    }
                    if self.rg(*b) {
                        let d = zip_map(&g, av, |x, y| x * y);
                        accumulate(&mut grads, *b, d);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        let mut d = Tensor::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (o, &v) in d.data_mut().iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        accumulate(&mut grads, *row, d);
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads, *a, g.map(|v| v * s));
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Relu(a) => {
                    let d = zip_map(&g, out, |x, y| if y > 0.0 { x } else { 0.0 });
                    accumulate(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = zip_map(&g, out, |x, y| x * y * (1.0 - y));
                    accumulate(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let d = zip_map(&g, out, |x, y| x * (1.0 - y * y));
                    accumulate(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.value(p).cols();
                        if self.rg(p) {
                            let mut d = Tensor::zeros(g.rows(), pc);
                            for r in 0..g.rows() {
                                d.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + pc]);
                            }
                            accumulate(&mut grads, p, d);
                        }
                        offset += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let c = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pr = self.value(p).rows();
                        if self.rg(p) {
                            let d = Tensor::from_vec(pr, c, g.data()[offset * c..(offset + pr) * c].to_vec());
                            accumulate(&mut grads, p, d);
                        }
                        offset += pr;
                    }
                }
                Op::SliceCols(a, start) => {
                    let av = self.value(*a);
                    let mut d = Tensor::zeros(av.rows(), av.cols());
                    for r in 0..g.rows() {
                        d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::SliceRows(a, start) => {
                    let av = self.value(*a);
                    let c = av.cols();
                    let mut d = Tensor::zeros(av.rows(), c);
                    d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *a, d);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Sum(a) => {
                    let [r, c] = self.value(*a).shape();
                    accumulate(&mut grads, *a, Tensor::filled(r, c, g.item()));
                }
                Op::MeanRows(a) => {
                    let av = self.value(*a);
                    let w = 1.0 / av.rows() as f64;
                    let mut d = Tensor::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        for (o, &v) in d.row_mut(r).iter_mut().zip(g.data()) {
                            *o = w * v;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Max { input, argmax } => {
                    let [r, c] = self.value(*input).shape();
                    let mut d = Tensor::zeros(r, c);
                    d.data_mut()[*argmax] = g.item();
                    accumulate(&mut grads, *input, d);
                }
                Op::Softmax { input, temperature } => {
                    let dot: f64 = g.data().iter().zip(out.data()).map(|(x, y)| x * y).sum();
                    let t = *temperature;
                    let d = zip_map(&g, out, |x, y| y * (x - dot) / t);
                    accumulate(&mut grads, *input, d);
                }
                Op::KlBernoulli { input, prior } => {
                    let p = self.value(*input).item();
                    let q = *prior;
                    let dp = (p / q).ln() - ((1.0 - p) / (1.0 - q)).ln();
                    accumulate(&mut grads, *input, Tensor::scalar(g.item() * dp));
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Index of the first maximal element.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable `softmax(x / temperature)`.
pub fn softmax_with_temperature(values: &[f64], temperature: f64) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|&v| ((v - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Bernoulli-to-Bernoulli KL divergence `KL(p || q)`; both arguments must lie in (0, 1).
pub fn kl_bernoulli(p: f64, q: f64) -> std::result::Result<f64, String> {
    for (name, v) in [("p", p), ("q", q)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(format!("{name} = {v} is outside the open interval (0, 1)"));
        }
    }
    Ok(p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln())
}
