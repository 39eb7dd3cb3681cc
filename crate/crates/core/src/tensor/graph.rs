// Record-on-forward tape. Every op computes its value eagerly and pushes a
// node; `backward` walks the nodes in exact reverse order of recording.

use super::{gemm, GradStore, ParamId, ParamStore, Tensor};
use crate::attention::simplex_projection;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Relu,
    Sigmoid,
    Exp,
    Log,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Unary(Var, Unary),
    Concat(Vec<Var>, Axis),
    Slice {
        input: Var,
        axis: Axis,
        start: usize,
    },
    MeanRows(Var),
    Sum(Var),
    Softmax {
        input: Var,
        segments: Vec<usize>,
    },
    Sparsemax(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A dynamic computation graph over a borrowed parameter set.
///
/// One graph is confined to one thread; distinct graphs over the same
/// [`ParamStore`] may run concurrently.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

const LAYER_NORM_EPS: f64 = 1e-9;

fn rc(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.value(*id),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v)
            .scalar_value()
            .ok_or_else(|| Error::arg(format!("expected a scalar, got shape {:?}", self.shape(v))))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: self.params.get(id).requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (rc(ta), rc(tb));
        if k != k2 {
            return Err(Error::dim("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, 0.0, &mut out);
        let rg = self.needs(a) || self.needs(b);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg, "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (n, k2)) = (rc(ta), rc(tb));
        if k != k2 {
            return Err(Error::dim("matmul_nt", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), true, 0.0, &mut out);
        let rg = self.needs(a) || self.needs(b);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMulNT(a, b), rg, "matmul_nt")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = rc(t);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data()[i * n + j];
            }
        }
        let rg = self.needs(a);
        self.push(Tensor::matrix(n, m, out)?, Op::Transpose(a), rg, "transpose")
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.needs(a) || self.needs(b);
        self.push(t, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.needs(a) || self.needs(b);
        self.push(t, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.needs(a) || self.needs(b);
        self.push(t, Op::Mul(a, b), rg, "mul")
    }

    /// Adds the `1 × n` row `bias` to every row of the `m × n` input. This is
    /// the only broadcasting the tape supports.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (m, n) = rc(tx);
        if tb.rows() != 1 || tb.cols() != n {
            return Err(Error::dim("add_row", tx.shape(), tb.shape()));
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let rg = self.needs(x) || self.needs(bias);
        self.push(Tensor::matrix(m, n, out)?, Op::AddRow(x, bias), rg, "add_row")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * s).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.needs(x);
        self.push(out, Op::Scale(x, s), rg, "scale")
    }

    pub fn unary(&mut self, x: Var, op: Unary) -> Result<Var> {
        let t = self.value(x);
        let f: fn(f64) -> f64 = match op {
            Unary::Tanh => f64::tanh,
            Unary::Relu => |v| v.max(0.0),
            Unary::Sigmoid => |v| 1.0 / (1.0 + (-v).exp()),
            Unary::Exp => f64::exp,
            Unary::Log => {
                if let Some(bad) = t.data().iter().find(|v| **v <= 0.0) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive input {bad}"),
                    });
                }
                f64::ln
            }
        };
        let data = t.data().iter().map(|v| f(*v)).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.needs(x);
        self.push(out, Op::Unary(x, op), rg, "elementwise")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: Axis) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::arg("concat of an empty list"))?;
        if inputs.len() == 1 {
            return Ok(first);
        }
        let (r0, c0) = rc(self.value(first));
        let out = match axis {
            Axis::Rows => {
                let mut data = Vec::new();
                let mut rows = 0;
                for &v in inputs {
                    let t = self.value(v);
                    if t.cols() != c0 {
                        return Err(Error::dim("concat", self.value(first).shape(), t.shape()));
                    }
                    rows += t.rows();
                    data.extend_from_slice(t.data());
                }
                Tensor::matrix(rows, c0, data)?
            }
            Axis::Cols => {
                let mut cols = 0;
                for &v in inputs {
                    let t = self.value(v);
                    if t.rows() != r0 {
                        return Err(Error::dim("concat", self.value(first).shape(), t.shape()));
                    }
                    cols += t.cols();
                }
                let mut data = Vec::with_capacity(r0 * cols);
                for r in 0..r0 {
                    for &v in inputs {
                        data.extend_from_slice(self.value(v).row_slice(r));
                    }
                }
                Tensor::matrix(r0, cols, data)?
            }
        };
        let rg = inputs.iter().any(|v| self.needs(*v));
        self.push(out, Op::Concat(inputs.to_vec(), axis), rg, "concat")
    }

    /// Half-open slice `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: Axis, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = rc(t);
        let extent = if axis == Axis::Rows { m } else { n };
        if start >= end || end > extent {
            return Err(Error::arg(format!(
                "slice [{start}, {end}) out of range for extent {extent}"
            )));
        }
        if start == 0 && end == extent {
            return Ok(x);
        }
        let out = match axis {
            Axis::Rows => Tensor::matrix(end - start, n, t.data()[start * n..end * n].to_vec())?,
            Axis::Cols => {
                let mut data = Vec::with_capacity(m * (end - start));
                for r in 0..m {
                    data.extend_from_slice(&t.row_slice(r)[start..end]);
                }
                Tensor::matrix(m, end - start, data)?
            }
        };
        let rg = self.needs(x);
        self.push(out, Op::Slice { input: x, axis, start }, rg, "slice")
    }

    pub fn row(&mut self, x: Var, r: usize) -> Result<Var> {
        self.slice(x, Axis::Rows, r, r + 1)
    }

    pub fn cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.slice(x, Axis::Cols, start, end)
    }

    pub fn rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.slice(x, Axis::Rows, start, end)
    }

    /// Column-wise mean over rows, `m × n → 1 × n`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = rc(t);
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(t.row_slice(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let rg = self.needs(x);
        self.push(Tensor::row(out)?, Op::MeanRows(x), rg, "mean_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).cols();
        self.segment_softmax(x, &[n])
    }

    /// Softmax applied independently to consecutive column segments of every
    /// row. `segments` holds the segment lengths and must sum to the width.
    pub fn segment_softmax(&mut self, x: Var, segments: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = rc(t);
        if segments.iter().sum::<usize>() != n || segments.contains(&0) {
            return Err(Error::dim("softmax", t.shape(), segments));
        }
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let mut off = 0;
            for &len in segments {
                softmax_in_place(&mut row[off..off + len]);
                off += len;
            }
        }
        let rg = self.needs(x);
        let op = Op::Softmax {
            input: x,
            segments: segments.to_vec(),
        };
        self.push(Tensor::matrix(m, n, out)?, op, rg, "softmax")
    }

    /// Row-wise Euclidean projection onto the probability simplex.
    pub fn sparsemax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = rc(t);
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            out.extend(simplex_projection(t.row_slice(r))?);
        }
        let rg = self.needs(x);
        self.push(Tensor::matrix(m, n, out)?, Op::Sparsemax(x), rg, "sparsemax")
    }

    /// Rows `ids` of `table`, in order.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (m, n) = rc(t);
        if ids.is_empty() {
            return Err(Error::arg("gather of no rows"));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= m) {
            return Err(Error::arg(format!("row {bad} out of range for table with {m} rows")));
        }
        let mut data = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            data.extend_from_slice(t.row_slice(i));
        }
        let rg = self.needs(table);
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
        };
        self.push(Tensor::matrix(ids.len(), n, data)?, op, rg, "gather")
    }

    /// Per-row normalization to zero mean and unit variance followed by an
    /// elementwise affine map with `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (t, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (m, n) = rc(t);
        if tg.len() != n || tb.len() != n {
            return Err(Error::dim("layer_norm", t.shape(), tg.shape()));
        }
        let mut normalized = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        for r in 0..m {
            let row = t.row_slice(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            normalized.extend(row.iter().map(|v| (v - mean) * inv));
        }
        let out: Vec<f64> = normalized
            .chunks(n)
            .flat_map(|row| row.iter().zip(tg.data()).zip(tb.data()).map(|((x, g), b)| x * g + b))
            .collect();
        let rg = self.needs(x) || self.needs(gain) || self.needs(bias);
        let op = Op::LayerNorm {
            input: x,
            gain,
            bias,
            normalized: Tensor::matrix(m, n, normalized)?,
            inv_std,
        };
        self.push(Tensor::matrix(m, n, out)?, op, rg, "layer_norm")
    }

    /// Summed negative log-likelihood of `targets` (one per row) under the
    /// row-wise softmax of `logits`. Returns a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (m, n) = rc(t);
        if targets.len() != m {
            return Err(Error::dim("cross_entropy", t.shape(), &[targets.len()]));
        }
        if let Some(bad) = targets.iter().find(|&&y| y >= n) {
            return Err(Error::arg(format!("target {bad} out of range for {n} classes")));
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(n).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[targets[r]];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let rg = self.needs(logits);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs: Tensor::matrix(m, n, probs)?,
        };
        self.push(Tensor::scalar(loss), op, rg, "cross_entropy")
    }

    /// `x · w + b` with a `1 × n` bias.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Reverse pass from a scalar `loss`, accumulating parameter gradients
    /// into `grads`. Calling it again without zeroing `grads` adds to the
    /// previous totals.
    pub fn backward(&self, loss: Var, grads: &mut GradStore) -> Result<()> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let out = node.value.as_ref();
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => grads.accumulate_owned(*id, g),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ((m, k), n) = (rc(ta), tb.cols());
                    if self.needs(*a) {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), false, tb.data(), true, 0.0, &mut da);
                        acc(&mut adj, *a, ta.shape(), da);
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, ta.data(), true, g.data(), false, 0.0, &mut db);
                        acc(&mut adj, *b, tb.shape(), db);
                    }
                }
                Op::MatMulNT(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ((m, k), n) = (rc(ta), tb.rows());
                    if self.needs(*a) {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), false, tb.data(), false, 0.0, &mut da);
                        acc(&mut adj, *a, ta.shape(), da);
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; n * k];
                        gemm(n, m, k, g.data(), true, ta.data(), false, 0.0, &mut db);
                        acc(&mut adj, *b, tb.shape(), db);
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = rc(&g);
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[j * m + i] = g.data()[i * n + j];
                        }
                    }
                    acc(&mut adj, *a, self.value(*a).shape(), da);
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        acc(&mut adj, *a, g.shape(), g.data().to_vec());
                    }
                    if self.needs(*b) {
                        acc(&mut adj, *b, g.shape(), g.data().to_vec());
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        acc(&mut adj, *a, g.shape(), g.data().to_vec());
                    }
                    if self.needs(*b) {
                        acc(&mut adj, *b, g.shape(), g.data().iter().map(|v| -v).collect());
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        let d = g.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                        acc(&mut adj, *a, ta.shape(), d);
                    }
                    if self.needs(*b) {
                        let d = g.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                        acc(&mut adj, *b, tb.shape(), d);
                    }
                }
                Op::AddRow(x, b) => {
                    if self.needs(*x) {
                        acc(&mut adj, *x, g.shape(), g.data().to_vec());
                    }
                    if self.needs(*b) {
                        let n = g.cols();
                        let mut db = vec![0.0; n];
                        for row in g.data().chunks(n) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        acc(&mut adj, *b, self.value(*b).shape(), db);
                    }
                }
                Op::Scale(x, s) => {
                    acc(&mut adj, *x, g.shape(), g.data().iter().map(|v| v * s).collect());
                }
                Op::Unary(x, kind) => {
                    let y = out.expect("op value").data();
                    let xin = self.value(*x).data();
                    let d: Vec<f64> = match kind {
                        Unary::Tanh => g.data().iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                        Unary::Sigmoid => g.data().iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                        Unary::Exp => g.data().iter().zip(y).map(|(g, y)| g * y).collect(),
                        Unary::Log => g.data().iter().zip(xin).map(|(g, x)| g / x).collect(),
                        Unary::Relu => g
                            .data()
                            .iter()
                            .zip(xin)
                            .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                            .collect(),
                    };
                    acc(&mut adj, *x, g.shape(), d);
                }
                Op::Concat(inputs, axis) => {
                    let (_, n) = rc(&g);
                    let mut offset = 0;
                    for &v in inputs {
                        let t = self.value(v);
                        let (vr, vc) = rc(t);
                        let d = match axis {
                            Axis::Rows => g.data()[offset * n..(offset + vr) * n].to_vec(),
                            Axis::Cols => g
                                .data()
                                .chunks(n)
                                .flat_map(|row| row[offset..offset + vc].iter().copied())
                                .collect(),
                        };
                        offset += if *axis == Axis::Rows { vr } else { vc };
                        if self.needs(v) {
                            acc(&mut adj, v, t.shape(), d);
                        }
                    }
                }
                Op::Slice { input, axis, start } => {
                    let t = self.value(*input);
                    let (m, n) = rc(t);
                    let mut d = vec![0.0; m * n];
                    match axis {
                        Axis::Rows => d[start * n..start * n + g.len()].copy_from_slice(g.data()),
                        Axis::Cols => {
                            let w = g.cols();
                            for r in 0..m {
                                d[r * n + start..r * n + start + w].copy_from_slice(g.row_slice(r));
                            }
                        }
                    }
                    acc(&mut adj, *input, t.shape(), d);
                }
                Op::MeanRows(x) => {
                    let t = self.value(*x);
                    let m = t.rows() as f64;
                    let d = (0..t.rows())
                        .flat_map(|_| g.data().iter().map(move |v| v / m))
                        .collect();
                    acc(&mut adj, *x, t.shape(), d);
                }
                Op::Sum(x) => {
                    let t = self.value(*x);
                    acc(&mut adj, *x, t.shape(), vec![g.data()[0]; t.len()]);
                }
                Op::Softmax { input, segments } => {
                    let y = out.expect("op value");
                    let n = y.cols();
                    let mut d = vec![0.0; y.len()];
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                        let dr = &mut d[r * n..(r + 1) * n];
                        let mut off = 0;
                        for &len in segments {
                            let seg = off..off + len;
                            let dot: f64 = yr[seg.clone()].iter().zip(&gr[seg.clone()]).map(|(a, b)| a * b).sum();
                            for j in seg {
                                dr[j] = yr[j] * (gr[j] - dot);
                            }
                            off += len;
                        }
                    }
                    acc(&mut adj, *input, y.shape(), d);
                }
                Op::Sparsemax(x) => {
                    let y = out.expect("op value");
                    let n = y.cols();
                    let mut d = vec![0.0; y.len()];
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                        let support: Vec<usize> = (0..n).filter(|&j| yr[j] > 0.0).collect();
                        let mean = support.iter().map(|&j| gr[j]).sum::<f64>() / support.len() as f64;
                        for &j in &support {
                            d[r * n + j] = gr[j] - mean;
                        }
                    }
                    acc(&mut adj, *x, y.shape(), d);
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let n = t.cols();
                    let mut d = vec![0.0; t.len()];
                    for (r, &i) in ids.iter().enumerate() {
                        for (dst, v) in d[i * n..(i + 1) * n].iter_mut().zip(g.row_slice(r)) {
                            *dst += v;
                        }
                    }
                    acc(&mut adj, *table, t.shape(), d);
                }
                Op::LayerNorm {
                    input,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    let n = g.cols();
                    let gamma = self.value(*gain).data();
                    if self.needs(*gain) || self.needs(*bias) {
                        let mut dg = vec![0.0; n];
                        let mut db = vec![0.0; n];
                        for r in 0..g.rows() {
                            for j in 0..n {
                                dg[j] += g.at(r, j) * normalized.at(r, j);
                                db[j] += g.at(r, j);
                            }
                        }
                        if self.needs(*gain) {
                            acc(&mut adj, *gain, self.value(*gain).shape(), dg);
                        }
                        if self.needs(*bias) {
                            acc(&mut adj, *bias, self.value(*bias).shape(), db);
                        }
                    }
                    if self.needs(*input) {
                        let mut d = vec![0.0; g.len()];
                        for r in 0..g.rows() {
                            let xhat = normalized.row_slice(r);
                            let dxhat: Vec<f64> = g.row_slice(r).iter().zip(gamma).map(|(a, b)| a * b).collect();
                            let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                            let mean_dx = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                            for j in 0..n {
                                d[r * n + j] = inv_std[r] * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                            }
                        }
                        acc(&mut adj, *input, g.shape(), d);
                    }
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let s = g.data()[0];
                    let n = probs.cols();
                    let mut d: Vec<f64> = probs.data().iter().map(|p| p * s).collect();
                    for (r, &y) in targets.iter().enumerate() {
                        d[r * n + y] -= s;
                    }
                    acc(&mut adj, *logits, probs.shape(), d);
                }
            }
        }
        Ok(())
    }
}

fn acc(adj: &mut [Option<Tensor>], v: Var, shape: &[usize], data: Vec<f64>) {
    match &mut adj[v.0] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(&data) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), data).expect("adjoint shape"));
        }
    }
}

/// Numerically stable in-place softmax.
pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    xs.iter_mut().for_each(|x| *x /= total);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(entries: &[(&str, Tensor)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, t) in entries {
            s.add(*n, t.clone()).unwrap();
        }
        s
    }

    #[test]
    fn identity_matmul() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let i = g.constant(Tensor::identity(2));
        let m = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let y = g.matmul(i, m).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn selector_row_matmul() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let a = g.constant(Tensor::row(vec![1.0, 0.0]).unwrap());
        let b = g.constant(Tensor::matrix(2, 1, vec![2.0, 5.0]).unwrap());
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[2.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { op: "matmul", .. }));
    }

    #[test]
    fn elementwise_values() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::row(vec![0.0, -3.5, 2.0]).unwrap());
        let t = g.tanh(x).unwrap();
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(t).data()[0], 0.0);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::row(vec![1.0, 0.0]).unwrap());
        assert!(matches!(g.log(x), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn exp_overflow_is_reported() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::row(vec![1000.0]).unwrap());
        assert!(matches!(g.exp(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn concat_columns_and_identity() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let a = g.constant(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let c = g.concat(&[a, b], Axis::Cols).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(g.concat(&[a], Axis::Cols).unwrap(), a);
        assert!(matches!(g.concat(&[], Axis::Rows), Err(Error::Argument(_))));
    }

    #[test]
    fn fan_out_sums_adjoints() {
        let s = store(&[("x", Tensor::row(vec![1.5, -2.0]).unwrap())]);
        let mut g = Graph::new(&s);
        let x = g.param(s.id("x").unwrap());
        let y = g.add(x, x).unwrap();
        let l = g.sum(y).unwrap();
        let mut grads = GradStore::new(&s);
        g.backward(l, &mut grads).unwrap();
        assert_eq!(grads.get(s.id("x").unwrap()).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let s = store(&[("x", Tensor::row(vec![3.0]).unwrap())]);
        let mut g = Graph::new(&s);
        let x = g.param(s.id("x").unwrap());
        let y = g.mul(x, x).unwrap();
        let l = g.sum(y).unwrap();
        let mut grads = GradStore::new(&s);
        g.backward(l, &mut grads).unwrap();
        g.backward(l, &mut grads).unwrap();
        assert_eq!(grads.get(s.id("x").unwrap()).unwrap().data(), &[12.0]);
        grads.zero();
        assert!(grads.get(s.id("x").unwrap()).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let s = store(&[("x", Tensor::row(vec![1.0, 2.0]).unwrap())]);
        let mut g = Graph::new(&s);
        let x = g.param(s.id("x").unwrap());
        let y = g.tanh(x).unwrap();
        let mut grads = GradStore::new(&s);
        assert!(matches!(g.backward(y, &mut grads), Err(Error::Argument(_))));
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 4.0, -3.0], vec![0.5, 0.1, 0.2, 0.9]]).unwrap());
        let gain = g.constant(Tensor::full(&[1, 4], 1.0));
        let bias = g.constant(Tensor::zeros(&[1, 4]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        for row in g.value(y).to_rows() {
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }
}
