use std::ops::Range;

use super::{kernels, Result, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction direction for `sum` and `mean`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Collapse rows: `r x c -> 1 x c`.
    Rows,
    /// Collapse columns: `r x c -> r x 1`.
    Cols,
    /// Collapse everything to `1 x 1`.
    All,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, rows: Range<usize>, cols: Range<usize> },
    Sum(Var, Axis),
    Mean(Var, Axis),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Softmax(Var),
    L2Norm(Var),
    SquaredError(Var, Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::SquaredError(a, b) => {
                vec![*a, *b]
            }
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Slice { input, .. }
            | Op::Sum(input, _)
            | Op::Mean(input, _)
            | Op::Exp(input)
            | Op::Log(input)
            | Op::Tanh(input)
            | Op::Sigmoid(input)
            | Op::Softplus(input)
            | Op::Softmax(input)
            | Op::L2Norm(input) => vec![*input],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    rows: usize,
    cols: usize,
    op: Op,
    needs_grad: bool,
}

/// Append-only computation record.
///
/// Values are stored as 2-D matrices; a rank-1 leaf is treated as a single row.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every `requires_grad` leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient data, or zeros if the leaf did not influence the output.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Vec<f64> {
        self.get(v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; like.len()])
    }
}

fn broadcast_dims(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(TensorError::Shape { op, detail: format!("cannot broadcast {a:?} with {b:?}") }),
    }
}

#[inline]
fn bidx(rows: usize, cols: usize, i: usize, j: usize) -> usize {
    let ii = if rows == 1 { 0 } else { i };
    let jj = if cols == 1 { 0 } else { j };
    ii * cols + jj
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

    /// Registers a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        let (rows, cols) = t.dims2()?;
        let needs_grad = t.requires_grad();
        let t = if t.shape().len() == 1 { Tensor { shape: vec![rows, cols], ..t } } else { t };
        self.nodes.push(Node { value: t, rows, cols, op: Op::Leaf, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers a trainable leaf regardless of the tensor's flag.
    pub fn param(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf(t.clone().with_grad())
    }

    /// Registers a non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        let mut t = t;
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        self.constant(Tensor::scalar(value)?)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Value of a `1 x 1` node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, op_name: &'static str, op: Op, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        let value = Tensor { shape: vec![rows, cols], data, requires_grad: false };
        self.nodes.push(Node { value, rows, cols, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Vec<f64>)> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        let (r, c) = broadcast_dims(name, (ra, ca), (rb, cb))?;
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = Vec::with_capacity(r * c);
        if (ra, ca) == (rb, cb) {
            out.extend(av.iter().zip(bv).map(|(x, y)| f(*x, *y)));
        } else {
            for i in 0..r {
                for j in 0..c {
                    out.push(f(av[bidx(ra, ca, i, j)], bv[bidx(rb, cb, i, j)]));
                }
            }
        }
        Ok((r, c, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c, d) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", Op::Add(a, b), r, c, d)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c, d) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", Op::Sub(a, b), r, c, d)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c, d) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", Op::Mul(a, b), r, c, d)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c, d) = self.binary("div", a, b, |x, y| x / y)?;
        self.push("div", Op::Div(a, b), r, c, d)
    }

    /// `a * b` for `a: m x k`, `b: k x n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T` for `a: m x k`, `b: n x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (rb, cb) = self.dims(b);
        let (kb, n) = if trans_b { (cb, rb) } else { (rb, cb) };
        if k != kb {
            return Err(TensorError::Shape {
                op: "matmul",
                detail: format!("({m}x{k}) x ({rb}x{cb}){}", if trans_b { "^T" } else { "" }),
            });
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n, trans_b);
        self.push("matmul", Op::MatMul { a, b, trans_b }, m, n, out)
    }

    /// Concatenates along `axis` (0 stacks rows, 1 joins columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or(TensorError::Empty { op: "concat" })?;
        let (r0, c0) = self.dims(first);
        match axis {
            0 => {
                let mut data = Vec::new();
                let mut rows = 0;
                for &v in inputs {
                    let (r, c) = self.dims(v);
                    if c != c0 {
                        return Err(TensorError::Shape { op: "concat", detail: format!("column count {c} != {c0}") });
                    }
                    rows += r;
                    data.extend_from_slice(self.value(v).data());
                }
                self.push("concat", Op::Concat { inputs: inputs.to_vec(), axis }, rows, c0, data)
            }
            1 => {
                let mut cols = 0;
                for &v in inputs {
                    let (r, c) = self.dims(v);
                    if r != r0 {
                        return Err(TensorError::Shape { op: "concat", detail: format!("row count {r} != {r0}") });
                    }
                    cols += c;
                }
                let mut data = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for &v in inputs {
                        data.extend_from_slice(self.value(v).row_slice(i));
                    }
                }
                self.push("concat", Op::Concat { inputs: inputs.to_vec(), axis }, r0, cols, data)
            }
            _ => Err(TensorError::Invalid { op: "concat", detail: format!("axis {axis}") }),
        }
    }

    pub fn slice(&mut self, input: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let (r, c) = self.dims(input);
        if rows.start >= rows.end || cols.start >= cols.end || rows.end > r || cols.end > c {
            return Err(TensorError::Shape {
                op: "slice",
                detail: format!("rows {rows:?} cols {cols:?} out of {r}x{c}"),
            });
        }
        let v = self.value(input);
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for i in rows.clone() {
            data.extend_from_slice(&v.row_slice(i)[cols.clone()]);
        }
        let (nr, nc) = (rows.len(), cols.len());
        self.push("slice", Op::Slice { input, rows, cols }, nr, nc, data)
    }

    pub fn row(&mut self, input: Var, i: usize) -> Result<Var> {
        let c = self.dims(input).1;
        self.slice(input, i..i + 1, 0..c)
    }

    pub fn cols(&mut self, input: Var, cols: Range<usize>) -> Result<Var> {
        let r = self.dims(input).0;
        self.slice(input, 0..r, cols)
    }

    fn reduce(&self, input: Var, axis: Axis) -> (usize, usize, Vec<f64>) {
        let (r, c) = self.dims(input);
        let v = self.value(input).data();
        match axis {
            Axis::Rows => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for (o, x) in out.iter_mut().zip(&v[i * c..(i + 1) * c]) {
                        *o += x;
                    }
                }
                (1, c, out)
            }
            Axis::Cols => (r, 1, (0..r).map(|i| v[i * c..(i + 1) * c].iter().sum()).collect()),
            Axis::All => (1, 1, vec![v.iter().sum()]),
        }
    }

    fn reduce_count(&self, input: Var, axis: Axis) -> usize {
        let (r, c) = self.dims(input);
        match axis {
            Axis::Rows => r,
            Axis::Cols => c,
            Axis::All => r * c,
        }
    }

    pub fn sum(&mut self, input: Var, axis: Axis) -> Result<Var> {
        let (r, c, d) = self.reduce(input, axis);
        self.push("sum", Op::Sum(input, axis), r, c, d)
    }

    pub fn mean(&mut self, input: Var, axis: Axis) -> Result<Var> {
        let n = self.reduce_count(input, axis) as f64;
        let (r, c, mut d) = self.reduce(input, axis);
        d.iter_mut().for_each(|x| *x /= n);
        self.push("mean", Op::Mean(input, axis), r, c, d)
    }

    fn unary(&mut self, name: &'static str, input: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let (r, c) = self.dims(input);
        let d = self.value(input).data().iter().map(|&x| f(x)).collect();
        self.push(name, op, r, c, d)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, Op::Log(x), f64::ln)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, Op::Sigmoid(x), kernels::sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, Op::Softplus(x), kernels::softplus)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let v = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            kernels::softmax_row(&v[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        self.push("softmax", Op::Softmax(x), r, c, out)
    }

    /// Row-wise Euclidean norm: `r x c -> r x 1`.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let v = self.value(x).data();
        let out = (0..r).map(|i| v[i * c..(i + 1) * c].iter().map(|a| a * a).sum::<f64>().sqrt()).collect();
        self.push("l2_norm", Op::L2Norm(x), r, 1, out)
    }

    /// Row-wise squared Euclidean distance: `r x c, r x c -> r x 1`.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims(a);
        if (ra, ca) != self.dims(b) {
            return Err(TensorError::Shape {
                op: "squared_error",
                detail: format!("{:?} vs {:?}", (ra, ca), self.dims(b)),
            });
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out = (0..ra)
            .map(|i| (i * ca..(i + 1) * ca).map(|j| (av[j] - bv[j]).powi(2)).sum())
            .collect();
        self.push("squared_error", Op::SquaredError(a, b), ra, 1, out)
    }

    // Composites built from the primitive set.

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let s = self.scalar(c)?;
        self.mul(x, s)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let s = self.scalar(c)?;
        self.add(x, s)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let l = self.log(x)?;
        let h = self.scale(l, 0.5)?;
        self.exp(h)
    }

    /// Row-wise log-softmax via a detached max shift and log-sum-exp.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let v = self.value(x).data();
        let maxes: Vec<f64> = (0..r)
            .map(|i| v[i * c..(i + 1) * c].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let shift = self.constant(Tensor::matrix(r, 1, maxes)?)?;
        let centred = self.sub(x, shift)?;
        let e = self.exp(centred)?;
        let s = self.sum(e, Axis::Cols)?;
        let lse = self.log(s)?;
        self.sub(centred, lse)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_node = &self.nodes[output.0];
        if out_node.rows * out_node.cols != 1 {
            return Err(TensorError::NotScalar(vec![out_node.rows, out_node.cols]));
        }
        for (idx, node) in self.nodes.iter().enumerate().take(output.0 + 1) {
            if node.op.inputs().iter().any(|i| i.0 >= idx) {
                return Err(TensorError::Cycle(idx));
            }
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (&node.op, node.needs_grad, g) {
                    (Op::Leaf, true, Some(g)) => Some(Tensor {
                        shape: node.value.shape().to_vec(),
                        data: g,
                        requires_grad: false,
                    }),
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; node.rows * node.cols]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (r, c) = (node.rows, node.cols);
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accumulate_broadcast(grads, *a, r, c, |i| g[i]);
                self.accumulate_broadcast(grads, *b, r, c, |i| sign * g[i]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (da, db) = (self.dims(*a), self.dims(*b));
                self.accumulate_broadcast(grads, *a, r, c, |i| g[i] * bv[bidx(db.0, db.1, i / c, i % c)]);
                self.accumulate_broadcast(grads, *b, r, c, |i| g[i] * av[bidx(da.0, da.1, i / c, i % c)]);
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (da, db) = (self.dims(*a), self.dims(*b));
                self.accumulate_broadcast(grads, *a, r, c, |i| g[i] / bv[bidx(db.0, db.1, i / c, i % c)]);
                self.accumulate_broadcast(grads, *b, r, c, |i| {
                    let bb = bv[bidx(db.0, db.1, i / c, i % c)];
                    -g[i] * av[bidx(da.0, da.1, i / c, i % c)] / (bb * bb)
                });
            }
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.dims(*a);
                let n = c;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.nodes[a.0].needs_grad {
                    // dA = G * B^T (or G * B when B was transposed)
                    let da = kernels::matmul(g, bv, m, n, k, !trans_b);
                    self.accumulate(grads, *a, |s| s.iter_mut().zip(&da).for_each(|(x, d)| *x += d));
                }
                if self.nodes[b.0].needs_grad {
                    let db = if *trans_b {
                        kernels::matmul_tn(g, av, m, n, k)
                    } else {
                        kernels::matmul_tn(av, g, m, k, n)
                    };
                    self.accumulate(grads, *b, |s| s.iter_mut().zip(&db).for_each(|(x, d)| *x += d));
                }
            }
            Op::Concat { inputs, axis } => {
                let mut offset = 0;
                for &v in inputs {
                    let (vr, vc) = self.dims(v);
                    if *axis == 0 {
                        let start = offset * c;
                        self.accumulate(grads, v, |s| {
                            s.iter_mut().zip(&g[start..start + vr * vc]).for_each(|(x, d)| *x += d)
                        });
                        offset += vr;
                    } else {
                        let off = offset;
                        self.accumulate(grads, v, |s| {
                            for i in 0..vr {
                                for j in 0..vc {
                                    s[i * vc + j] += g[i * c + off + j];
                                }
                            }
                        });
                        offset += vc;
                    }
                }
            }
            Op::Slice { input, rows, cols } => {
                let ic = self.dims(*input).1;
                self.accumulate(grads, *input, |s| {
                    for (oi, i) in rows.clone().enumerate() {
                        for (oj, j) in cols.clone().enumerate() {
                            s[i * ic + j] += g[oi * c + oj];
                        }
                    }
                });
            }
            Op::Sum(input, axis) | Op::Mean(input, axis) => {
                let scale = if matches!(node.op, Op::Mean(..)) {
                    1.0 / self.reduce_count(*input, *axis) as f64
                } else {
                    1.0
                };
                let (ir, ic) = self.dims(*input);
                self.accumulate(grads, *input, |s| {
                    for i in 0..ir {
                        for j in 0..ic {
                            let gi = match axis {
                                Axis::Rows => j,
                                Axis::Cols => i,
                                Axis::All => 0,
                            };
                            s[i * ic + j] += g[gi] * scale;
                        }
                    }
                });
            }
            Op::Exp(x) => self.accumulate(grads, *x, |s| {
                s.iter_mut().enumerate().for_each(|(i, v)| *v += g[i] * y[i])
            }),
            Op::Log(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |s| s.iter_mut().enumerate().for_each(|(i, v)| *v += g[i] / xv[i]))
            }
            Op::Tanh(x) => self.accumulate(grads, *x, |s| {
                s.iter_mut().enumerate().for_each(|(i, v)| *v += g[i] * (1.0 - y[i] * y[i]))
            }),
            Op::Sigmoid(x) => self.accumulate(grads, *x, |s| {
                s.iter_mut().enumerate().for_each(|(i, v)| *v += g[i] * y[i] * (1.0 - y[i]))
            }),
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |s| {
                    s.iter_mut().enumerate().for_each(|(i, v)| *v += g[i] * kernels::sigmoid(xv[i]))
                })
            }
            Op::Softmax(x) => self.accumulate(grads, *x, |s| {
                for i in 0..r {
                    let row = i * c..(i + 1) * c;
                    let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                    for j in row {
                        s[j] += y[j] * (g[j] - dot);
                    }
                }
            }),
            Op::L2Norm(x) => {
                let xv = self.value(*x).data();
                let xc = self.dims(*x).1;
                self.accumulate(grads, *x, |s| {
                    for i in 0..r {
                        if y[i] > 0.0 {
                            for j in 0..xc {
                                s[i * xc + j] += g[i] * xv[i * xc + j] / y[i];
                            }
                        }
                    }
                })
            }
            Op::SquaredError(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let ac = self.dims(*a).1;
                let diff = |j: usize| 2.0 * (av[j] - bv[j]) * g[j / ac];
                self.accumulate(grads, *a, |s| s.iter_mut().enumerate().for_each(|(j, v)| *v += diff(j)));
                self.accumulate(grads, *b, |s| s.iter_mut().enumerate().for_each(|(j, v)| *v -= diff(j)));
            }
        }
    }

    /// Adds an output-shaped gradient into a possibly broadcast input.
    fn accumulate_broadcast(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        r: usize,
        c: usize,
        gi: impl Fn(usize) -> f64,
    ) {
        let (vr, vc) = self.dims(v);
        self.accumulate(grads, v, |s| {
            if (vr, vc) == (r, c) {
                s.iter_mut().enumerate().for_each(|(i, x)| *x += gi(i));
            } else {
                for i in 0..r {
                    for j in 0..c {
                        s[bidx(vr, vc, i, j)] += gi(i * c + j);
                    }
                }
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn param(g: &mut Graph, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        g.param(&Tensor::matrix(rows, cols, data).unwrap()).unwrap()
    }

    #[test]
    fn square_has_gradient_six_at_three() {
        let mut g = Graph::new();
        let x = param(&mut g, 1, 1, vec![3.0]);
        let y = g.mul(x, x).unwrap();
        let gr = g.backward(y).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn shared_leaf_accumulates() {
        let mut g = Graph::new();
        let x = param(&mut g, 1, 1, vec![1.5]);
        let y = g.add(x, x).unwrap();
        assert_eq!(g.backward(y).unwrap().get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn softmax_first_component_gradient() {
        let mut g = Graph::new();
        let x = param(&mut g, 1, 2, vec![0.0, 0.0]);
        let p = g.softmax(x).unwrap();
        let p0 = g.slice(p, 0..1, 0..1).unwrap();
        let gr = g.backward(p0).unwrap();
        let d = gr.get(x).unwrap().data();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(2.0).unwrap()).unwrap();
        let x = param(&mut g, 1, 1, vec![1.0]);
        let y = g.mul(c, x).unwrap();
        let gr = g.backward(y).unwrap();
        assert!(gr.get(c).is_none());
        assert_eq!(gr.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = param(&mut g, 1, 2, vec![1.0, 2.0]);
        assert_eq!(g.backward(x).unwrap_err(), TensorError::NotScalar(vec![1, 2]));
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0).unwrap()).unwrap();
        assert_eq!(g.log(x).unwrap_err(), TensorError::NonFinite { op: "log" });
        let big = g.constant(Tensor::scalar(1e3).unwrap()).unwrap();
        assert_eq!(g.exp(big).unwrap_err(), TensorError::NonFinite { op: "exp" });
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut g = Graph::new();
            let va = g.constant(Tensor::matrix(8, 8, a.clone()).unwrap()).unwrap();
            let vb = g.constant(Tensor::matrix(8, 8, b.clone()).unwrap()).unwrap();
            let ab = g.matmul(va, vb).unwrap();
            let abt = g.matmul_nt(va, vb).unwrap();
            for i in 0..8 {
                for j in 0..8 {
                    let mut s = 0.0;
                    let mut st = 0.0;
                    for k in 0..8 {
                        s += a[i * 8 + k] * b[k * 8 + j];
                        st += a[i * 8 + k] * b[j * 8 + k];
                    }
                    assert!((g.value(ab).at(i, j) - s).abs() < 1e-10);
                    assert!((g.value(abt).at(i, j) - st).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn broadcasting_row_and_column() {
        let mut g = Graph::new();
        let m = param(&mut g, 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = param(&mut g, 1, 3, vec![10.0, 20.0, 30.0]);
        let c = param(&mut g, 2, 1, vec![2.0, 3.0]);
        let s = g.add(m, r).unwrap();
        let p = g.mul(s, c).unwrap();
        assert_eq!(g.value(p).data(), &[22.0, 44.0, 66.0, 42.0, 75.0, 108.0]);
        let tot = g.sum(p, Axis::All).unwrap();
        let gr = g.backward(tot).unwrap();
        assert_eq!(gr.get(r).unwrap().data(), &[5.0, 5.0, 5.0]);
        assert_eq!(gr.get(c).unwrap().data(), &[66.0, 75.0]);
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let mut g = Graph::new();
        let x = param(&mut g, 2, 2, vec![0.3, -0.2, 0.9, 1.1]);
        let w = param(&mut g, 2, 2, vec![0.5, -1.0, 0.25, 0.75]);
        let h = g.matmul(x, w).unwrap();
        let t = g.tanh(h).unwrap();
        let s = g.softmax(t).unwrap();
        let l = g.log(s).unwrap();
        let out = g.mean(l, Axis::All).unwrap();
        let a = g.backward(out).unwrap();
        let b = g.backward(out).unwrap();
        assert_eq!(a.get(w).unwrap().data(), b.get(w).unwrap().data());
        assert_eq!(a.get(x).unwrap().data(), b.get(x).unwrap().data());
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap()).unwrap();
        let a = g.log_softmax(x).unwrap();
        let s = g.softmax(x).unwrap();
        let b = g.log(s).unwrap();
        for (p, q) in g.value(a).data().iter().zip(g.value(b).data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
