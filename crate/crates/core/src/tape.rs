//! Matrix-valued reverse-mode gradient tape.
//!
//! Every primitive records its inputs and caches its forward value as it
//! is pushed, so the tape is always in topological order. `backward`
//! walks it once in reverse. Nodes that do not depend on any parameter
//! are skipped during the reverse sweep.
//!
//! ```
//! use scan_core::linalg::Matrix;
//! use scan_core::tape::Tape;
//!
//! let mut tape = Tape::new();
//! let p = tape.param(Matrix::scalar(3.0));
//! let sq = tape.mul(p, p).unwrap();
//! let grads = tape.backward(sq).unwrap();
//! assert_eq!(grads.param(0).data(), &[6.0]);
//! ```

use crate::error::{Result, ScanError};
use crate::linalg::{dot, norm2, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Gather(Var, Vec<usize>),
    SliceRows(Var, usize),
    StackRows(Vec<Var>),
    NormalizeRows(Var, f64),
    NormalizeCols(Var, f64),
    SoftmaxRows(Var, f64),
    RowDot(Var, Var),
    Mean(Var),
    Sum(Var),
    Max(Var, usize),
    MaxRows(Var, Vec<usize>),
    LogSumExp(Var, f64),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Records a computation over [`Matrix`] values.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
    params: Vec<Var>,
}

impl Gradients {
    /// Adjoint of any node; zeros when the node did not influence the output.
    pub fn get(&self, v: Var) -> Matrix {
        match self.adjoints.get(v.0).and_then(Option::as_ref) {
            Some(m) => m.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    /// Adjoint of the `slot`-th registered parameter.
    pub fn param(&self, slot: usize) -> Matrix {
        self.get(self.params[slot])
    }

    /// All parameter adjoints in registration order.
    pub fn params(&self) -> Vec<Matrix> {
        self.params.iter().map(|&v| self.get(v)).collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn first_argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn normalize_rows(m: &Matrix, eps: f64) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let d = norm2(m.row(r)).max(eps);
        for v in out.row_mut(r) {
            *v /= d;
        }
    }
    out
}

pub(crate) fn softmax_rows(m: &Matrix, lambda: f64) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let row = out.row_mut(r);
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (lambda * (*v - mx)).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

pub(crate) fn log_sum_exp(xs: &[f64], lambda: f64) -> f64 {
    let mx = xs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let s: f64 = xs.iter().map(|&x| (lambda * (x - mx)).exp()).sum();
    mx + s.ln() / lambda
}

/// Gradient of `y = x / max(‖x‖, eps)` for one vector.
fn normalize_backward(x: &[f64], y: &[f64], g: &[f64], eps: f64, out: &mut [f64]) {
    let n = norm2(x);
    if n > eps {
        let yg = dot(y, g);
        for ((o, &gi), &yi) in out.iter_mut().zip(g).zip(y) {
            *o += (gi - yi * yg) / n;
        }
    } else {
        for (o, &gi) in out.iter_mut().zip(g) {
            *o += gi / eps;
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Registers a trainable leaf; its slot is the registration order.
    pub fn param(&mut self, value: Matrix) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push(v);
        v
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose adjoint is tracked but which is not a parameter slot.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_bt(self.value(b))?;
        Ok(self.push_op(v, Op::MatMulBt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push_op(v, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push_op(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push_op(v, Op::Sub(a, b), &[a, b]))
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.value(a).add_row(self.value(row))?;
        Ok(self.push_op(v, Op::AddRow(a, row), &[a, row]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push_op(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push_op(v, Op::Scale(a, c), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push_op(v, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push_op(v, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push_op(v, Op::Relu(a), &[a])
    }

    /// Row lookup: output row `i` is row `idx[i]` of `table`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(ScanError::Vocabulary {
                index: bad,
                size: t.rows(),
            });
        }
        let v = t.select_rows(idx);
        Ok(self.push_op(v, Op::Gather(table, idx.to_vec()), &[table]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let m = self.value(a);
        if start + len > m.rows() {
            return Err(ScanError::dim(format!(
                "slice_rows {start}..{} of {} rows",
                start + len,
                m.rows()
            )));
        }
        let v = m.slice_rows(start, len);
        Ok(self.push_op(v, Op::SliceRows(a, start), &[a]))
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::stack_rows(&mats)?;
        Ok(self.push_op(v, Op::StackRows(parts.to_vec()), parts))
    }

    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let v = normalize_rows(self.value(a), eps);
        self.push_op(v, Op::NormalizeRows(a, eps), &[a])
    }

    pub fn normalize_cols(&mut self, a: Var, eps: f64) -> Var {
        let v = normalize_rows(&self.value(a).transpose(), eps).transpose();
        self.push_op(v, Op::NormalizeCols(a, eps), &[a])
    }

    /// Row-wise softmax of `lambda * a`.
    pub fn softmax_rows(&mut self, a: Var, lambda: f64) -> Var {
        let v = softmax_rows(self.value(a), lambda);
        self.push_op(v, Op::SoftmaxRows(a, lambda), &[a])
    }

    /// Per-row inner products, shaped `rows × 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, mb) = (self.value(a), self.value(b));
        if ma.shape() != mb.shape() {
            return Err(ScanError::dim(format!(
                "row_dot {:?} vs {:?}",
                ma.shape(),
                mb.shape()
            )));
        }
        let vals = (0..ma.rows()).map(|r| dot(ma.row(r), mb.row(r))).collect();
        let v = Matrix::from_vec(ma.rows(), 1, vals)?;
        Ok(self.push_op(v, Op::RowDot(a, b), &[a, b]))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Matrix::scalar(m.sum() / m.data().len() as f64);
        self.push_op(v, Op::Mean(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        self.push_op(v, Op::Sum(a), &[a])
    }

    /// Maximum over all entries; the gradient goes to the first maximizer.
    pub fn max(&mut self, a: Var) -> Var {
        let at = first_argmax(self.value(a).data());
        let v = Matrix::scalar(self.value(a).data()[at]);
        self.push_op(v, Op::Max(a, at), &[a])
    }

    /// Per-row maximum, shaped `rows × 1`.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let arg: Vec<usize> = (0..m.rows()).map(|r| first_argmax(m.row(r))).collect();
        let vals: Vec<f64> = arg.iter().enumerate().map(|(r, &c)| m.get(r, c)).collect();
        let v = Matrix::from_vec(m.rows(), 1, vals).expect("shape by construction");
        self.push_op(v, Op::MaxRows(a, arg), &[a])
    }

    /// `(1/λ) log Σ exp(λ x)` over all entries.
    pub fn log_sum_exp(&mut self, a: Var, lambda: f64) -> Var {
        let v = Matrix::scalar(log_sum_exp(self.value(a).data(), lambda));
        self.push_op(v, Op::LogSumExp(a, lambda), &[a])
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self.node_checked(loss)?;
        if node.value.shape() != (1, 1) {
            return Err(ScanError::dim(format!(
                "backward needs a scalar output, got {:?}",
                node.value.shape()
            )));
        }
        self.backward_from(&[(loss, Matrix::scalar(1.0))])
    }

    /// Vector-Jacobian product: seeds the given nodes with the given
    /// adjoints and propagates them to every leaf.
    pub fn backward_from(&self, seeds: &[(Var, Matrix)]) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(ScanError::State("backward on an empty tape".into()));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (v, g) in seeds {
            let node = self.node_checked(*v)?;
            if node.value.shape() != g.shape() {
                return Err(ScanError::dim(format!(
                    "seed {:?} for node of shape {:?}",
                    g.shape(),
                    node.value.shape()
                )));
            }
            accumulate(&mut adj[v.0], g.clone());
            top = top.max(v.0);
        }
        for i in (0..=top).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj)?;
            adj[i] = Some(g);
        }
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            params: self.params.clone(),
        })
    }

    fn node_checked(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or_else(|| {
            ScanError::State(format!(
                "node {} has not been recorded on this tape ({} nodes)",
                v.0,
                self.nodes.len()
            ))
        })
    }

    fn send(&self, adj: &mut [Option<Matrix>], to: Var, g: Matrix) {
        if self.nodes[to.0].needs_grad {
            accumulate(&mut adj[to.0], g);
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &Matrix, adj: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.send(adj, *a, g.matmul_bt(self.value(*b))?);
                }
                if self.wants(*b) {
                    self.send(adj, *b, self.value(*a).transpose().matmul(g)?);
                }
            }
            Op::MatMulBt(a, b) => {
                if self.wants(*a) {
                    self.send(adj, *a, g.matmul(self.value(*b))?);
                }
                if self.wants(*b) {
                    self.send(adj, *b, g.transpose().matmul(self.value(*a))?);
                }
            }
            Op::Transpose(a) => self.send(adj, *a, g.transpose()),
            Op::Add(a, b) => {
                self.send(adj, *a, g.clone());
                self.send(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.send(adj, *a, g.clone());
                self.send(adj, *b, g.scale(-1.0));
            }
            Op::AddRow(a, row) => {
                self.send(adj, *a, g.clone());
                if self.wants(*row) {
                    let mut acc = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in acc.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.send(adj, *row, acc);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.send(adj, *a, g.hadamard(self.value(*b))?);
                }
                if self.wants(*b) {
                    self.send(adj, *b, g.hadamard(self.value(*a))?);
                }
            }
            Op::Scale(a, c) => self.send(adj, *a, g.scale(*c)),
            Op::Sigmoid(a) => self.send(adj, *a, g.zip_map(y, |g, s| g * s * (1.0 - s))?),
            Op::Tanh(a) => self.send(adj, *a, g.zip_map(y, |g, t| g * (1.0 - t * t))?),
            Op::Relu(a) => {
                let x = self.value(*a);
                self.send(adj, *a, g.zip_map(x, |g, x| if x > 0.0 { g } else { 0.0 })?)
            }
            Op::Gather(table, idx) => {
                let t = self.value(*table);
                let mut acc = Matrix::zeros(t.rows(), t.cols());
                for (r, &src) in idx.iter().enumerate() {
                    for (o, v) in acc.row_mut(src).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                self.send(adj, *table, acc);
            }
            Op::SliceRows(a, start) => {
                let x = self.value(*a);
                let mut acc = Matrix::zeros(x.rows(), x.cols());
                for r in 0..g.rows() {
                    acc.row_mut(start + r).copy_from_slice(g.row(r));
                }
                self.send(adj, *a, acc);
            }
            Op::StackRows(parts) => {
                let mut at = 0;
                for p in parts {
                    let n = self.value(*p).rows();
                    if self.wants(*p) {
                        self.send(adj, *p, g.slice_rows(at, n));
                    }
                    at += n;
                }
            }
            Op::NormalizeRows(a, eps) => {
                let x = self.value(*a);
                let mut acc = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    normalize_backward(x.row(r), y.row(r), g.row(r), *eps, acc.row_mut(r));
                }
                self.send(adj, *a, acc);
            }
            Op::NormalizeCols(a, eps) => {
                let (xt, yt, gt) = (self.value(*a).transpose(), y.transpose(), g.transpose());
                let mut acc = Matrix::zeros(xt.rows(), xt.cols());
                for r in 0..xt.rows() {
                    normalize_backward(xt.row(r), yt.row(r), gt.row(r), *eps, acc.row_mut(r));
                }
                self.send(adj, *a, acc.transpose());
            }
            Op::SoftmaxRows(a, lambda) => {
                let mut acc = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yg = dot(y.row(r), g.row(r));
                    for ((o, &yi), &gi) in acc.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                        *o = lambda * yi * (gi - yg);
                    }
                }
                self.send(adj, *a, acc);
            }
            Op::RowDot(a, b) => {
                let (ma, mb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut da = mb.clone();
                    for r in 0..da.rows() {
                        let s = g.get(r, 0);
                        da.row_mut(r).iter_mut().for_each(|v| *v *= s);
                    }
                    self.send(adj, *a, da);
                }
                if self.wants(*b) {
                    let mut db = ma.clone();
                    for r in 0..db.rows() {
                        let s = g.get(r, 0);
                        db.row_mut(r).iter_mut().for_each(|v| *v *= s);
                    }
                    self.send(adj, *b, db);
                }
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let n = x.data().len() as f64;
                self.send(adj, *a, Matrix::filled(x.rows(), x.cols(), g.data()[0] / n));
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                self.send(adj, *a, Matrix::filled(x.rows(), x.cols(), g.data()[0]));
            }
            Op::Max(a, at) => {
                let x = self.value(*a);
                let mut acc = Matrix::zeros(x.rows(), x.cols());
                acc.data_mut()[*at] = g.data()[0];
                self.send(adj, *a, acc);
            }
            Op::MaxRows(a, arg) => {
                let x = self.value(*a);
                let mut acc = Matrix::zeros(x.rows(), x.cols());
                for (r, &c) in arg.iter().enumerate() {
                    acc.set(r, c, g.get(r, 0));
                }
                self.send(adj, *a, acc);
            }
            Op::LogSumExp(a, lambda) => {
                let x = self.value(*a);
                let w = softmax_rows(&Matrix::row_vector(x.data())?, *lambda);
                let gs = g.data()[0];
                let vals = w.data().iter().map(|v| v * gs).collect();
                self.send(adj, *a, Matrix::from_vec(x.rows(), x.cols(), vals)?);
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Five-point central differences of a scalar-valued graph builder
    /// w.r.t. one input. Truncation error is O(h^4), so a wide step keeps
    /// rounding noise far below the tolerance.
    fn check_unary(build: impl Fn(&mut Tape, Var) -> Var, x0: Matrix) {
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let y = build(&mut tape, x);
        let analytic = tape.backward(y).unwrap().param(0);
        let h = 1e-3;
        for i in 0..x0.data().len() {
            let eval = |delta: f64| {
                let mut xm = x0.clone();
                xm.data_mut()[i] += delta;
                let mut t = Tape::new();
                let x = t.param(xm);
                let y = build(&mut t, x);
                t.scalar(y)
            };
            let fd = (8.0 * (eval(h) - eval(-h)) - (eval(2.0 * h) - eval(-2.0 * h))) / (12.0 * h);
            let a = analytic.data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            assert!(rel <= 1e-6, "entry {i}: analytic {a} vs fd {fd} (rel {rel})");
        }
    }

    /// Projects any output to a scalar with fixed random weights.
    fn probe(t: &mut Tape, y: Var, seed: u64) -> Var {
        let (r, c) = t.value(y).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = t.constant(random(&mut rng, r, c));
        let p = t.mul(y, w).unwrap();
        t.sum(p)
    }

    #[test]
    fn identity_and_square() {
        let mut tape = Tape::new();
        let p = tape.param(Matrix::scalar(5.0));
        assert_eq!(tape.backward(p).unwrap().param(0).data(), &[1.0]);

        let mut tape = Tape::new();
        let p = tape.param(Matrix::scalar(3.0));
        let sq = tape.mul(p, p).unwrap();
        assert_eq!(tape.backward(sq).unwrap().param(0).data(), &[6.0]);
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        assert!(matches!(tape.backward(Var(0)), Err(ScanError::State(_))));
        let mut tape = Tape::new();
        let p = tape.param(Matrix::zeros(2, 2));
        assert!(matches!(tape.backward(p), Err(ScanError::Dimension(_))));
        assert!(matches!(tape.backward(Var(7)), Err(ScanError::State(_))));
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = random(&mut rng, 3, 4);
        let run = || {
            let mut t = Tape::new();
            let x = t.param(x0.clone());
            let y = t.softmax_rows(x, 3.0);
            let s = probe(&mut t, y, 5);
            t.backward(s).unwrap().param(0)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x0 = random(&mut rng, 3, 4);
        let other = random(&mut rng, 4, 2);
        let other_bt = random(&mut rng, 5, 4);
        let same = random(&mut rng, 3, 4);
        let row = random(&mut rng, 1, 4);

        check_unary(|t, x| { let o = t.constant(other.clone()); let y = t.matmul(x, o).unwrap(); probe(t, y, 1) }, x0.clone());
        check_unary(|t, x| { let o = t.constant(other.clone()); let y = t.matmul(o, x).unwrap(); probe(t, y, 1) }, random(&mut rng, 2, 3));
        check_unary(|t, x| { let o = t.constant(other_bt.clone()); let y = t.matmul_bt(x, o).unwrap(); probe(t, y, 2) }, x0.clone());
        check_unary(|t, x| { let o = t.constant(other_bt.clone()); let y = t.matmul_bt(o, x).unwrap(); probe(t, y, 2) }, x0.clone());
        check_unary(|t, x| { let y = t.transpose(x); probe(t, y, 3) }, x0.clone());
        check_unary(|t, x| { let o = t.constant(same.clone()); let y = t.add(x, o).unwrap(); probe(t, y, 4) }, x0.clone());
        check_unary(|t, x| { let o = t.constant(same.clone()); let y = t.sub(o, x).unwrap(); probe(t, y, 4) }, x0.clone());
        check_unary(|t, x| { let r = t.constant(row.clone()); let y = t.add_row(x, r).unwrap(); probe(t, y, 5) }, x0.clone());
        check_unary(|t, r| { let x = t.constant(same.clone()); let y = t.add_row(x, r).unwrap(); probe(t, y, 5) }, row.clone());
        check_unary(|t, x| { let o = t.constant(same.clone()); let y = t.mul(x, o).unwrap(); probe(t, y, 6) }, x0.clone());
        check_unary(|t, x| { let y = t.scale(x, -2.5); probe(t, y, 7) }, x0.clone());
        check_unary(|t, x| { let y = t.sigmoid(x); probe(t, y, 8) }, x0.clone());
        check_unary(|t, x| { let y = t.tanh(x); probe(t, y, 9) }, x0.clone());
        check_unary(|t, x| { let y = t.relu(x); probe(t, y, 10) }, x0.clone());
        check_unary(|t, x| { let y = t.gather(x, &[2, 0, 2, 1]).unwrap(); probe(t, y, 11) }, x0.clone());
        check_unary(|t, x| { let y = t.slice_rows(x, 1, 2).unwrap(); probe(t, y, 12) }, x0.clone());
        check_unary(|t, x| {
            let a = t.slice_rows(x, 2, 1).unwrap();
            let y = t.stack_rows(&[a, x, a]).unwrap();
            probe(t, y, 13)
        }, x0.clone());
        check_unary(|t, x| { let y = t.normalize_rows(x, 1e-8); probe(t, y, 14) }, x0.clone());
        check_unary(|t, x| { let y = t.normalize_cols(x, 1e-8); probe(t, y, 15) }, x0.clone());
        check_unary(|t, x| { let y = t.softmax_rows(x, 4.0); probe(t, y, 16) }, x0.clone());
        check_unary(|t, x| { let o = t.constant(same.clone()); let y = t.row_dot(x, o).unwrap(); probe(t, y, 17) }, x0.clone());
        check_unary(|t, x| { let y = t.row_dot(x, x).unwrap(); probe(t, y, 17) }, x0.clone());
        check_unary(|t, x| t.mean(x), x0.clone());
        check_unary(|t, x| t.sum(x), x0.clone());
        check_unary(|t, x| t.max(x), x0.clone());
        check_unary(|t, x| { let y = t.max_rows(x); probe(t, y, 18) }, x0.clone());
        check_unary(|t, x| t.log_sum_exp(x, 6.0), x0.clone());
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let mut t = Tape::new();
        let x = t.param(Matrix::zeros(3, 2));
        assert!(matches!(t.gather(x, &[3]), Err(ScanError::Vocabulary { index: 3, size: 3 })));
    }

    #[test]
    fn constants_get_no_adjoint_work() {
        let mut t = Tape::new();
        let c = t.constant(Matrix::scalar(2.0));
        let p = t.param(Matrix::scalar(3.0));
        let y = t.mul(c, p).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.param(0).data(), &[2.0]);
        assert_eq!(g.get(c).data(), &[0.0]);
    }
}
