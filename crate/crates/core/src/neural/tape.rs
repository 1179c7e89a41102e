//! Reverse-mode differentiation over a recorded tape of 2-D array ops.

use std::sync::Arc;

use super::{NeuralError, Tensor};
use crate::feature_line::nearest_indices;
use crate::mesh::Vec3;
use crate::sparse::CsrMatrix;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Square(usize),
    SparseMul(Arc<CsrMatrix>, usize),
    ConcatCols(usize, usize),
    Rows(usize, usize),
    Sum(usize),
    Mean(usize),
    /// Scalar loss whose local gradient was fixed during the forward pass.
    Fused(usize, Tensor),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// `c = a * b (+ c if accumulate)` for row-major `a: m x k`, `b: k x n`;
/// `ta` / `tb` read the stored operand transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], accumulate: bool) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above describe exactly the m*k, k*n and m*n
    // row-major buffers, whose lengths are checked by the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
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

fn shape_err(what: &str, a: &Tensor, b: &Tensor) -> NeuralError {
    NeuralError::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape()))
}

fn rows_as_points(t: &Tensor) -> Vec<Vec3> {
    t.data().chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => value.requires_grad(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::ConcatCols(a, b) => {
                self.nodes[*a].needs_grad || self.nodes[*b].needs_grad
            }
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Square(a)
            | Op::SparseMul(_, a)
            | Op::Rows(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Fused(a, _) => self.nodes[*a].needs_grad,
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it receives a gradient iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad(false))
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn check_2d(&self, v: Var, what: &str) -> Result<(usize, usize), NeuralError> {
        let t = self.val(v);
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(NeuralError::Shape(format!("{what} expects a matrix, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        let (m, k) = self.check_2d(a, "matmul")?;
        let (k2, n) = self.check_2d(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.val(a), self.val(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.val(a).data(), false, self.val(b).data(), false, &mut out, false);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a.0, b.0)))
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var, NeuralError> {
        let (ta, tb) = (self.val(a), self.val(b));
        if !ta.same_shape(tb) {
            return Err(shape_err(what, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// Adds `bias` (length = columns of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, NeuralError> {
        let (m, n) = self.check_2d(a, "add_row")?;
        if self.val(bias).len() != n {
            return Err(shape_err("add_row", self.val(a), self.val(bias)));
        }
        let b = self.val(bias).data();
        let data = self.val(a).data().chunks(n).flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y)).collect();
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::AddRow(a.0, bias.0)))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.val(a);
        let data = t.data().iter().map(|x| f(*x)).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(t, op)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a.0, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a.0))
    }

    /// Left-multiplies by a constant sparse matrix.
    pub fn sparse_mul(&mut self, s: Arc<CsrMatrix>, a: Var) -> Result<Var, NeuralError> {
        let (m, n) = self.check_2d(a, "sparse_mul")?;
        if s.cols() != m {
            return Err(NeuralError::Shape(format!("sparse {}x{} times {:?}", s.rows(), s.cols(), self.val(a).shape())));
        }
        let src = self.val(a).data();
        let mut out = vec![0.0; s.rows() * n];
        for r in 0..s.rows() {
            let dst = &mut out[r * n..(r + 1) * n];
            for (c, w) in s.row(r) {
                for (d, x) in dst.iter_mut().zip(&src[c * n..(c + 1) * n]) {
                    *d += w * x;
                }
            }
        }
        let rows = s.rows();
        Ok(self.push(Tensor::matrix(rows, n, out)?, Op::SparseMul(s, a.0)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        let (m, na) = self.check_2d(a, "concat_cols")?;
        let (m2, nb) = self.check_2d(b, "concat_cols")?;
        if m != m2 {
            return Err(shape_err("concat_cols", self.val(a), self.val(b)));
        }
        let (da, db) = (self.val(a).data(), self.val(b).data());
        let mut data = Vec::with_capacity(m * (na + nb));
        for r in 0..m {
            data.extend_from_slice(&da[r * na..(r + 1) * na]);
            data.extend_from_slice(&db[r * nb..(r + 1) * nb]);
        }
        Ok(self.push(Tensor::matrix(m, na + nb, data)?, Op::ConcatCols(a.0, b.0)))
    }

    /// Rows `start..end` of a matrix.
    pub fn rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NeuralError> {
        let (m, n) = self.check_2d(a, "rows")?;
        if start >= end || end > m {
            return Err(NeuralError::Shape(format!("row range {start}..{end} of {m}")));
        }
        let data = self.val(a).data()[start * n..end * n].to_vec();
        Ok(self.push(Tensor::matrix(end - start, n, data)?, Op::Rows(a.0, start)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a.0))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var, NeuralError> {
        let t = self.val(logits);
        if t.len() != targets.len() {
            return Err(NeuralError::Shape(format!("{} logits, {} targets", t.len(), targets.len())));
        }
        let n = t.len() as f64;
        let mut loss = 0.0;
        let mut grad = Vec::with_capacity(t.len());
        for (&x, &y) in t.data().iter().zip(targets) {
            loss += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
            grad.push((sigmoid(x) - y) / n);
        }
        let local = Tensor::new(t.shape().to_vec(), grad)?;
        Ok(self.push(Tensor::scalar(loss / n), Op::Fused(logits.0, local)))
    }

    /// Symmetric mean squared nearest-neighbour distance between the rows of
    /// an `n x 3` matrix and a fixed point set. Neighbour assignments are
    /// frozen at the current values.
    pub fn line_loss(&mut self, pred: Var, target: &[Vec3]) -> Result<Var, NeuralError> {
        let (n, c) = self.check_2d(pred, "line_loss")?;
        if c != 3 || target.is_empty() {
            return Err(NeuralError::Shape(format!("line_loss on {:?} against {} points", self.val(pred).shape(), target.len())));
        }
        let p = rows_as_points(self.val(pred));
        let mut grad = vec![0.0; n * 3];
        let mut loss = 0.0;
        for (i, j) in nearest_indices(&p, target).into_iter().enumerate() {
            let d = p[i] - target[j];
            loss += d.norm_squared() / n as f64;
            for k in 0..3 {
                grad[i * 3 + k] += 2.0 * d[k] / n as f64;
            }
        }
        let m = target.len() as f64;
        for (j, i) in nearest_indices(target, &p).into_iter().enumerate() {
            let d = p[i] - target[j];
            loss += d.norm_squared() / m;
            for k in 0..3 {
                grad[i * 3 + k] += 2.0 * d[k] / m;
            }
        }
        let local = Tensor::matrix(n, 3, grad)?;
        Ok(self.push(Tensor::scalar(loss), Op::Fused(pred.0, local)))
    }

    /// Mean squared edge length of the closed loop through the rows of an
    /// `n x 3` matrix.
    pub fn edge_reg(&mut self, pred: Var) -> Result<Var, NeuralError> {
        let (n, c) = self.check_2d(pred, "edge_reg")?;
        if c != 3 || n < 3 {
            return Err(NeuralError::Shape(format!("edge_reg on {:?}", self.val(pred).shape())));
        }
        let p = rows_as_points(self.val(pred));
        let mut grad = vec![0.0; n * 3];
        let mut loss = 0.0;
        for i in 0..n {
            let j = (i + 1) % n;
            let d = p[j] - p[i];
            loss += d.norm_squared() / n as f64;
            for k in 0..3 {
                grad[j * 3 + k] += 2.0 * d[k] / n as f64;
                grad[i * 3 + k] -= 2.0 * d[k] / n as f64;
            }
        }
        let local = Tensor::matrix(n, 3, grad)?;
        Ok(self.push(Tensor::scalar(loss), Op::Fused(pred.0, local)))
    }

    /// Gradients of the scalar `loss` with respect to every leaf that
    /// requires them. Leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NeuralError> {
        let lt = self.val(loss);
        if lt.len() != 1 {
            return Err(NeuralError::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        let out = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                (matches!(n.op, Op::Leaf) && n.value.requires_grad()).then(|| {
                    let data = grads[i].take().unwrap_or_else(|| vec![0.0; n.value.len()]);
                    Tensor::new(n.value.shape().to_vec(), data).expect("gradient matches value shape")
                })
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: usize, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[target].needs_grad {
            return;
        }
        let slot = grads[target].get_or_insert_with(|| vec![0.0; self.nodes[target].value.len()]);
        f(slot);
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                self.accumulate(grads, *a, |d| gemm(m, n, k, g, false, tb.data(), true, d, true));
                self.accumulate(grads, *b, |d| gemm(k, m, n, ta.data(), true, g, false, d, true));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                self.accumulate(grads, *a, |d| d.iter_mut().zip(g).zip(vb).for_each(|((d, g), y)| *d += g * y));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(g).zip(va).for_each(|((d, g), x)| *d += g * x));
            }
            Op::AddRow(a, b) => {
                let n = out.cols();
                self.accumulate(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                self.accumulate(grads, *b, |d| {
                    for row in g.chunks(n) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * s)),
            Op::Relu(a) => {
                let x = self.nodes[*a].value.data();
                self.accumulate(grads, *a, |d| {
                    d.iter_mut().zip(g).zip(x).for_each(|((d, g), x)| {
                        if *x > 0.0 {
                            *d += g
                        }
                    })
                });
            }
            Op::Tanh(a) => self.accumulate(grads, *a, |d| {
                d.iter_mut().zip(g).zip(out.data()).for_each(|((d, g), y)| *d += g * (1.0 - y * y))
            }),
            Op::Sigmoid(a) => self.accumulate(grads, *a, |d| {
                d.iter_mut().zip(g).zip(out.data()).for_each(|((d, g), y)| *d += g * y * (1.0 - y))
            }),
            Op::Square(a) => {
                let x = self.nodes[*a].value.data();
                self.accumulate(grads, *a, |d| d.iter_mut().zip(g).zip(x).for_each(|((d, g), x)| *d += 2.0 * g * x));
            }
            Op::SparseMul(s, a) => {
                let n = out.cols();
                self.accumulate(grads, *a, |d| {
                    for r in 0..s.rows() {
                        let gr = &g[r * n..(r + 1) * n];
                        for (c, w) in s.row(r) {
                            d[c * n..(c + 1) * n].iter_mut().zip(gr).for_each(|(d, g)| *d += w * g);
                        }
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let (na, nb) = (self.nodes[*a].value.cols(), self.nodes[*b].value.cols());
                let w = na + nb;
                self.accumulate(grads, *a, |d| {
                    for (dr, gr) in d.chunks_mut(na).zip(g.chunks(w)) {
                        dr.iter_mut().zip(&gr[..na]).for_each(|(d, g)| *d += g);
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for (dr, gr) in d.chunks_mut(nb).zip(g.chunks(w)) {
                        dr.iter_mut().zip(&gr[na..]).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::Rows(a, start) => {
                let n = out.cols();
                self.accumulate(grads, *a, |d| {
                    d[start * n..start * n + g.len()].iter_mut().zip(g).for_each(|(d, g)| *d += g)
                });
            }
            Op::Sum(a) => self.accumulate(grads, *a, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = self.nodes[*a].value.len() as f64;
                self.accumulate(grads, *a, |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Fused(a, local) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(local.data()).for_each(|(d, l)| *d += g[0] * l))
            }
        }
    }
}

/// Per-leaf gradients returned by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` for leaves recorded without `requires_grad`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Compares analytic gradients against central differences of step `h` for
/// every tensor in `params`. `build` records a scalar loss from the given
/// parameter handles. Returns one norm-wise relative error per tensor.
pub fn gradient_check(
    params: &[Tensor],
    h: f64,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var, NeuralError>,
) -> Result<Vec<f64>, NeuralError> {
    let eval = |ps: &[Tensor]| -> Result<(Graph, Var, Vec<Var>), NeuralError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok((g, loss, vars))
    };
    let (g, loss, vars) = eval(params)?;
    let grads = g.backward(loss)?;
    let mut errors = Vec::with_capacity(params.len());
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get(vars[pi]).expect("parameter gradient");
        let mut numeric = vec![0.0; p.len()];
        for k in 0..p.len() {
            let mut shifted = params.to_vec();
            shifted[pi].data_mut()[k] = p.data()[k] + h;
            let (g1, l1, _) = eval(&shifted)?;
            shifted[pi].data_mut()[k] = p.data()[k] - h;
            let (g2, l2, _) = eval(&shifted)?;
            numeric[k] = (g1.value(l1).item() - g2.value(l2).item()) / (2.0 * h);
        }
        let diff = analytic.data().iter().zip(&numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
        let scale = analytic.norm().max(numeric.iter().map(|x| x * x).sum::<f64>().sqrt());
        errors.push(if scale == 0.0 { 0.0 } else { diff / scale });
    }
    Ok(errors)
}
