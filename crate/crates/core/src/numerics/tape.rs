//! Reverse-mode differentiation over an explicit tape.
//!
//! Every primitive appends one node holding its output value and the data
//! its backward rule needs. Nodes only reference earlier nodes, so a single
//! reverse sweep over the node list visits each node once in topological
//! order.

use std::cell::{Ref, RefCell};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Probability floor used by [`Var::cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

enum Value {
    Owned(Tensor),
    Shared(Arc<Tensor>),
}

impl std::ops::Deref for Value {
    type Target = Tensor;

    fn deref(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Shared(t) => t,
        }
    }
}

enum Op {
    Leaf {
        name: Option<Box<str>>,
    },
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MeanRows(usize),
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Reshape(usize),
    Sum(usize),
    CrossEntropy {
        probs: usize,
        labels: Vec<usize>,
    },
}

struct Node {
    value: Value,
    op: Op,
}

/// Recording context for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    doubled_leaf: Option<String>,
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test hook: the gradient accumulated into the named leaf is doubled.
    pub fn with_doubled_leaf(mut self, name: impl Into<String>) -> Self {
        self.doubled_leaf = Some(name.into());
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a named trainable leaf sharing storage with `value`.
    pub fn param(&self, name: &str, value: Arc<Tensor>) -> Var<'_> {
        self.push_node(
            Value::Shared(value),
            Op::Leaf {
                name: Some(name.into()),
            },
        )
    }

    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_node(Value::Owned(value), Op::Leaf { name: None })
    }

    pub fn shared(&self, value: Arc<Tensor>) -> Var<'_> {
        self.push_node(Value::Shared(value), Op::Leaf { name: None })
    }

    fn push_node(&self, value: Value, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        Ok(self.push_node(Value::Owned(value), op))
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &*n[id].value)
    }

    /// Propagates d(loss)/d(node) back to every node that feeds `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::shape("backward", nodes[loss.id].value.shape(), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let out = &*node.value;
            match &node.op {
                Op::Leaf { name } => {
                    let mut g = g;
                    if let (Some(n), Some(d)) = (name, &self.doubled_leaf) {
                        if **n == **d {
                            g.iter_mut().for_each(|v| *v *= 2.0);
                        }
                    }
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&*nodes[*a].value, &*nodes[*b].value);
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    let (ad, bd) = (av.data(), bv.data());
                    let ga = slot(&mut grads, *a, m * k);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let garow = &mut ga[i * k..(i + 1) * k];
                        for p in 0..k {
                            garow[p] += dot(grow, &bd[p * n..(p + 1) * n]);
                        }
                    }
                    let gb = slot(&mut grads, *b, k * n);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            axpy(ad[i * k + p], grow, &mut gb[p * n..(p + 1) * n]);
                        }
                    }
                }
                Op::MatMulT(a, b) => {
                    // out = A·Bᵀ with A: m×k, B: n×k
                    let (av, bv) = (&*nodes[*a].value, &*nodes[*b].value);
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                    let (ad, bd) = (av.data(), bv.data());
                    let ga = slot(&mut grads, *a, m * k);
                    for i in 0..m {
                        for j in 0..n {
                            axpy(
                                g[i * n + j],
                                &bd[j * k..(j + 1) * k],
                                &mut ga[i * k..(i + 1) * k],
                            );
                        }
                    }
                    let gb = slot(&mut grads, *b, n * k);
                    for i in 0..m {
                        for j in 0..n {
                            axpy(
                                g[i * n + j],
                                &ad[i * k..(i + 1) * k],
                                &mut gb[j * k..(j + 1) * k],
                            );
                        }
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (out.shape()[0], out.shape()[1]);
                    let ga = slot(&mut grads, *a, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += g[i * c + j];
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(slot(&mut grads, *a, g.len()), &g);
                    add_into(slot(&mut grads, *b, g.len()), &g);
                }
                Op::Sub(a, b) => {
                    add_into(slot(&mut grads, *a, g.len()), &g);
                    let gb = slot(&mut grads, *b, g.len());
                    gb.iter_mut().zip(&g).for_each(|(d, s)| *d -= s);
                }
                Op::Mul(a, b) => {
                    let ad = nodes[*a].value.data();
                    let bd = nodes[*b].value.data();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((d, gi), bi) in ga.iter_mut().zip(&g).zip(bd) {
                        *d += gi * bi;
                    }
                    let gb = slot(&mut grads, *b, g.len());
                    for ((d, gi), ai) in gb.iter_mut().zip(&g).zip(ad) {
                        *d += gi * ai;
                    }
                }
                Op::AddRow(a, b) => {
                    let c = out.cols();
                    add_into(slot(&mut grads, *a, g.len()), &g);
                    let gb = slot(&mut grads, *b, c);
                    for row in g.chunks_exact(c) {
                        add_into(gb, row);
                    }
                }
                Op::MulRow(a, m) => {
                    let c = out.cols();
                    let ad = nodes[*a].value.data();
                    let md = nodes[*m].value.data();
                    let ga = slot(&mut grads, *a, g.len());
                    for (grow, darow) in g.chunks_exact(c).zip(ga.chunks_exact_mut(c)) {
                        for j in 0..c {
                            darow[j] += grow[j] * md[j];
                        }
                    }
                    let gm = slot(&mut grads, *m, c);
                    for (grow, arow) in g.chunks_exact(c).zip(ad.chunks_exact(c)) {
                        for j in 0..c {
                            gm[j] += grow[j] * arow[j];
                        }
                    }
                }
                Op::Scale(a, s) => {
                    let ga = slot(&mut grads, *a, g.len());
                    ga.iter_mut().zip(&g).for_each(|(d, gi)| *d += s * gi);
                }
                Op::AddScalar(a) | Op::Reshape(a) => {
                    add_into(slot(&mut grads, *a, g.len()), &g);
                }
                Op::Relu(a) => {
                    let ad = nodes[*a].value.data();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((d, gi), xi) in ga.iter_mut().zip(&g).zip(ad) {
                        if *xi > 0.0 {
                            *d += gi;
                        }
                    }
                }
                Op::Softmax { x, axis } => {
                    let (outer, n, inner) = axis_layout(out.shape(), *axis);
                    let y = out.data();
                    let gx = slot(&mut grads, *x, g.len());
                    for o in 0..outer {
                        for k in 0..inner {
                            let idx = |i: usize| (o * n + i) * inner + k;
                            let s: f64 = (0..n).map(|i| g[idx(i)] * y[idx(i)]).sum();
                            for i in 0..n {
                                gx[idx(i)] += y[idx(i)] * (g[idx(i)] - s);
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let d = out.cols();
                    let gamma = nodes[*gain].value.data();
                    {
                        let gg = slot(&mut grads, *gain, d);
                        for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                            for j in 0..d {
                                gg[j] += grow[j] * hrow[j];
                            }
                        }
                    }
                    {
                        let gb = slot(&mut grads, *bias, d);
                        for grow in g.chunks_exact(d) {
                            add_into(gb, grow);
                        }
                    }
                    let gx = slot(&mut grads, *x, g.len());
                    let mut dxhat = vec![0.0; d];
                    for (r, (grow, hrow)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate()
                    {
                        for j in 0..d {
                            dxhat[j] = grow[j] * gamma[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh = dot(&dxhat, hrow) / d as f64;
                        let dst = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            dst[j] += inv_std[r] * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                        }
                    }
                }
                Op::MeanRows(a) => {
                    let av = &*nodes[*a].value;
                    let (l, d) = (av.rows(), av.cols());
                    let ga = slot(&mut grads, *a, l * d);
                    let inv = 1.0 / l as f64;
                    for row in ga.chunks_exact_mut(d) {
                        row.iter_mut()
                            .zip(&g)
                            .for_each(|(dst, gi)| *dst += gi * inv);
                    }
                }
                Op::SliceCols { x, start } => {
                    let xv = &*nodes[*x].value;
                    let (rows, cols) = (xv.rows(), xv.cols());
                    let w = out.cols();
                    let gx = slot(&mut grads, *x, rows * cols);
                    for r in 0..rows {
                        add_into(
                            &mut gx[r * cols + start..r * cols + start + w],
                            &g[r * w..(r + 1) * w],
                        );
                    }
                }
                Op::ConcatCols(parts) => {
                    let (rows, total) = (out.rows(), out.cols());
                    let mut offset = 0;
                    for &p in parts {
                        let w = nodes[p].value.cols();
                        let gp = slot(&mut grads, p, rows * w);
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = nodes[p].value.len();
                        add_into(slot(&mut grads, p, n), &g[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::Sum(a) => {
                    let ga = slot(&mut grads, *a, nodes[*a].value.len());
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
                Op::CrossEntropy { probs, labels } => {
                    let pv = &*nodes[*probs].value;
                    let c = pv.cols();
                    let b = labels.len() as f64;
                    let pd = pv.data();
                    let gp = slot(&mut grads, *probs, pd.len());
                    for (r, &y) in labels.iter().enumerate() {
                        let p = pd[r * c + y];
                        if p > PROB_FLOOR {
                            gp[r * c + y] -= g[0] / (b * p);
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of one scalar with respect to every recorded node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for `var`; `None` when `var` does not reach the loss.
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Vec<f64>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }

    /// Gradient for `var` shaped like its value, zeros when unreachable.
    pub fn tensor(&self, var: Var<'_>) -> Tensor {
        let shape = var.shape();
        match self.get(var) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut [f64] {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, s, &[0, 0])),
    }
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.value(self.id)
    }

    /// Owned copy of the current value.
    pub fn tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables recorded on different tapes"
        );
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let out = {
            let (a, b) = (self.value(), rhs.value());
            let (m, k) = matrix_dims("matmul", &a)?;
            let (k2, n) = matrix_dims("matmul", &b)?;
            if k != k2 {
                return Err(Error::shape("matmul", a.shape(), b.shape()));
            }
            let (ad, bd) = (a.data(), b.data());
            let mut c = vec![0.0; m * n];
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    axpy(ad[i * k + p], &bd[p * n..(p + 1) * n], crow);
                }
            }
            Tensor::matrix(m, n, c)?
        };
        self.tape.push("matmul", out, Op::MatMul(self.id, rhs.id))
    }

    /// `self · rhsᵀ` without materializing the transpose.
    pub fn matmul_t(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let out = {
            let (a, b) = (self.value(), rhs.value());
            let (m, k) = matrix_dims("matmul_t", &a)?;
            let (n, k2) = matrix_dims("matmul_t", &b)?;
            if k != k2 {
                return Err(Error::shape("matmul_t", a.shape(), b.shape()));
            }
            let (ad, bd) = (a.data(), b.data());
            let mut c = Vec::with_capacity(m * n);
            for i in 0..m {
                for j in 0..n {
                    c.push(dot(&ad[i * k..(i + 1) * k], &bd[j * k..(j + 1) * k]));
                }
            }
            Tensor::matrix(m, n, c)?
        };
        self.tape
            .push("matmul_t", out, Op::MatMulT(self.id, rhs.id))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let (r, c) = matrix_dims("transpose", &a)?;
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    d[j * r + i] = a.data()[i * c + j];
                }
            }
            Tensor::matrix(c, r, d)?
        };
        self.tape.push("transpose", out, Op::Transpose(self.id))
    }

    fn zip_same(
        self,
        rhs: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.same_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return Err(Error::shape(name, a.shape(), b.shape()));
        }
        let d = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(a.shape().to_vec(), d)
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let out = self.zip_same(rhs, "add", |x, y| x + y)?;
        self.tape.push("add", out, Op::Add(self.id, rhs.id))
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let out = self.zip_same(rhs, "sub", |x, y| x - y)?;
        self.tape.push("sub", out, Op::Sub(self.id, rhs.id))
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let out = self.zip_same(rhs, "mul", |x, y| x * y)?;
        self.tape.push("mul", out, Op::Mul(self.id, rhs.id))
    }

    fn zip_row(
        self,
        row: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.same_tape(&row);
        let (a, b) = (self.value(), row.value());
        if b.shape().len() != 1 || a.cols() != b.len() {
            return Err(Error::shape(name, a.shape(), b.shape()));
        }
        let c = a.cols();
        let bd = b.data();
        let d = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| f(*x, bd[i % c]))
            .collect();
        Tensor::new(a.shape().to_vec(), d)
    }

    /// Adds a width-`d` vector to every trailing-axis slice.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let out = self.zip_row(row, "add_row", |x, y| x + y)?;
        self.tape.push("add_row", out, Op::AddRow(self.id, row.id))
    }

    /// Multiplies every trailing-axis slice by a width-`d` vector.
    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let out = self.zip_row(row, "mul_row", |x, y| x * y)?;
        self.tape.push("mul_row", out, Op::MulRow(self.id, row.id))
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        let out = self.value().map(|x| x * s);
        self.tape.push("scale", out, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'t>> {
        let out = self.value().map(|x| x + s);
        self.tape.push("add_scalar", out, Op::AddScalar(self.id))
    }

    pub fn relu(self) -> Result<Var<'t>> {
        let out = self.value().map(|x| if x > 0.0 { x } else { 0.0 });
        self.tape.push("relu", out, Op::Relu(self.id))
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            if axis >= x.shape().len() {
                return Err(Error::Config(format!(
                    "softmax axis {axis} out of range for shape {:?}",
                    x.shape()
                )));
            }
            let (outer, n, inner) = axis_layout(x.shape(), axis);
            let xd = x.data();
            let mut y = vec![0.0; xd.len()];
            for o in 0..outer {
                for k in 0..inner {
                    let idx = |i: usize| (o * n + i) * inner + k;
                    let max = (0..n).map(|i| xd[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for i in 0..n {
                        let e = (xd[idx(i)] - max).exp();
                        y[idx(i)] = e;
                        sum += e;
                    }
                    for i in 0..n {
                        y[idx(i)] /= sum;
                    }
                }
            }
            Tensor::new(x.shape().to_vec(), y)?
        };
        self.tape
            .push("softmax", out, Op::Softmax { x: self.id, axis })
    }

    /// Normalizes every trailing-axis slice to zero mean and unit variance,
    /// then applies `gain` and `bias`.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        if eps <= 0.0 {
            return Err(Error::Config(format!(
                "layer_norm eps must be > 0, got {eps}"
            )));
        }
        let (out, xhat, inv_std) = {
            let (x, g, b) = (self.value(), gain.value(), bias.value());
            let d = x.cols();
            if g.shape() != [d] || b.shape() != [d] {
                return Err(Error::shape("layer_norm", x.shape(), g.shape()));
            }
            let rows = x.len() / d;
            let mut xhat = Vec::with_capacity(x.len());
            let mut inv_std = Vec::with_capacity(rows);
            let mut y = Vec::with_capacity(x.len());
            for row in x.data().chunks_exact(d) {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std.push(is);
                for (j, v) in row.iter().enumerate() {
                    let h = (v - mean) * is;
                    xhat.push(h);
                    y.push(g.data()[j] * h + b.data()[j]);
                }
            }
            (Tensor::new(x.shape().to_vec(), y)?, xhat, inv_std)
        };
        self.tape.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
        )
    }

    /// Mean over rows of an `L × d` matrix, giving a width-`d` vector.
    pub fn mean_rows(self) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let (l, d) = matrix_dims("mean_rows", &x)?;
            let mut acc = vec![0.0; d];
            for row in x.data().chunks_exact(d) {
                add_into(&mut acc, row);
            }
            acc.iter_mut().for_each(|v| *v /= l as f64);
            Tensor::vector(acc)?
        };
        self.tape.push("mean_rows", out, Op::MeanRows(self.id))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(self, start: usize, width: usize) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let (r, c) = matrix_dims("slice_cols", &x)?;
            if width == 0 || start + width > c {
                return Err(Error::shape("slice_cols", x.shape(), &[start, width]));
            }
            let mut d = Vec::with_capacity(r * width);
            for row in x.data().chunks_exact(c) {
                d.extend_from_slice(&row[start..start + width]);
            }
            Tensor::matrix(r, width, d)?
        };
        self.tape
            .push("slice_cols", out, Op::SliceCols { x: self.id, start })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.tensor().reshaped(shape.to_vec())?;
        self.tape.push("reshape", out, Op::Reshape(self.id))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let out = Tensor::scalar(self.value().data().iter().sum());
        self.tape.push("sum", out, Op::Sum(self.id))
    }

    /// Mean over rows of `-ln max(p[row, label], 1e-12)`.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let out = {
            let p = self.value();
            let (b, c) = matrix_dims("cross_entropy", &p)?;
            if labels.len() != b {
                return Err(Error::shape("cross_entropy", p.shape(), &[labels.len()]));
            }
            let mut total = 0.0;
            for (r, &y) in labels.iter().enumerate() {
                if y >= c {
                    return Err(Error::Label {
                        label: y,
                        classes: c,
                    });
                }
                total -= p.at(r, y).max(PROB_FLOOR).ln();
            }
            Tensor::scalar(total / b as f64)
        };
        self.tape.push(
            "cross_entropy",
            out,
            Op::CrossEntropy {
                probs: self.id,
                labels: labels.to_vec(),
            },
        )
    }
}

/// Horizontal concatenation of matrices with equal row counts.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Empty("concat_cols with no inputs".into()))?;
    let tape = first.tape;
    let out = {
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let rows = vals[0].rows();
        let mut widths = Vec::with_capacity(vals.len());
        for v in &vals {
            let (r, c) = matrix_dims("concat_cols", v)?;
            if r != rows {
                return Err(Error::shape("concat_cols", vals[0].shape(), v.shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut d = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &vals {
                d.extend_from_slice(v.row(r));
            }
        }
        Tensor::matrix(rows, total, d)?
    };
    tape.push(
        "concat_cols",
        out,
        Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
    )
}

/// Vertical concatenation of matrices with equal widths.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Empty("concat_rows with no inputs".into()))?;
    let tape = first.tape;
    let out = {
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let cols = vals[0].cols();
        let mut rows = 0;
        let mut d = Vec::new();
        for v in &vals {
            let (r, c) = matrix_dims("concat_rows", v)?;
            if c != cols {
                return Err(Error::shape("concat_rows", vals[0].shape(), v.shape()));
            }
            rows += r;
            d.extend_from_slice(v.data());
        }
        Tensor::matrix(rows, cols, d)?
    };
    tape.push(
        "concat_rows",
        out,
        Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
    )
}
