//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records each operation as it is evaluated. Node ids are
//! assigned in evaluation order, so the tape is always topologically sorted
//! and [`Graph::backward`] is a single reverse sweep. Gradients of a node
//! with several consumers are summed in that fixed order, which makes the
//! result bit-reproducible.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Gelu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    ScaleBy { x: Var, s: Var },
    AddRow { x: Var, row: Var },
    MulRow { x: Var, row: Var },
    MatMul(Var, Var),
    Permute { x: Var, perm: Vec<usize> },
    Reshape { x: Var },
    Expand { x: Var, axis: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Gather { table: Var, indices: Vec<usize> },
    Sum { x: Var },
    Mean { x: Var },
    MeanAxis { x: Var, axis: usize },
    Unary { x: Var, kind: Unary },
    Clamp { x: Var, lo: f64, hi: f64 },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var },
    Conv3d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvT3d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    TemporalConv { x: Var, w: Var, b: Option<Var> },
    Covariance { x: Var },
    RowCosine { a: Var, b: Var },
    Frobenius { x: Var },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Operation tape. Build it by calling the operation methods, then call
/// [`Graph::backward`] on a scalar node.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Gradients produced by one backward sweep, keyed by leaf node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like `like` when `v` did not receive any.
    pub fn wrt(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| like.zeros_like())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn check_finite(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { what: op.to_string() })
    }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        let value = check_finite(op_name, value)?;
        Ok(self.push(value, op))
    }

    /// Drops every node recorded at or after `len`. Nodes before `len` never
    /// depend on later ones, so the remaining tape stays valid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.params.retain(|_, v| v.0 < len);
    }

    /// A leaf (input or constant). Receives a gradient if the loss depends on it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A named trainable leaf. Binding the same name twice returns the same node.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    /// Gradients of every bound parameter; unreachable parameters get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, &v)| (name.clone(), grads.wrt(v, self.value(v))))
            .collect()
    }

    // ------------------------------------------------------------ elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.push_checked("add", y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.push_checked("sub", y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push_checked("mul", y, Op::Mul(a, b))
    }

    /// `scale·x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let y = self.value(x).map(|v| scale * v + shift);
        self.push_checked("affine", y, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    /// Multiplies every element of `x` by the one-element node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item().map_err(|_| Error::shape("scale_by", self.shape(x), self.shape(s)))?;
        let y = self.value(x).map(|v| v * sv);
        self.push_checked("scale_by", y, Op::ScaleBy { x, s })
    }

    fn row_broadcast(&self, op: &'static str, x: Var, row: Var) -> Result<usize> {
        let n = *self.shape(x).last().ok_or(Error::Empty { op })?;
        if self.shape(row) != [n] {
            return Err(Error::shape(op, self.shape(x), self.shape(row)));
        }
        Ok(n)
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.row_broadcast("add_row", x, row)?;
        let r = self.value(row).data().to_vec();
        let mut y = self.value(x).clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += r[i % n];
        }
        self.push_checked("add_row", y, Op::AddRow { x, row })
    }

    /// Multiplies `x` by a vector along its last axis.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.row_broadcast("mul_row", x, row)?;
        let r = self.value(row).data().to_vec();
        let mut y = self.value(x).clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v *= r[i % n];
        }
        self.push_checked("mul_row", y, Op::MulRow { x, row })
    }

    fn unary(&mut self, x: Var, kind: Unary, name: &'static str) -> Result<Var> {
        let f: fn(f64) -> f64 = match kind {
            Unary::Gelu => kernels::gelu,
            Unary::Sigmoid => kernels::sigmoid,
            Unary::Tanh => libm::tanh,
            Unary::Exp => libm::exp,
            Unary::Log => libm::log,
        };
        let y = self.value(x).map(f);
        self.push_checked(name, y, Op::Unary { x, kind })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Gelu, "gelu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid, "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh, "tanh")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp, "exp")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log, "log")
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let y = self.value(x).map(|v| v.clamp(lo, hi));
        self.push_checked("clamp", y, Op::Clamp { x, lo, hi })
    }

    // ------------------------------------------------------------ linear algebra / layout

    /// `[m,k]·[k,n]` or batched `[b,m,k]·[b,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::matmul(self.value(a), self.value(b))?;
        self.push_checked("matmul", y, Op::MatMul(a, b))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let y = kernels::permute(self.value(x), perm)?;
        Ok(self.push(y, Op::Permute { x, perm: perm.to_vec() }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::invalid("transpose", "expects a matrix"));
        }
        self.permute(x, &[1, 0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(y, Op::Reshape { x }))
    }

    /// Repeats a size-1 axis `n` times.
    pub fn expand(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let src = self.value(x);
        if axis >= src.rank() || src.shape()[axis] != 1 || n == 0 {
            return Err(Error::invalid(
                "expand",
                alloc::format!("cannot expand axis {axis} of {:?} to {n}", src.shape()),
            ));
        }
        let (outer, _, inner) = kernels::axis_split(src.shape(), axis);
        let mut data = Vec::with_capacity(src.len() * n);
        for o in 0..outer {
            let block = &src.data()[o * inner..(o + 1) * inner];
            for _ in 0..n {
                data.extend_from_slice(block);
            }
        }
        let mut shape = src.shape().to_vec();
        shape[axis] = n;
        Ok(self.push(Tensor::from_parts(shape, data), Op::Expand { x, axis }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let y = kernels::concat(&values, axis)?;
        Ok(self.push(y, Op::Concat { parts: parts.to_vec(), axis }))
    }

    /// Row lookup: `table[indices[i], :]` for a `[rows, width]` table.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let [rows, width] = *t.shape() else {
            return Err(Error::invalid("gather_rows", "table must be a matrix"));
        };
        if indices.is_empty() {
            return Err(Error::Empty { op: "gather_rows" });
        }
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= rows {
                return Err(Error::invalid(
                    "gather_rows",
                    alloc::format!("row {i} outside a table of {rows} rows"),
                ));
            }
            data.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
        }
        let y = Tensor::from_parts(vec![indices.len(), width], data);
        Ok(self.push(y, Op::Gather { table, indices: indices.to_vec() }))
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        self.push_checked("sum", y, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let y = Tensor::scalar(v.sum() / v.len() as f64);
        self.push_checked("mean", y, Op::Mean { x })
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.rank() {
            return Err(Error::invalid("mean_axis", "axis out of range"));
        }
        let (outer, n, inner) = kernels::axis_split(v.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &v.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, x) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        data.iter_mut().for_each(|d| *d /= n as f64);
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        Ok(self.push(Tensor::from_parts(shape, data), Op::MeanAxis { x, axis }))
    }

    // ------------------------------------------------------------ neural network ops

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = kernels::softmax(self.value(x), axis)?;
        self.push_checked("softmax", y, Op::Softmax { x, axis })
    }

    /// Normalization over the last axis (no affine parameters).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let y = kernels::layer_norm(self.value(x));
        self.push_checked("layer_norm", y, Op::LayerNorm { x })
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let y = kernels::conv3d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        self.push_checked("conv3d", y, Op::Conv3d { x, w, b, stride, pad })
    }

    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let y = kernels::conv_transpose3d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        self.push_checked("conv_transpose3d", y, Op::ConvT3d { x, w, b, stride, pad })
    }

    pub fn temporal_conv(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = kernels::temporal_conv(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        self.push_checked("temporal_conv", y, Op::TemporalConv { x, w, b })
    }

    pub fn covariance(&mut self, x: Var) -> Result<Var> {
        let y = kernels::covariance(self.value(x))?;
        self.push_checked("covariance", y, Op::Covariance { x })
    }

    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::row_cosine(self.value(a), self.value(b))?;
        self.push_checked("row_cosine", y, Op::RowCosine { a, b })
    }

    /// Frobenius norm; the gradient at the zero matrix is taken as zero.
    pub fn frobenius(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(kernels::frobenius(self.value(x)));
        self.push_checked("frobenius", y, Op::Frobenius { x })
    }

    /// `x·W + b` for `x: [.., in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    // ------------------------------------------------------------ backward

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::invalid(
                "backward",
                alloc::format!("loss must be a scalar, got shape {:?}", lv.shape()),
            ));
        }
        self.backward_seeded(&[(loss, Tensor::from_parts(lv.shape().to_vec(), vec![1.0]))])
    }

    /// Reverse sweep from arbitrary upstream gradients on any set of nodes.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (v, g) in seeds {
            if g.shape() != self.shape(*v) {
                return Err(Error::shape("backward", self.shape(*v), g.shape()));
            }
            accumulate(&mut grads, *v, g.clone());
            top = top.max(v.0 + 1);
        }
        for i in (0..top).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(val(*b), "mul", |g, b| g * b).expect("shapes");
                let gb = g.zip_map(val(*a), "mul", |g, a| g * a).expect("shapes");
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Affine { x, scale } => accumulate(grads, *x, g.map(|v| v * scale)),
            Op::ScaleBy { x, s } => {
                let sv = val(*s).data()[0];
                let gs = g.dot(val(*x)).expect("shapes");
                accumulate(grads, *x, g.map(|v| v * sv));
                accumulate(grads, *s, Tensor::from_parts(val(*s).shape().to_vec(), vec![gs]));
            }
            Op::AddRow { x, row } => {
                let n = val(*row).len();
                let mut gr = vec![0.0; n];
                for (k, v) in g.data().iter().enumerate() {
                    gr[k % n] += v;
                }
                accumulate(grads, *x, g.clone());
                accumulate(grads, *row, Tensor::from_parts(vec![n], gr));
            }
            Op::MulRow { x, row } => {
                let r = val(*row).data();
                let n = r.len();
                let xv = val(*x).data();
                let mut gr = vec![0.0; n];
                let mut gx = g.clone();
                for (k, v) in gx.data_mut().iter_mut().enumerate() {
                    gr[k % n] += *v * xv[k];
                    *v *= r[k % n];
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *row, Tensor::from_parts(vec![n], gr));
            }
            Op::MatMul(a, b) => {
                let (ga, gb) = kernels::matmul_backward(val(*a), val(*b), g);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Permute { x, perm } => {
                let inv = kernels::inverse_permutation(perm);
                accumulate(grads, *x, kernels::permute(g, &inv).expect("valid permutation"));
            }
            Op::Reshape { x } => {
                accumulate(grads, *x, g.reshape(val(*x).shape().to_vec()).expect("same size"));
            }
            Op::Expand { x, axis } => {
                let (outer, n, inner) = kernels::axis_split(y.shape(), *axis);
                let mut gx = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let row = &g.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (acc, v) in gx[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_parts(val(*x).shape().to_vec(), gx));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = kernels::axis_split(y.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let shape = val(p).shape().to_vec();
                    let ext = shape[*axis];
                    let mut gp = Vec::with_capacity(numel(&shape));
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        gp.extend_from_slice(&g.data()[start..start + ext * inner]);
                    }
                    offset += ext;
                    accumulate(grads, p, Tensor::from_parts(shape, gp));
                }
            }
            Op::Gather { table, indices } => {
                let tv = val(*table);
                let width = tv.shape()[1];
                let mut gt = tv.zeros_like();
                for (k, &row) in indices.iter().enumerate() {
                    let dst = &mut gt.data_mut()[row * width..(row + 1) * width];
                    for (d, s) in dst.iter_mut().zip(&g.data()[k * width..(k + 1) * width]) {
                        *d += s;
                    }
                }
                accumulate(grads, *table, gt);
            }
            Op::Sum { x } => {
                let gv = g.data()[0];
                accumulate(grads, *x, val(*x).map(|_| gv));
            }
            Op::Mean { x } => {
                let gv = g.data()[0] / val(*x).len() as f64;
                accumulate(grads, *x, val(*x).map(|_| gv));
            }
            Op::MeanAxis { x, axis } => {
                let xs = val(*x).shape().to_vec();
                let (outer, n, inner) = kernels::axis_split(&xs, *axis);
                let mut gx = Vec::with_capacity(numel(&xs));
                for o in 0..outer {
                    let row = &g.data()[o * inner..(o + 1) * inner];
                    for _ in 0..n {
                        gx.extend(row.iter().map(|v| v / n as f64));
                    }
                }
                accumulate(grads, *x, Tensor::from_parts(xs, gx));
            }
            Op::Unary { x, kind } => {
                let xv = val(*x);
                let gx = match kind {
                    Unary::Gelu => g.zip_map(xv, "gelu", |g, x| g * kernels::gelu_grad(x)),
                    Unary::Sigmoid => g.zip_map(y, "sigmoid", |g, y| g * y * (1.0 - y)),
                    Unary::Tanh => g.zip_map(y, "tanh", |g, y| g * (1.0 - y * y)),
                    Unary::Exp => g.zip_map(y, "exp", |g, y| g * y),
                    Unary::Log => g.zip_map(xv, "log", |g, x| g / x),
                }
                .expect("shapes");
                accumulate(grads, *x, gx);
            }
            Op::Clamp { x, lo, hi } => {
                let gx = g
                    .zip_map(val(*x), "clamp", |g, x| if x >= *lo && x <= *hi { g } else { 0.0 })
                    .expect("shapes");
                accumulate(grads, *x, gx);
            }
            Op::Softmax { x, axis } => accumulate(grads, *x, kernels::softmax_backward(y, g, *axis)),
            Op::LayerNorm { x } => accumulate(grads, *x, kernels::layer_norm_backward(val(*x), y, g)),
            Op::Conv3d { x, w, b, stride, pad } => {
                let (gx, gw, gb) = kernels::conv3d_backward(val(*x), val(*w), g, *stride, *pad);
                accumulate(grads, *x, gx);
                accumulate(grads, *w, gw);
                if let Some(b) = b {
                    accumulate(grads, *b, gb);
                }
            }
            Op::ConvT3d { x, w, b, stride, pad } => {
                let (gx, gw, gb) = kernels::conv_transpose3d_backward(val(*x), val(*w), g, *stride, *pad);
                accumulate(grads, *x, gx);
                accumulate(grads, *w, gw);
                if let Some(b) = b {
                    accumulate(grads, *b, gb);
                }
            }
            Op::TemporalConv { x, w, b } => {
                let (gx, gw, gb) = kernels::temporal_conv_backward(val(*x), val(*w), g);
                accumulate(grads, *x, gx);
                accumulate(grads, *w, gw);
                if let Some(b) = b {
                    accumulate(grads, *b, gb);
                }
            }
            Op::Covariance { x } => accumulate(grads, *x, kernels::covariance_backward(val(*x), g)),
            Op::RowCosine { a, b } => {
                let (ga, gb) = kernels::row_cosine_backward(val(*a), val(*b), g);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Frobenius { x } => {
                let norm = y.data()[0];
                let gv = g.data()[0];
                let gx = if norm == 0.0 {
                    val(*x).zeros_like()
                } else {
                    val(*x).map(|v| gv * v / norm)
                };
                accumulate(grads, *x, gx);
            }
        }
    }
}
