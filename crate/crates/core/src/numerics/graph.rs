//! Tape-based reverse-mode differentiation over a closed set of 2-D primitives.
//!
//! A [`Graph`] records every primitive applied during a forward pass. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and writes
//! parameter gradients into the [`ParamStore`] the parameters were read from.

use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use super::{NumericsError, ParamId, ParamStore, Real, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// The primitive operations the tape knows how to differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    MatMul,
    Add,
    Mul,
    Scale,
    Concat,
    Slice,
    Gather,
    Reshape,
    Transpose,
    Softmax,
    Sigmoid,
    Tanh,
    Gelu,
    LeakyRelu,
    LayerNorm,
    Mean,
    Sum,
    Log,
    LogSigmoid,
}

impl Primitive {
    pub const ALL: [Primitive; 19] = [
        Primitive::MatMul,
        Primitive::Add,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::Concat,
        Primitive::Slice,
        Primitive::Gather,
        Primitive::Reshape,
        Primitive::Transpose,
        Primitive::Softmax,
        Primitive::Sigmoid,
        Primitive::Tanh,
        Primitive::Gelu,
        Primitive::LeakyRelu,
        Primitive::LayerNorm,
        Primitive::Mean,
        Primitive::Sum,
        Primitive::Log,
        Primitive::LogSigmoid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::Concat => "concat",
            Primitive::Slice => "slice",
            Primitive::Gather => "gather",
            Primitive::Reshape => "reshape",
            Primitive::Transpose => "transpose",
            Primitive::Softmax => "softmax",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Gelu => "gelu",
            Primitive::LeakyRelu => "leaky_relu",
            Primitive::LayerNorm => "layer_norm",
            Primitive::Mean => "mean",
            Primitive::Sum => "sum",
            Primitive::Log => "log",
            Primitive::LogSigmoid => "log_sigmoid",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How the right operand of `add`/`mul` is broadcast against the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Axis {
    Rows,
    Cols,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, T),
    Concat(Vec<Var>, Axis),
    Slice(Var, Axis, usize),
    Gather(Var, Rc<[usize]>),
    Reshape(Var),
    Transpose(Var),
    Softmax(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    LeakyRelu(Var, T),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    Log(Var),
    LogSigmoid(Var),
}

impl<T> Op<T> {
    fn primitive(&self) -> Option<Primitive> {
        Some(match self {
            Op::Leaf | Op::Param(_) => return None,
            Op::MatMul(..) => Primitive::MatMul,
            Op::Add(..) => Primitive::Add,
            Op::Mul(..) => Primitive::Mul,
            Op::Scale(..) => Primitive::Scale,
            Op::Concat(..) => Primitive::Concat,
            Op::Slice(..) => Primitive::Slice,
            Op::Gather(..) => Primitive::Gather,
            Op::Reshape(..) => Primitive::Reshape,
            Op::Transpose(..) => Primitive::Transpose,
            Op::Softmax(..) => Primitive::Softmax,
            Op::Sigmoid(..) => Primitive::Sigmoid,
            Op::Tanh(..) => Primitive::Tanh,
            Op::Gelu(..) => Primitive::Gelu,
            Op::LeakyRelu(..) => Primitive::LeakyRelu,
            Op::LayerNorm { .. } => Primitive::LayerNorm,
            Op::MeanRows(..) | Op::Mean(..) => Primitive::Mean,
            Op::Sum(..) => Primitive::Sum,
            Op::Log(..) => Primitive::Log,
            Op::LogSigmoid(..) => Primitive::LogSigmoid,
        })
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording tape for one forward/backward pass.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    corrupted: Option<Primitive>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: Primitive, detail: String) -> NumericsError {
    NumericsError::Shape { op: op.name(), detail }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn log_sigmoid<T: Real>(x: T) -> T {
    // log(sigmoid(x)) = min(x, 0) - log(1 + exp(-|x|))
    let m = if x < T::zero() { x } else { T::zero() };
    m - (-x.abs()).exp().ln_1p()
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
fn gelu<T: Real>(x: T) -> T {
    T::of(0.5) * x * (T::one() + (x * T::of(INV_SQRT_2)).erf())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(INV_SQRT_2)).erf());
    let pdf = T::of(INV_SQRT_2PI) * (T::of(-0.5) * x * x).exp();
    cdf + x * pdf
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), corrupted: None }
    }

    /// Makes the backward rule of `primitive` deliberately wrong.
    ///
    /// Only useful for checking that a gradient check catches a broken rule.
    pub fn corrupt_backward(&mut self, primitive: Primitive) {
        self.corrupted = Some(primitive);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            Op::MatMul(a, b) | Op::Add(a, b, _) | Op::Mul(a, b, _) => self.rg(*a) || self.rg(*b),
            Op::Concat(parts, _) => parts.iter().any(|p| self.rg(*p)),
            Op::LayerNorm { x, gain, bias, .. } => self.rg(*x) || self.rg(*gain) || self.rg(*bias),
            Op::Scale(a, _)
            | Op::Slice(a, ..)
            | Op::Gather(a, _)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::Softmax(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Gelu(a)
            | Op::LeakyRelu(a, _)
            | Op::MeanRows(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Log(a)
            | Op::LogSigmoid(a) => self.rg(*a),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var, op: Primitive) -> Result<(usize, usize), NumericsError> {
        self.nodes[v.0].value.dims2(op.name())
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Reads a trainable parameter. Repeated reads of the same id share one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.dims(a, Primitive::MatMul)?;
        let (k2, n) = self.dims(b, Primitive::MatMul)?;
        if k != k2 {
            return Err(shape_err(Primitive::MatMul, format!("({m}x{k}) * ({k2}x{n})")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b)))
    }

    fn broadcast_kind(&self, a: Var, b: Var, op: Primitive) -> Result<Broadcast, NumericsError> {
        let (ar, ac) = self.dims(a, op)?;
        let (br, bc) = self.dims(b, op)?;
        Ok(if (ar, ac) == (br, bc) {
            Broadcast::Same
        } else if (br, bc) == (1, 1) {
            Broadcast::Scalar
        } else if br == 1 && bc == ac {
            Broadcast::Row
        } else if bc == 1 && br == ar {
            Broadcast::Col
        } else {
            return Err(shape_err(op, format!("cannot broadcast ({br}x{bc}) onto ({ar}x{ac})")));
        })
    }

    fn elementwise2(&mut self, a: Var, b: Var, prim: Primitive, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, Broadcast), NumericsError> {
        let kind = self.broadcast_kind(a, b, prim)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let cols = av.cols();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match kind {
                    Broadcast::Same => bv[i],
                    Broadcast::Row => bv[i % cols],
                    Broadcast::Col => bv[i / cols],
                    Broadcast::Scalar => bv[0],
                };
                f(x, y)
            })
            .collect();
        Ok((Tensor::matrix(av.rows(), cols, data), kind))
    }

    /// `a + b`, with `b` optionally a row vector, column vector or scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (value, kind) = self.elementwise2(a, b, Primitive::Add, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b, kind)))
    }

    /// Elementwise `a * b`, broadcasting `b` like [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (value, kind) = self.elementwise2(a, b, Primitive::Mul, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b, kind)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = T::of(factor);
        let value = self.value(a).map(|x| x * f);
        self.push(value, Op::Scale(a, f))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        self.concat(parts, Axis::Rows)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        self.concat(parts, Axis::Cols)
    }

    fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var, NumericsError> {
        let op = Primitive::Concat;
        if parts.is_empty() {
            return Err(shape_err(op, "no inputs".into()));
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.dims(p, op)).collect::<Result<_, _>>()?;
        let value = match axis {
            Axis::Rows => {
                let cols = dims[0].1;
                if let Some(bad) = dims.iter().find(|d| d.1 != cols) {
                    return Err(shape_err(op, format!("row concat of width {} with width {cols}", bad.1)));
                }
                let rows = dims.iter().map(|d| d.0).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::matrix(rows, cols, data)
            }
            Axis::Cols => {
                let rows = dims[0].0;
                if let Some(bad) = dims.iter().find(|d| d.0 != rows) {
                    return Err(shape_err(op, format!("column concat of height {} with height {rows}", bad.0)));
                }
                let cols: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row_slice(r));
                    }
                }
                Tensor::matrix(rows, cols, data)
            }
        };
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let (r, c) = self.dims(a, Primitive::Slice)?;
        if start > end || end > r {
            return Err(shape_err(Primitive::Slice, format!("rows {start}..{end} of {r}")));
        }
        let data = self.value(a).data()[start * c..end * c].to_vec();
        Ok(self.push(Tensor::matrix(end - start, c, data), Op::Slice(a, Axis::Rows, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let (r, c) = self.dims(a, Primitive::Slice)?;
        if start > end || end > c {
            return Err(shape_err(Primitive::Slice, format!("cols {start}..{end} of {c}")));
        }
        let av = self.value(a);
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&av.row_slice(i)[start..end]);
        }
        Ok(self.push(Tensor::matrix(r, end - start, data), Op::Slice(a, Axis::Cols, start)))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, indices: impl Into<Rc<[usize]>>) -> Result<Var, NumericsError> {
        let indices: Rc<[usize]> = indices.into();
        let (r, c) = self.dims(a, Primitive::Gather)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(shape_err(Primitive::Gather, format!("row {bad} of {r}")));
        }
        let av = self.value(a);
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices.iter() {
            data.extend_from_slice(av.row_slice(i));
        }
        let value = Tensor::matrix(indices.len(), c, data);
        Ok(self.push(value, Op::Gather(a, indices)))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, NumericsError> {
        let value = self.value(a).clone().reshaped(vec![rows, cols])?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.dims(a, Primitive::Transpose)?;
        let value = self.value(a).transposed();
        Ok(self.push(value, Op::Transpose(a)))
    }

    /// Softmax over the last axis (each row sums to one).
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (r, c) = self.dims(a, Primitive::Softmax)?;
        if c == 0 {
            return Err(shape_err(Primitive::Softmax, "softmax over empty axis".into()));
        }
        let av = self.value(a);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = av.row_slice(i);
            let mx = row.iter().copied().fold(row[0], T::max);
            let start = data.len();
            let mut z = T::zero();
            for &x in row {
                let e = (x - mx).exp();
                z += e;
                data.push(e);
            }
            for e in &mut data[start..] {
                *e = *e / z;
            }
        }
        Ok(self.push(Tensor::matrix(r, c, data), Op::Softmax(a)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::of(slope);
        self.unary(a, move |x| if x > T::zero() { x } else { s * x }, Op::LeakyRelu(a, s))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    /// Numerically stable `log(sigmoid(a))`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, log_sigmoid, Op::LogSigmoid(a))
    }

    /// Row-wise layer normalisation with a `(1 x n)` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumericsError> {
        let op = Primitive::LayerNorm;
        let (r, c) = self.dims(x, op)?;
        for p in [gain, bias] {
            if self.dims(p, op)? != (1, c) {
                return Err(shape_err(op, format!("gain/bias must be (1x{c}), got {:?}", self.shape(p))));
            }
        }
        let eps = T::of(eps);
        let n = T::of(c as f64);
        let xv = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = xv.row_slice(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        Ok(self.push(Tensor::matrix(r, c, out), Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    /// Mean over rows, giving a `(1 x cols)` row vector.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (r, c) = self.dims(a, Primitive::Mean)?;
        if r == 0 {
            return Err(shape_err(Primitive::Mean, "mean over zero rows".into()));
        }
        let av = self.value(a);
        let inv = T::one() / T::of(r as f64);
        let mut data = vec![T::zero(); c];
        for i in 0..r {
            for (o, &x) in data.iter_mut().zip(av.row_slice(i)) {
                *o += x;
            }
        }
        data.iter_mut().for_each(|x| *x *= inv);
        Ok(self.push(Tensor::row(data), Op::MeanRows(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(shape_err(Primitive::Mean, "mean of empty tensor".into()));
        }
        let s = self.value(a).data().iter().copied().sum::<T>() / T::of(n as f64);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a)))
    }

    /// Runs reverse-mode differentiation from the scalar `loss`, adding
    /// parameter gradients into `store`. Returns the loss value.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<T, NumericsError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(mut g) = grads[idx].take() else { continue };
            if let (Some(bad), Some(p)) = (self.corrupted, node.op.primitive()) {
                if bad == p {
                    let k = T::of(1.5);
                    g.data_mut().iter_mut().for_each(|x| *x *= k);
                }
            }
            self.backprop_node(node, &g, &mut grads, store);
        }
        Ok(lv.item())
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>], store: &mut ParamStore<T>) {
        let gd = g.data();
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => store.accumulate_grad(*id, g),
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                if self.rg(*a) {
                    let ga = self.grad_slot(grads, *a);
                    gemm_nt_acc(gd, bv.data(), ga.data_mut(), m, n, k);
                }
                if self.rg(*b) {
                    let gb = self.grad_slot(grads, *b);
                    gemm_tn_acc(av.data(), gd, gb.data_mut(), m, k, n);
                }
            }
            Op::Add(a, b, kind) => {
                if self.rg(*a) {
                    add_into(self.grad_slot(grads, *a).data_mut(), gd);
                }
                if self.rg(*b) {
                    let cols = g.cols();
                    let gb = self.grad_slot(grads, *b);
                    reduce_broadcast(gb.data_mut(), gd, *kind, cols, |x, _| x);
                }
            }
            Op::Mul(a, b, kind) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let cols = g.cols();
                if self.rg(*a) {
                    let ga = self.grad_slot(grads, *a).data_mut();
                    for (i, (o, &d)) in ga.iter_mut().zip(gd).enumerate() {
                        *o += d * bv[broadcast_index(*kind, i, cols)];
                    }
                }
                if self.rg(*b) {
                    let gb = self.grad_slot(grads, *b);
                    reduce_broadcast(gb.data_mut(), gd, *kind, cols, |d, i| d * av[i]);
                }
            }
            Op::Scale(a, f) => {
                let ga = self.grad_slot(grads, *a).data_mut();
                for (o, &d) in ga.iter_mut().zip(gd) {
                    *o += d * *f;
                }
            }
            Op::Concat(parts, axis) => {
                let total_cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.shape(p);
                    if self.rg(p) {
                        let gp = self.grad_slot(grads, p).data_mut();
                        match axis {
                            Axis::Rows => add_into(gp, &gd[offset * total_cols..(offset + pr) * total_cols]),
                            Axis::Cols => {
                                for r in 0..pr {
                                    let src = &gd[r * total_cols + offset..r * total_cols + offset + pc];
                                    add_into(&mut gp[r * pc..(r + 1) * pc], src);
                                }
                            }
                        }
                    }
                    offset += match axis {
                        Axis::Rows => pr,
                        Axis::Cols => pc,
                    };
                }
            }
            Op::Slice(a, axis, start) => {
                let (_, ac) = self.shape(*a);
                let ga = self.grad_slot(grads, *a).data_mut();
                match axis {
                    Axis::Rows => add_into(&mut ga[start * ac..start * ac + gd.len()], gd),
                    Axis::Cols => {
                        let w = g.cols();
                        for r in 0..g.rows() {
                            add_into(&mut ga[r * ac + start..r * ac + start + w], &gd[r * w..(r + 1) * w]);
                        }
                    }
                }
            }
            Op::Gather(a, indices) => {
                let c = g.cols();
                let ga = self.grad_slot(grads, *a).data_mut();
                for (r, &i) in indices.iter().enumerate() {
                    add_into(&mut ga[i * c..(i + 1) * c], &gd[r * c..(r + 1) * c]);
                }
            }
            Op::Reshape(a) => add_into(self.grad_slot(grads, *a).data_mut(), gd),
            Op::Transpose(a) => {
                let gt = g.transposed();
                add_into(self.grad_slot(grads, *a).data_mut(), gt.data());
            }
            Op::Softmax(a) => {
                let c = g.cols();
                let ga = self.grad_slot(grads, *a).data_mut();
                for r in 0..g.rows() {
                    let y = &out.data()[r * c..(r + 1) * c];
                    let dy = &gd[r * c..(r + 1) * c];
                    let dot: T = y.iter().zip(dy).map(|(&p, &q)| p * q).sum();
                    for j in 0..c {
                        ga[r * c + j] += y[j] * (dy[j] - dot);
                    }
                }
            }
            Op::Sigmoid(a) => {
                self.unary_back(grads, *a, gd, |i, _| {
                    let s = out.data()[i];
                    s * (T::one() - s)
                });
            }
            Op::Tanh(a) => {
                self.unary_back(grads, *a, gd, |i, _| {
                    let t = out.data()[i];
                    T::one() - t * t
                });
            }
            Op::Gelu(a) => self.unary_back(grads, *a, gd, |_, x| gelu_grad(x)),
            Op::LeakyRelu(a, s) => self.unary_back(grads, *a, gd, |_, x| if x > T::zero() { T::one() } else { *s }),
            Op::Log(a) => self.unary_back(grads, *a, gd, |_, x| T::one() / x),
            Op::LogSigmoid(a) => self.unary_back(grads, *a, gd, |_, x| sigmoid(-x)),
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let c = g.cols();
                let n = T::of(c as f64);
                let gv = self.value(*gain).data().to_vec();
                if self.rg(*gain) {
                    let gg = self.grad_slot(grads, *gain).data_mut();
                    for (i, &d) in gd.iter().enumerate() {
                        gg[i % c] += d * xhat[i];
                    }
                }
                if self.rg(*bias) {
                    let gb = self.grad_slot(grads, *bias).data_mut();
                    for (i, &d) in gd.iter().enumerate() {
                        gb[i % c] += d;
                    }
                }
                if self.rg(*x) {
                    let gx = self.grad_slot(grads, *x).data_mut();
                    for r in 0..g.rows() {
                        let dy = &gd[r * c..(r + 1) * c];
                        let xh = &xhat[r * c..(r + 1) * c];
                        let dxh: Vec<T> = dy.iter().zip(&gv).map(|(&d, &w)| d * w).collect();
                        let mean_d = dxh.iter().copied().sum::<T>() / n;
                        let mean_dx = dxh.iter().zip(xh).map(|(&d, &h)| d * h).sum::<T>() / n;
                        for j in 0..c {
                            gx[r * c + j] += inv_std[r] * (dxh[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::MeanRows(a) => {
                let (r, c) = self.shape(*a);
                let inv = T::one() / T::of(r as f64);
                let ga = self.grad_slot(grads, *a).data_mut();
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += gd[j] * inv;
                    }
                }
            }
            Op::Sum(a) => {
                let d = gd[0];
                self.grad_slot(grads, *a).data_mut().iter_mut().for_each(|o| *o += d);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let d = gd[0] / T::of(n as f64);
                self.grad_slot(grads, *a).data_mut().iter_mut().for_each(|o| *o += d);
            }
        }
    }

    fn unary_back(&self, grads: &mut [Option<Tensor<T>>], a: Var, gd: &[T], deriv: impl Fn(usize, T) -> T) {
        let xs = self.value(a).data();
        let ga = self.grad_slot(grads, a).data_mut();
        for (i, ((o, &d), &x)) in ga.iter_mut().zip(gd).zip(xs).enumerate() {
            *o += d * deriv(i, x);
        }
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> &'g mut Tensor<T> {
        grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }
}

#[inline]
fn broadcast_index(kind: Broadcast, i: usize, cols: usize) -> usize {
    match kind {
        Broadcast::Same => i,
        Broadcast::Row => i % cols,
        Broadcast::Col => i / cols,
        Broadcast::Scalar => 0,
    }
}

fn reduce_broadcast<T: Real>(dst: &mut [T], gd: &[T], kind: Broadcast, cols: usize, f: impl Fn(T, usize) -> T) {
    for (i, &d) in gd.iter().enumerate() {
        dst[broadcast_index(kind, i, cols)] += f(d, i);
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (o, &s) in dst.iter_mut().zip(src) {
        *o += s;
    }
}

/// Builds a loss with `build`, backpropagates it, and returns the loss value.
/// Gradients are accumulated on top of whatever the store already holds.
pub fn forward_backward<T: Real>(
    store: &mut ParamStore<T>,
    build: impl FnOnce(&mut Graph<T>, &ParamStore<T>) -> Result<Var, NumericsError>,
) -> Result<T, NumericsError> {
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    g.backward(loss, store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor<f64>) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert(name, t).unwrap();
        (s, id)
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let (mut s, id) = store_with("w", Tensor::from_f64(2, 2, &[1.0, -2.0, 3.0, 0.5]));
        let loss = forward_backward(&mut s, |g, st| {
            let w = g.param(st, id);
            Ok(g.sum(w))
        })
        .unwrap();
        assert_eq!(loss, 2.5);
        assert_eq!(s.grad(id).data(), &[1.0; 4]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let (mut s, id) = store_with("x", Tensor::scalar(0.0));
        let loss = forward_backward(&mut s, |g, st| {
            let x = g.param(st, id);
            Ok(g.sigmoid(x))
        })
        .unwrap();
        assert_eq!(loss, 0.5);
        assert_eq!(s.grad(id).item(), 0.25);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let (mut s, id) = store_with("w", Tensor::zeros(&[2, 2]));
        let err = forward_backward(&mut s, |g, st| Ok(g.param(st, id))).unwrap_err();
        assert!(matches!(err, NumericsError::NonScalarLoss(_)));
    }

    #[test]
    fn shape_errors_name_the_operation() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(g.matmul(a, b).unwrap_err().to_string().contains("matmul"));
        let c = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.add(a, c).unwrap_err().to_string().contains("add"));
        assert!(g.concat_cols(&[a, c]).unwrap_err().to_string().contains("concat"));
        assert!(g.slice_rows(a, 1, 5).unwrap_err().to_string().contains("slice"));
        assert!(g.gather_rows(a, vec![0, 2]).unwrap_err().to_string().contains("gather"));
    }

    #[test]
    fn softmax_rows_normalise_and_shift_invariant() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(2, 3, &[1.0, 2.0, 3.0, -5.0, 0.0, 700.0]));
        let y = g.softmax_rows(x).unwrap();
        for r in 0..2 {
            let s: f64 = g.value(y).row_slice(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let shifted = g.constant(Tensor::from_f64(2, 3, &[101.0, 102.0, 103.0, 95.0, 100.0, 800.0]));
        let y2 = g.softmax_rows(shifted).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(y2)) < 1e-9);
    }

    #[test]
    fn log_sigmoid_is_stable_for_large_inputs() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::row(vec![-800.0, 0.0, 800.0]));
        let y = g.log_sigmoid(x);
        let v = g.value(y).data();
        assert_eq!(v[0], -800.0);
        assert!((v[1] + std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(v[2], 0.0);
    }

    #[test]
    fn constants_receive_no_gradient_work() {
        let (mut s, id) = store_with("w", Tensor::from_f64(1, 2, &[1.0, 2.0]));
        let mut g = Graph::new();
        let c = g.constant(Tensor::from_f64(1, 2, &[3.0, 4.0]));
        let cc = g.mul(c, c).unwrap();
        let w = g.param(&s, id);
        let y = g.mul(w, cc).unwrap();
        let l = g.sum(y);
        g.backward(l, &mut s).unwrap();
        assert_eq!(s.grad(id).data(), &[9.0, 16.0]);
    }

    #[test]
    fn repeated_param_reads_share_a_node() {
        let (s, id) = store_with("w", Tensor::zeros(&[1, 1]));
        let mut g = Graph::new();
        let a = g.param(&s, id);
        let b = g.param(&s, id);
        assert_eq!(a, b);
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn primitive_names_round_trip() {
        for p in Primitive::ALL {
            assert_eq!(Primitive::from_name(p.name()), Some(p));
        }
    }
}
