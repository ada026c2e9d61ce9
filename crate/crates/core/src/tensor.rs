//! Dense `f64` tensors and a define-by-run reverse-mode tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Each
//! node stores its forward value and the indices of its inputs, so the tape
//! order is already topological and [`Var::backward`] walks it once in
//! reverse. Broadcasting is limited to single-element operands; every other
//! shape change goes through explicit [`Var::reshape`] / [`Var::transpose`].

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: argument {value} outside the domain")]
    Domain { op: &'static str, value: f64 },
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("shape {shape:?} does not describe {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("row index {index} out of range for {rows} rows")]
    RowIndex { index: usize, rows: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense array. A rank-0 tensor (empty shape) holds one scalar.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Builds a matrix from row slices; panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.data.len(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        };
        let (m, k) = self.matrix_dims("matmul").map_err(|_| mismatch())?;
        let (k2, n) = other.matrix_dims("matmul").map_err(|_| mismatch())?;
        if k != k2 {
            return Err(mismatch());
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, b) in row.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transposed(&self) -> Result<Tensor> {
        let (r, c) = self.matrix_dims("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    /// `self += alpha * other`, shapes must agree.
    pub fn add_scaled(&mut self, other: &Tensor, alpha: f64) {
        assert_eq!(self.shape, other.shape, "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and matching NaN payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

type UnaryFn = Rc<dyn Fn(f64) -> f64>;

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sigmoid(usize),
    Log(usize),
    Exp(usize),
    Tanh(usize),
    Softplus(usize),
    Pow(usize, f64),
    Softmax(usize),
    Sum(usize, Option<usize>),
    Mean(usize, Option<usize>),
    Transpose(usize),
    Reshape(usize),
    SelectRows(usize, Rc<[usize]>),
    Custom(usize, UnaryFn),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass; rebuilt every step.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that receives a gradient from [`Var::backward`].
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }
}

/// Gradients produced by one backward pass, indexed by tape position.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.id]),
        }
    }

    /// True when some gradient actually reached `var`.
    pub fn reached(&self, var: Var<'_>) -> bool {
        self.grads[var.id].is_some()
    }
}

fn accumulate(slot: &mut Option<Tensor>, contribution: Tensor) {
    match slot {
        Some(existing) => existing.add_scaled(&contribution, 1.0),
        None => *slot = Some(contribution),
    }
}

/// Shape of a binary elementwise result; single-element operands broadcast.
fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape == b.shape || b.numel() == 1 {
        Ok(a.shape.clone())
    } else if a.numel() == 1 {
        Ok(b.shape.clone())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        })
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|i| {
            let x = if a.numel() == 1 { a.data[0] } else { a.data[i] };
            let y = if b.numel() == 1 { b.data[0] } else { b.data[i] };
            f(x, y)
        })
        .collect();
    Tensor { shape, data }
}

/// Folds an upstream gradient back onto an operand that may have been broadcast.
fn unbroadcast(grad: Vec<f64>, operand: &Tensor) -> Tensor {
    if operand.numel() == grad.len() {
        Tensor {
            shape: operand.shape.clone(),
            data: grad,
        }
    } else {
        Tensor {
            shape: operand.shape.clone(),
            data: vec![grad.iter().sum()],
        }
    }
}

/// (outer, axis length, inner) decomposition used by axis reductions.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape.clone()
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn unary(&self, op: Op, value: Tensor) -> Var<'t> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: Var<'t>, op: Op, value: Tensor) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().matmul(&other.value())?;
        Ok(self.binary(other, Op::MatMul(self.id, other.id), out))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape("add", &a, &b)?;
        let out = zip_broadcast(&a, &b, shape, |x, y| x + y);
        Ok(self.binary(other, Op::Add(self.id, other.id), out))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape("sub", &a, &b)?;
        let out = zip_broadcast(&a, &b, shape, |x, y| x - y);
        Ok(self.binary(other, Op::Sub(self.id, other.id), out))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape("mul", &a, &b)?;
        let out = zip_broadcast(&a, &b, shape, |x, y| x * y);
        Ok(self.binary(other, Op::Mul(self.id, other.id), out))
    }

    /// Elementwise quotient; a zero divisor is a domain error.
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape("div", &a, &b)?;
        if let Some(&z) = b.data.iter().find(|&&y| y == 0.0) {
            return Err(TensorError::Domain {
                op: "div",
                value: z,
            });
        }
        let out = zip_broadcast(&a, &b, shape, |x, y| x / y);
        Ok(self.binary(other, Op::Div(self.id, other.id), out))
    }

    pub fn neg(self) -> Var<'t> {
        let out = self.value().map(|x| -x);
        self.unary(Op::Neg(self.id), out)
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        let out = self.value().map(|x| x * factor);
        self.unary(Op::Scale(self.id, factor), out)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let out = self.value().map(|x| x + c);
        self.unary(Op::AddScalar(self.id), out)
    }

    pub fn sigmoid(self) -> Var<'t> {
        let out = self.value().map(sigmoid);
        self.unary(Op::Sigmoid(self.id), out)
    }

    /// Natural log; any non-positive entry is a domain error.
    pub fn log(self) -> Result<Var<'t>> {
        let v = self.value();
        if let Some(&bad) = v.data.iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(TensorError::Domain {
                op: "log",
                value: bad,
            });
        }
        let out = v.map(f64::ln);
        Ok(self.unary(Op::Log(self.id), out))
    }

    pub fn exp(self) -> Var<'t> {
        let out = self.value().map(f64::exp);
        self.unary(Op::Exp(self.id), out)
    }

    pub fn tanh(self) -> Var<'t> {
        let out = self.value().map(f64::tanh);
        self.unary(Op::Tanh(self.id), out)
    }

    pub fn softplus(self) -> Var<'t> {
        let out = self.value().map(softplus);
        self.unary(Op::Softplus(self.id), out)
    }

    /// `x^p`; negative bases need an integer exponent and zero needs `p >= 0`.
    pub fn pow(self, p: f64) -> Result<Var<'t>> {
        let v = self.value();
        let integral = p.fract() == 0.0;
        if let Some(&bad) = v
            .data
            .iter()
            .find(|&&x| (x < 0.0 && !integral) || (x == 0.0 && p < 0.0))
        {
            return Err(TensorError::Domain {
                op: "pow",
                value: bad,
            });
        }
        let out = v.map(|x| x.powf(p));
        Ok(self.unary(Op::Pow(self.id, p), out))
    }

    /// Softmax over the last axis, stabilised by subtracting the slice maximum.
    pub fn softmax(self) -> Var<'t> {
        let v = self.value();
        let n = *v.shape.last().unwrap_or(&1);
        let mut data = v.data.clone();
        for slice in data.chunks_mut(n) {
            let max = slice.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in slice.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in slice.iter_mut() {
                *x /= total;
            }
        }
        let out = Tensor {
            shape: v.shape.clone(),
            data,
        };
        self.unary(Op::Softmax(self.id), out)
    }

    fn reduce(self, axis: Option<usize>, mean: bool) -> Result<Var<'t>> {
        let v = self.value();
        let out = match axis {
            None => {
                let total: f64 = v.data.iter().sum();
                Tensor::scalar(if mean {
                    total / v.numel() as f64
                } else {
                    total
                })
            }
            Some(ax) => {
                if ax >= v.rank() {
                    return Err(TensorError::Axis {
                        axis: ax,
                        rank: v.rank(),
                    });
                }
                let (outer, len, inner) = axis_split(&v.shape, ax);
                let mut data = vec![0.0; outer * inner];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            data[o * inner + i] += v.data[(o * len + k) * inner + i];
                        }
                    }
                }
                if mean {
                    data.iter_mut().for_each(|x| *x /= len as f64);
                }
                let mut shape = v.shape.clone();
                shape.remove(ax);
                Tensor { shape, data }
            }
        };
        let op = if mean {
            Op::Mean(self.id, axis)
        } else {
            Op::Sum(self.id, axis)
        };
        Ok(self.unary(op, out))
    }

    /// Sum over `axis`, or over everything when `None`.
    pub fn sum(self, axis: Option<usize>) -> Result<Var<'t>> {
        self.reduce(axis, false)
    }

    pub fn mean(self, axis: Option<usize>) -> Result<Var<'t>> {
        self.reduce(axis, true)
    }

    pub fn sum_all(self) -> Var<'t> {
        self.reduce(None, false)
            .expect("full reduction has no axis")
    }

    pub fn mean_all(self) -> Var<'t> {
        self.reduce(None, true).expect("full reduction has no axis")
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let out = self.value().transposed()?;
        Ok(self.unary(Op::Transpose(self.id), out))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshaped(shape)?;
        Ok(self.unary(Op::Reshape(self.id), out))
    }

    /// Gathers rows of a matrix; indices may repeat.
    pub fn select_rows(self, indices: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let (rows, cols) = v.matrix_dims("select_rows")?;
        if indices.is_empty() {
            return Err(TensorError::InvalidShape {
                shape: vec![0, cols],
                len: 0,
            });
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &r in indices {
            if r >= rows {
                return Err(TensorError::RowIndex { index: r, rows });
            }
            data.extend_from_slice(&v.data[r * cols..(r + 1) * cols]);
        }
        let out = Tensor {
            shape: vec![indices.len(), cols],
            data,
        };
        Ok(self.unary(Op::SelectRows(self.id, indices.into()), out))
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn map_with_derivative(
        self,
        f: impl Fn(f64) -> f64,
        derivative: impl Fn(f64) -> f64 + 'static,
    ) -> Var<'t> {
        let out = self.value().map(f);
        self.unary(Op::Custom(self.id, Rc::new(derivative)), out)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(self) -> Result<Gradients> {
        let nodes = self.tape.nodes.borrow();
        let loss = &nodes[self.id].value;
        if loss.numel() != 1 {
            return Err(TensorError::NonScalar(loss.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[self.id] = Some(Tensor {
            shape: loss.shape.clone(),
            data: vec![1.0],
        });

        for id in (0..=self.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let out = &node.value;
            let val = |i: usize| &nodes[i].value;
            let wants = |i: usize| nodes[i].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if wants(*a) {
                        let da = g.matmul(&val(*b).transposed()?)?;
                        accumulate(&mut grads[*a], da);
                    }
                    if wants(*b) {
                        let db = val(*a).transposed()?.matmul(&g)?;
                        accumulate(&mut grads[*b], db);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) {
                        -1.0
                    } else {
                        1.0
                    };
                    if wants(*a) {
                        accumulate(&mut grads[*a], unbroadcast(g.data.clone(), val(*a)));
                    }
                    if wants(*b) {
                        let d = g.data.iter().map(|x| sign * x).collect();
                        accumulate(&mut grads[*b], unbroadcast(d, val(*b)));
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if wants(*a) {
                        let d = zip_broadcast(&g, bv, g.shape.clone(), |gi, y| gi * y);
                        accumulate(&mut grads[*a], unbroadcast(d.data, av));
                    }
                    if wants(*b) {
                        let d = zip_broadcast(&g, av, g.shape.clone(), |gi, x| gi * x);
                        accumulate(&mut grads[*b], unbroadcast(d.data, bv));
                    }
                }
                Op::Div(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if wants(*a) {
                        let d = zip_broadcast(&g, bv, g.shape.clone(), |gi, y| gi / y);
                        accumulate(&mut grads[*a], unbroadcast(d.data, av));
                    }
                    if wants(*b) {
                        // d(x/y)/dy = -out / y
                        let gq: Vec<f64> =
                            g.data.iter().zip(&out.data).map(|(gi, q)| gi * q).collect();
                        let gq = Tensor {
                            shape: g.shape.clone(),
                            data: gq,
                        };
                        let d = zip_broadcast(&gq, bv, g.shape.clone(), |x, y| -x / y);
                        accumulate(&mut grads[*b], unbroadcast(d.data, bv));
                    }
                }
                Op::Neg(a) => accumulate(&mut grads[*a], g.map(|x| -x)),
                Op::Scale(a, c) => accumulate(&mut grads[*a], g.map(|x| x * c)),
                Op::AddScalar(a) => accumulate(&mut grads[*a], g),
                Op::Sigmoid(a) => {
                    let d = pointwise(&g, out, |gi, s| gi * s * (1.0 - s));
                    accumulate(&mut grads[*a], d);
                }
                Op::Log(a) => accumulate(&mut grads[*a], pointwise(&g, val(*a), |gi, x| gi / x)),
                Op::Exp(a) => accumulate(&mut grads[*a], pointwise(&g, out, |gi, y| gi * y)),
                Op::Tanh(a) => accumulate(
                    &mut grads[*a],
                    pointwise(&g, out, |gi, y| gi * (1.0 - y * y)),
                ),
                Op::Softplus(a) => accumulate(
                    &mut grads[*a],
                    pointwise(&g, val(*a), |gi, x| gi * sigmoid(x)),
                ),
                Op::Pow(a, p) => {
                    let p = *p;
                    let d = pointwise(&g, val(*a), |gi, x| gi * p * x.powf(p - 1.0));
                    accumulate(&mut grads[*a], d);
                }
                Op::Custom(a, df) => {
                    let d = pointwise(&g, val(*a), |gi, x| gi * df(x));
                    accumulate(&mut grads[*a], d);
                }
                Op::Softmax(a) => {
                    let n = *out.shape.last().unwrap_or(&1);
                    let mut data = vec![0.0; g.numel()];
                    for ((dst, gs), ys) in data
                        .chunks_mut(n)
                        .zip(g.data.chunks(n))
                        .zip(out.data.chunks(n))
                    {
                        let inner: f64 = gs.iter().zip(ys).map(|(a, b)| a * b).sum();
                        for ((d, gi), y) in dst.iter_mut().zip(gs).zip(ys) {
                            *d = y * (gi - inner);
                        }
                    }
                    accumulate(
                        &mut grads[*a],
                        Tensor {
                            shape: out.shape.clone(),
                            data,
                        },
                    );
                }
                Op::Sum(a, axis) | Op::Mean(a, axis) => {
                    let mean = matches!(node.op, Op::Mean(..));
                    let input = val(*a);
                    let d = match axis {
                        None => {
                            let scale = if mean {
                                1.0 / input.numel() as f64
                            } else {
                                1.0
                            };
                            Tensor::full(&input.shape, g.data[0] * scale)
                        }
                        Some(ax) => {
                            let (outer, len, inner) = axis_split(&input.shape, *ax);
                            let scale = if mean { 1.0 / len as f64 } else { 1.0 };
                            let mut data = vec![0.0; input.numel()];
                            for o in 0..outer {
                                for k in 0..len {
                                    for i in 0..inner {
                                        data[(o * len + k) * inner + i] =
                                            g.data[o * inner + i] * scale;
                                    }
                                }
                            }
                            Tensor {
                                shape: input.shape.clone(),
                                data,
                            }
                        }
                    };
                    accumulate(&mut grads[*a], d);
                }
                Op::Transpose(a) => accumulate(&mut grads[*a], g.transposed()?),
                Op::Reshape(a) => {
                    let d = Tensor {
                        shape: val(*a).shape.clone(),
                        data: g.data,
                    };
                    accumulate(&mut grads[*a], d);
                }
                Op::SelectRows(a, indices) => {
                    let input = val(*a);
                    let cols = input.shape[1];
                    let mut data = vec![0.0; input.numel()];
                    for (k, &r) in indices.iter().enumerate() {
                        for c in 0..cols {
                            data[r * cols + c] += g.data[k * cols + c];
                        }
                    }
                    accumulate(
                        &mut grads[*a],
                        Tensor {
                            shape: input.shape.clone(),
                            data,
                        },
                    );
                }
            }
        }

        // Only leaves keep their gradient; intermediate slots were consumed above.
        let shapes = nodes.iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn pointwise(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: g.shape.clone(),
        data: g
            .data
            .iter()
            .zip(&x.data)
            .map(|(&gi, &xi)| f(gi, xi))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let i = tape.constant(Tensor::eye(2));
        assert_eq!(a.matmul(i).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);

        let v = tape.constant(Tensor::from_rows(&[&[5.0], &[7.0]]));
        let out = i.matmul(v).unwrap();
        assert_eq!(out.shape(), vec![2, 1]);
        assert_eq!(out.value().data(), &[5.0, 7.0]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn sigmoid_value_and_gradient_at_zero() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        let y = x.sigmoid();
        assert_eq!(y.item(), 0.5);
        let g = y.backward().unwrap();
        assert_eq!(g.wrt(x).item(), 0.25);
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new(vec![1], vec![3.0]).unwrap());
        let loss = x.mul(x).unwrap().sum_all();
        assert_eq!(loss.backward().unwrap().wrt(x).data(), &[6.0]);

        let tape = Tape::new();
        let w = tape.param(Tensor::scalar(2.0));
        let loss = w.pow(2.0).unwrap();
        assert_eq!(loss.backward().unwrap().wrt(w).item(), 4.0);
    }

    #[test]
    fn log_rejects_non_positive() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(
            x.log(),
            Err(TensorError::Domain { op: "log", .. })
        ));
        let y = tape.param(Tensor::scalar(-1.0));
        assert!(y.log().is_err());
        assert!(y.pow(0.5).is_err());
        assert!(y.pow(2.0).is_ok());
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        assert_eq!(x.softmax().value().data(), &[0.5, 0.5]);
        let big = tape.constant(Tensor::new(vec![2], vec![1000.0, 1000.0]).unwrap());
        assert_eq!(big.softmax().value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn reductions() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        assert_eq!(x.sum_all().item(), 6.0);
        let m = x.mean_all();
        assert_eq!(m.item(), 2.0);
        let g = m.backward().unwrap().wrt(x);
        assert!(g.data().iter().all(|&v| close(v, 1.0 / 3.0)));
    }

    #[test]
    fn axis_reductions_and_range_check() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        assert_eq!(x.sum(Some(0)).unwrap().value().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(x.mean(Some(1)).unwrap().value().data(), &[2.0, 5.0]);
        assert_eq!(
            x.sum(Some(2)).unwrap_err(),
            TensorError::Axis { axis: 2, rank: 2 }
        );
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert_eq!(
            x.scale(2.0).backward().unwrap_err(),
            TensorError::NonScalar(vec![2])
        );
    }

    #[test]
    fn disconnected_leaf_gets_zeros() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.5));
        let unused = tape.param(Tensor::zeros(&[2, 2]));
        let g = x.mul(x).unwrap().backward().unwrap();
        assert!(!g.reached(unused));
        assert_eq!(g.wrt(unused), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn frozen_leaf_receives_nothing() {
        let tape = Tape::new();
        let w = tape.param(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(3.0));
        let g = w.mul(c).unwrap().backward().unwrap();
        assert_eq!(g.wrt(w).item(), 3.0);
        assert!(!g.reached(c));
    }

    #[test]
    fn scalar_broadcast_gradient_sums() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let b = tape.param(Tensor::scalar(0.5));
        let g = x.add(b).unwrap().sum_all().backward().unwrap();
        assert_eq!(g.wrt(b).item(), 3.0);
        assert_eq!(g.wrt(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn select_rows_scatters_back() {
        let tape = Tape::new();
        let x = tape.param(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let y = x.select_rows(&[1, 1, 0]).unwrap();
        assert_eq!(y.value().data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let g = y.sum_all().backward().unwrap().wrt(x);
        assert_eq!(g.data(), &[1.0, 1.0, 2.0, 2.0]);
        assert!(matches!(
            x.select_rows(&[2]),
            Err(TensorError::RowIndex { index: 2, rows: 2 })
        ));
    }

    #[test]
    fn invalid_shapes_rejected() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(a.add(b).is_err());
        assert!(a.reshape(&[3]).is_err());
    }
}
