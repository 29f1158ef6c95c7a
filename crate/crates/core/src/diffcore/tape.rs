use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::conv::{self, ConvDims, ConvGeometry};
use super::element::{gemm, MatRef};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Elementwise binary operations between equally shaped tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Elementwise operations between a tensor and a constant scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Abs,
    Exp,
    Log,
    Square,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

/// Every differentiable primitive the tape knows about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    SubScalar,
    MulScalar,
    DivScalar,
    Abs,
    Exp,
    Log,
    Square,
    Sigmoid,
    LeakyRelu,
    Sum,
    Mean,
    Reshape,
    Linear,
    Conv2d,
    ConvTranspose2d,
}

impl Primitive {
    pub const ALL: [Primitive; 20] = [
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Div,
        Primitive::AddScalar,
        Primitive::SubScalar,
        Primitive::MulScalar,
        Primitive::DivScalar,
        Primitive::Abs,
        Primitive::Exp,
        Primitive::Log,
        Primitive::Square,
        Primitive::Sigmoid,
        Primitive::LeakyRelu,
        Primitive::Sum,
        Primitive::Mean,
        Primitive::Reshape,
        Primitive::Linear,
        Primitive::Conv2d,
        Primitive::ConvTranspose2d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::AddScalar => "add_scalar",
            Primitive::SubScalar => "sub_scalar",
            Primitive::MulScalar => "mul_scalar",
            Primitive::DivScalar => "div_scalar",
            Primitive::Abs => "abs",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Square => "square",
            Primitive::Sigmoid => "sigmoid",
            Primitive::LeakyRelu => "leaky_relu",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Reshape => "reshape",
            Primitive::Linear => "linear",
            Primitive::Conv2d => "conv2d",
            Primitive::ConvTranspose2d => "conv_transpose2d",
        }
    }

    pub fn from_name(name: &str) -> Option<Primitive> {
        Primitive::ALL.into_iter().find(|p| p.name() == name)
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op<T> {
    Leaf,
    Binary(BinaryOp, usize, usize),
    Scalar(ScalarOp, usize, T),
    Unary(UnaryOp, usize),
    LeakyRelu(usize, T),
    Reduce(ReduceOp, usize, Vec<bool>),
    Reshape(usize),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        dims: ConvDims,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        dims: ConvDims,
    },
}

impl<T> Op<T> {
    fn primitive(&self) -> Option<Primitive> {
        Some(match self {
            Op::Leaf => return None,
            Op::Binary(BinaryOp::Add, ..) => Primitive::Add,
            Op::Binary(BinaryOp::Sub, ..) => Primitive::Sub,
            Op::Binary(BinaryOp::Mul, ..) => Primitive::Mul,
            Op::Binary(BinaryOp::Div, ..) => Primitive::Div,
            Op::Scalar(ScalarOp::Add, ..) => Primitive::AddScalar,
            Op::Scalar(ScalarOp::Sub, ..) => Primitive::SubScalar,
            Op::Scalar(ScalarOp::Mul, ..) => Primitive::MulScalar,
            Op::Scalar(ScalarOp::Div, ..) => Primitive::DivScalar,
            Op::Unary(UnaryOp::Abs, _) => Primitive::Abs,
            Op::Unary(UnaryOp::Exp, _) => Primitive::Exp,
            Op::Unary(UnaryOp::Log, _) => Primitive::Log,
            Op::Unary(UnaryOp::Square, _) => Primitive::Square,
            Op::Unary(UnaryOp::Sigmoid, _) => Primitive::Sigmoid,
            Op::LeakyRelu(..) => Primitive::LeakyRelu,
            Op::Reduce(ReduceOp::Sum, ..) => Primitive::Sum,
            Op::Reduce(ReduceOp::Mean, ..) => Primitive::Mean,
            Op::Reshape(_) => Primitive::Reshape,
            Op::Linear { .. } => Primitive::Linear,
            Op::Conv2d { .. } => Primitive::Conv2d,
            Op::ConvTranspose2d { .. } => Primitive::ConvTranspose2d,
        })
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

struct Inner<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Define-by-run record of one forward pass.
///
/// Tensors enter through [`Tape::leaf`] or [`Tape::constant`]; every operation
/// on the returned [`Var`]s appends a node. [`Tape::backward`] replays the
/// nodes in reverse and may be called once.
pub struct Tape<T: Element = f32> {
    inner: RefCell<Inner<T>>,
    fault: Option<Primitive>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                consumed: false,
            }),
            fault: None,
        }
    }

    /// Tape whose adjoint rule for `primitive` is deliberately wrong.
    ///
    /// Only meant for checking that the gradient checker catches broken rules.
    #[doc(hidden)]
    pub fn with_adjoint_fault(primitive: Primitive) -> Self {
        Tape {
            fault: Some(primitive),
            ..Self::new()
        }
    }

    /// Register a tensor, optionally tracking its gradient.
    pub fn var(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Register a tensor whose gradient is wanted.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.var(value, true)
    }

    /// Register a tensor treated as a constant.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.var(value, false)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Smallest `|input|` over every recorded `abs` and `leaky_relu` node,
    /// i.e. the distance of this forward pass from a non-differentiable point.
    #[doc(hidden)]
    pub fn kink_margin(&self) -> Option<T> {
        let inner = self.inner.borrow();
        inner
            .nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Unary(UnaryOp::Abs, x) | Op::LeakyRelu(x, _) => Some(x),
                _ => None,
            })
            .flat_map(|x| inner.nodes[x].value.data().iter().map(|v| v.abs()))
            .reduce(|a, b| a.min(b))
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            op,
        });
        Var { tape: self, id }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.inner.borrow().nodes[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    /// Reverse-mode sweep seeded with `d loss / d loss = 1`.
    ///
    /// The returned [`Gradients`] hold an entry for every gradient-tracking
    /// leaf recorded on this tape, zero-filled when the loss does not depend
    /// on it.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::InvalidArgument(
                "loss variable belongs to a different tape".into(),
            ));
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::TapeConsumed);
        }
        let loss_shape = inner.nodes[loss.id].value.shape().to_vec();
        if inner.nodes[loss.id].value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        inner.consumed = true;
        let nodes = &inner.nodes;

        let mut adj: Vec<Option<Vec<T>>> = Vec::with_capacity(nodes.len());
        adj.resize_with(nodes.len(), || None);
        adj[loss.id] = Some(vec![T::one()]);
        let mut grads = HashMap::new();

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[id].take() else {
                if matches!(node.op, Op::Leaf) {
                    grads.insert(id, Tensor::zeros(node.value.shape().to_vec()));
                }
                continue;
            };
            let scale = match (self.fault, node.op.primitive()) {
                (Some(f), Some(p)) if f == p => Some(T::of(1.001)),
                _ => None,
            };
            let mut send = |target: usize, mut contrib: Vec<T>| {
                if !nodes[target].requires_grad {
                    return;
                }
                if let Some(s) = scale {
                    contrib.iter_mut().for_each(|v| *v = *v * s);
                }
                accumulate(&mut adj[target], contrib);
            };
            let val = |i: usize| nodes[i].value.data();
            match &node.op {
                Op::Leaf => {
                    grads.insert(id, Tensor::new(node.value.shape().to_vec(), g)?);
                }
                &Op::Binary(kind, a, b) => {
                    let (av, bv) = (val(a), val(b));
                    let (ga, gb): (Vec<T>, Vec<T>) = match kind {
                        BinaryOp::Add => (g.clone(), g),
                        BinaryOp::Sub => (g.clone(), g.iter().map(|&v| -v).collect()),
                        BinaryOp::Mul => (zip_map(&g, bv, |g, b| g * b), zip_map(&g, av, |g, a| g * a)),
                        BinaryOp::Div => (
                            zip_map(&g, bv, |g, b| g / b),
                            g.iter()
                                .zip(av.iter().zip(bv))
                                .map(|(&g, (&a, &b))| -g * a / (b * b))
                                .collect(),
                        ),
                    };
                    send(a, ga);
                    send(b, gb);
                }
                &Op::Scalar(kind, a, c) => {
                    let ga = match kind {
                        ScalarOp::Add | ScalarOp::Sub => g,
                        ScalarOp::Mul => g.iter().map(|&v| v * c).collect(),
                        ScalarOp::Div => g.iter().map(|&v| v / c).collect(),
                    };
                    send(a, ga);
                }
                &Op::Unary(kind, a) => {
                    let av = val(a);
                    let yv = node.value.data();
                    let ga = match kind {
                        UnaryOp::Abs => zip_map(&g, av, |g, a| {
                            if a > T::zero() {
                                g
                            } else if a < T::zero() {
                                -g
                            } else {
                                T::zero()
                            }
                        }),
                        UnaryOp::Exp => zip_map(&g, yv, |g, y| g * y),
                        UnaryOp::Log => zip_map(&g, av, |g, a| g / a),
                        UnaryOp::Square => zip_map(&g, av, |g, a| g * (a + a)),
                        UnaryOp::Sigmoid => zip_map(&g, yv, |g, y| g * y * (T::one() - y)),
                    };
                    send(a, ga);
                }
                &Op::LeakyRelu(a, slope) => {
                    let ga = zip_map(&g, val(a), |g, a| if a >= T::zero() { g } else { g * slope });
                    send(a, ga);
                }
                Op::Reduce(kind, a, reduced) => {
                    let in_shape = nodes[*a].value.shape();
                    let mut ga = broadcast_back(&g, in_shape, reduced);
                    if *kind == ReduceOp::Mean {
                        let count = reduced_count(in_shape, reduced);
                        let c = T::of(count as f64);
                        ga.iter_mut().for_each(|v| *v = *v / c);
                    }
                    send(*a, ga);
                }
                &Op::Reshape(a) => send(a, g),
                &Op::Linear { x, w, b } => {
                    let (xs, ws) = (nodes[x].value.shape(), nodes[w].value.shape());
                    let (n, fin, fout) = (xs[0], xs[1], ws[0]);
                    if nodes[x].requires_grad {
                        let mut gx = vec![T::zero(); n * fin];
                        gemm(MatRef::rows(&g, n, fout), MatRef::rows(val(w), fout, fin), T::zero(), &mut gx);
                        send(x, gx);
                    }
                    if nodes[w].requires_grad {
                        let mut gw = vec![T::zero(); fout * fin];
                        gemm(MatRef::rows(&g, n, fout).t(), MatRef::rows(val(x), n, fin), T::zero(), &mut gw);
                        send(w, gw);
                    }
                    if let Some(b) = b {
                        send(b, conv::channel_sum(&g, n, fout, 1));
                    }
                }
                &Op::Conv2d { x, w, b, dims } => {
                    if nodes[x].requires_grad {
                        send(x, conv::conv2d_input_adjoint(&g, val(w), &dims));
                    }
                    if nodes[w].requires_grad {
                        send(w, conv::conv2d_weight_adjoint(val(x), &g, &dims));
                    }
                    if let Some(b) = b {
                        send(b, conv::channel_sum(&g, dims.n, dims.c_out, dims.oh * dims.ow));
                    }
                }
                &Op::ConvTranspose2d { x, w, b, dims } => {
                    if nodes[x].requires_grad {
                        send(x, conv::conv2d_forward(&g, val(w), None, &dims));
                    }
                    if nodes[w].requires_grad {
                        send(w, conv::conv2d_weight_adjoint(&g, val(x), &dims));
                    }
                    if let Some(b) = b {
                        send(b, conv::channel_sum(&g, dims.n, dims.c_in, dims.h * dims.w));
                    }
                }
            }
        }
        // Leaves recorded after the loss cannot influence it.
        for (id, node) in nodes.iter().enumerate().skip(loss.id + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                grads.insert(id, Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Element>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a = *a + c),
        None => *slot = Some(contrib),
    }
}

fn zip_map<T: Element>(g: &[T], other: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    g.iter().zip(other).map(|(&g, &o)| f(g, o)).collect()
}

/// Output stride contributed by each input axis; zero for reduced axes.
fn reduce_strides(shape: &[usize], reduced: &[bool]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        if !reduced[d] {
            strides[d] = acc;
            acc *= shape[d];
        }
    }
    strides
}

fn reduced_count(shape: &[usize], reduced: &[bool]) -> usize {
    shape.iter().zip(reduced).filter(|(_, &r)| r).map(|(&s, _)| s).product()
}

/// Visit every input flat index together with its reduced output index.
fn for_each_reduced(shape: &[usize], reduced: &[bool], mut f: impl FnMut(usize, usize)) {
    let numel: usize = shape.iter().product();
    if numel == 0 {
        return;
    }
    let strides = reduce_strides(shape, reduced);
    let mut idx = vec![0usize; shape.len()];
    let mut out = 0usize;
    for flat in 0..numel {
        f(flat, out);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            out += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            out -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

fn reduce_sum<T: Element>(data: &[T], shape: &[usize], reduced: &[bool]) -> Vec<T> {
    let out_len: usize = shape
        .iter()
        .zip(reduced)
        .filter(|(_, &r)| !r)
        .map(|(&s, _)| s)
        .product();
    let mut out = vec![T::zero(); out_len];
    for_each_reduced(shape, reduced, |i, o| out[o] = out[o] + data[i]);
    out
}

fn broadcast_back<T: Element>(g: &[T], shape: &[usize], reduced: &[bool]) -> Vec<T> {
    let mut out = vec![T::zero(); shape.iter().product()];
    for_each_reduced(shape, reduced, |i, o| out[i] = g[o]);
    out
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Element = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Element> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> Result<T> {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn same_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::InvalidArgument("operands live on different tapes".into()))
        }
    }

    fn record(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'t, T> {
        let rg = inputs.iter().any(|&i| self.tape.requires_grad(i));
        self.tape.push(value, op, rg)
    }

    pub fn binary(&self, kind: BinaryOp, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: match kind {
                    BinaryOp::Add => "add",
                    BinaryOp::Sub => "sub",
                    BinaryOp::Mul => "mul",
                    BinaryOp::Div => "div",
                },
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let f: fn(T, T) -> T = match kind {
            BinaryOp::Add => |x, y| x + y,
            BinaryOp::Sub => |x, y| x - y,
            BinaryOp::Mul => |x, y| x * y,
            BinaryOp::Div => |x, y| x / y,
        };
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.record(out, Op::Binary(kind, self.id, other.id), &[self.id, other.id]))
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(BinaryOp::Add, other)
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(BinaryOp::Sub, other)
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(BinaryOp::Mul, other)
    }

    pub fn div(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(BinaryOp::Div, other)
    }

    pub fn scalar_op(&self, kind: ScalarOp, c: T) -> Var<'t, T> {
        let f: Box<dyn Fn(T) -> T> = match kind {
            ScalarOp::Add => Box::new(move |x| x + c),
            ScalarOp::Sub => Box::new(move |x| x - c),
            ScalarOp::Mul => Box::new(move |x| x * c),
            ScalarOp::Div => Box::new(move |x| x / c),
        };
        let out = self.value().map(f);
        self.record(out, Op::Scalar(kind, self.id, c), &[self.id])
    }

    pub fn add_scalar(&self, c: T) -> Var<'t, T> {
        self.scalar_op(ScalarOp::Add, c)
    }

    pub fn sub_scalar(&self, c: T) -> Var<'t, T> {
        self.scalar_op(ScalarOp::Sub, c)
    }

    pub fn mul_scalar(&self, c: T) -> Var<'t, T> {
        self.scalar_op(ScalarOp::Mul, c)
    }

    pub fn div_scalar(&self, c: T) -> Var<'t, T> {
        self.scalar_op(ScalarOp::Div, c)
    }

    pub fn unary(&self, kind: UnaryOp) -> Var<'t, T> {
        let f: fn(T) -> T = match kind {
            UnaryOp::Abs => |x| x.abs(),
            UnaryOp::Exp => |x| x.exp(),
            UnaryOp::Log => |x| x.ln(),
            UnaryOp::Square => |x| x * x,
            UnaryOp::Sigmoid => sigmoid,
        };
        let out = self.value().map(f);
        self.record(out, Op::Unary(kind, self.id), &[self.id])
    }

    pub fn abs(&self) -> Var<'t, T> {
        self.unary(UnaryOp::Abs)
    }

    pub fn exp(&self) -> Var<'t, T> {
        self.unary(UnaryOp::Exp)
    }

    pub fn log(&self) -> Var<'t, T> {
        self.unary(UnaryOp::Log)
    }

    pub fn square(&self) -> Var<'t, T> {
        self.unary(UnaryOp::Square)
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        self.unary(UnaryOp::Sigmoid)
    }

    /// `x` where `x >= 0`, `slope * x` elsewhere. The derivative at 0 is 1.
    pub fn leaky_relu(&self, slope: T) -> Var<'t, T> {
        let out = self
            .value()
            .map(|x| if x >= T::zero() { x } else { slope * x });
        self.record(out, Op::LeakyRelu(self.id, slope), &[self.id])
    }

    /// Reduce over `axes`, dropping them from the shape.
    pub fn reduce(&self, kind: ReduceOp, axes: &[usize]) -> Result<Var<'t, T>> {
        let a = self.value();
        let rank = a.rank();
        let mut reduced = vec![false; rank];
        for &axis in axes {
            if axis >= rank || reduced[axis] {
                return Err(Error::InvalidAxis { axis, rank });
            }
            reduced[axis] = true;
        }
        let mut data = reduce_sum(a.data(), a.shape(), &reduced);
        if kind == ReduceOp::Mean {
            let c = T::of(reduced_count(a.shape(), &reduced) as f64);
            data.iter_mut().for_each(|v| *v = *v / c);
        }
        let shape: Vec<usize> = a
            .shape()
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&s, _)| s)
            .collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.record(out, Op::Reduce(kind, self.id, reduced), &[self.id]))
    }

    pub fn sum(&self, axes: &[usize]) -> Result<Var<'t, T>> {
        self.reduce(ReduceOp::Sum, axes)
    }

    pub fn mean(&self, axes: &[usize]) -> Result<Var<'t, T>> {
        self.reduce(ReduceOp::Mean, axes)
    }

    pub fn sum_all(&self) -> Var<'t, T> {
        let axes: Vec<usize> = (0..self.value().rank()).collect();
        self.sum(&axes).expect("all axes are valid")
    }

    pub fn mean_all(&self) -> Var<'t, T> {
        let axes: Vec<usize> = (0..self.value().rank()).collect();
        self.mean(&axes).expect("all axes are valid")
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = (*self.value()).clone().reshape(shape.to_vec())?;
        Ok(self.record(out, Op::Reshape(self.id), &[self.id]))
    }

    /// Affine map `x w^T + b` with `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&self, w: &Var<'t, T>, b: Option<&Var<'t, T>>) -> Result<Var<'t, T>> {
        self.same_tape(w)?;
        let (x, wv) = (self.value(), w.value());
        let (xs, ws) = (x.shape(), wv.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: xs.to_vec(),
                right: ws.to_vec(),
            });
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut y = vec![T::zero(); n * fout];
        gemm(MatRef::rows(x.data(), n, fin), MatRef::rows(wv.data(), fout, fin).t(), T::zero(), &mut y);
        let mut inputs = vec![self.id, w.id];
        if let Some(b) = b {
            self.same_tape(b)?;
            let bv = b.value();
            if bv.shape() != [fout] {
                return Err(Error::ShapeMismatch {
                    op: "linear (bias)",
                    left: vec![fout],
                    right: bv.shape().to_vec(),
                });
            }
            for row in y.chunks_mut(fout) {
                row.iter_mut().zip(bv.data()).for_each(|(v, &bb)| *v = *v + bb);
            }
            inputs.push(b.id);
        }
        let out = Tensor::new(vec![n, fout], y)?;
        let op = Op::Linear {
            x: self.id,
            w: w.id,
            b: b.map(|b| b.id),
        };
        Ok(self.record(out, op, &inputs))
    }

    fn check_bias(&self, b: Option<&Var<'t, T>>, channels: usize, op: &'static str) -> Result<()> {
        if let Some(b) = b {
            self.same_tape(b)?;
            let shape = b.shape();
            if shape != [channels] {
                return Err(Error::ShapeMismatch {
                    op,
                    left: vec![channels],
                    right: shape,
                });
            }
        }
        Ok(())
    }

    /// Cross-correlation, `self: [N, C_in, H, W]`, `w: [C_out, C_in, k, k]`.
    pub fn conv2d(&self, w: &Var<'t, T>, b: Option<&Var<'t, T>>, geom: ConvGeometry) -> Result<Var<'t, T>> {
        self.same_tape(w)?;
        let (x, wv) = (self.value(), w.value());
        let dims = ConvDims::conv2d(x.shape(), wv.shape(), geom)?;
        self.check_bias(b, dims.c_out, "conv2d (bias)")?;
        let bias = b.map(|b| b.value());
        let y = conv::conv2d_forward(x.data(), wv.data(), bias.as_ref().map(|b| b.data()), &dims);
        let out = Tensor::new(vec![dims.n, dims.c_out, dims.oh, dims.ow], y)?;
        let mut inputs = vec![self.id, w.id];
        inputs.extend(b.map(|b| b.id));
        let op = Op::Conv2d {
            x: self.id,
            w: w.id,
            b: b.map(|b| b.id),
            dims,
        };
        Ok(self.record(out, op, &inputs))
    }

    /// Transposed convolution, `self: [N, C_in, H, W]`, `w: [C_in, C_out, k, k]`.
    pub fn conv_transpose2d(
        &self,
        w: &Var<'t, T>,
        b: Option<&Var<'t, T>>,
        geom: ConvGeometry,
    ) -> Result<Var<'t, T>> {
        self.same_tape(w)?;
        let (x, wv) = (self.value(), w.value());
        let dims = ConvDims::conv_transpose2d(x.shape(), wv.shape(), geom)?;
        self.check_bias(b, dims.c_in, "conv_transpose2d (bias)")?;
        let bias = b.map(|b| b.value());
        let y = conv::conv_transpose2d_forward(x.data(), wv.data(), bias.as_ref().map(|b| b.data()), &dims);
        let out = Tensor::new(vec![dims.n, dims.c_in, dims.h, dims.w], y)?;
        let mut inputs = vec![self.id, w.id];
        inputs.extend(b.map(|b| b.id));
        let op = Op::ConvTranspose2d {
            x: self.id,
            w: w.id,
            b: b.map(|b| b.id),
            dims,
        };
        Ok(self.record(out, op, &inputs))
    }
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Gradients produced by one [`Tape::backward`] call, keyed by leaf.
#[derive(Debug)]
pub struct Gradients<T: Element = f32> {
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss with respect to a tracked leaf.
    pub fn get(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(&var.id)
    }

    pub fn take(&mut self, var: &Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.remove(&var.id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
