//! Minimal tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends a node holding its output value and the ids of its
//! operands; the operand values stay on the tape, so backward rules read
//! them directly. Nodes are appended in evaluation order, which makes the
//! tape acyclic and its index order a topological order.
//!
//! ```
//! use boxmask_core::autodiff::Tape;
//! use boxmask_core::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
//! let loss = x.dot(x).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[2.0, -4.0, 1.0]);
//! ```

pub mod gradcheck;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{conv, sampling, Tensor};

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    ScaleConst(usize, f64),
    AddConst(usize),
    ScaleBy(usize, usize),
    Div(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Softplus(usize),
    Sum(usize),
    Mean(usize),
    Dot(usize, usize),
    Concat(Vec<usize>, Vec<usize>),
    MaxPool2(usize, Vec<usize>),
    AvgPool(usize, usize),
    Upsample2(usize),
    Conv2d(usize, usize),
    KernelGrad(usize, usize),
    AddBias(usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(..) => "neg",
            Op::ScaleConst(..) => "scale_const",
            Op::AddConst(..) => "add_const",
            Op::ScaleBy(..) => "scale_by",
            Op::Div(..) => "div",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Dot(..) => "dot",
            Op::Concat(..) => "concat_channels",
            Op::MaxPool2(..) => "max_pool2",
            Op::AvgPool(..) => "avg_pool",
            Op::Upsample2(..) => "upsample2",
            Op::Conv2d(..) => "conv2d",
            Op::KernelGrad(..) => "conv2d_kernel_grad",
            Op::AddBias(..) => "add_bias",
        }
    }

    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Neg(a)
            | Op::ScaleConst(a, _)
            | Op::AddConst(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MaxPool2(a, _)
            | Op::AvgPool(a, _)
            | Op::Upsample2(a) => vec![*a],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ScaleBy(a, b)
            | Op::Div(a, b)
            | Op::Dot(a, b)
            | Op::Conv2d(a, b)
            | Op::KernelGrad(a, b)
            | Op::AddBias(a, b) => vec![*a, *b],
            Op::Concat(ids, _) => ids.clone(),
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for one backward pass. Confined to one thread.
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

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.value().shape())
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

    /// A trainable leaf: receives a gradient from [`Tape::backward`].
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.parents().iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar `loss`. Every trainable leaf gets an entry
    /// in the result; leaves not connected to `loss` read as zero.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let needs = |p: usize| nodes[p].requires_grad;
            let val = |p: usize| nodes[p].value.as_ref();
            let mut emit = |p: usize, t: Tensor| accumulate(&mut grads, p, t);
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    if needs(*a) {
                        emit(*a, g.clone());
                    }
                    if needs(*b) {
                        emit(*b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*a) {
                        emit(*a, g.clone());
                    }
                    if needs(*b) {
                        emit(*b, g.scale(-1.0));
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        emit(*a, g.mul(val(*b))?);
                    }
                    if needs(*b) {
                        emit(*b, g.mul(val(*a))?);
                    }
                }
                Op::Neg(a) => emit(*a, g.scale(-1.0)),
                Op::ScaleConst(a, s) => emit(*a, g.scale(*s)),
                Op::AddConst(a) => emit(*a, g),
                Op::ScaleBy(x, s) => {
                    let sv = val(*s).data()[0];
                    if needs(*s) {
                        let d = g.dot(val(*x))?;
                        emit(*s, Tensor::full(val(*s).shape(), d));
                    }
                    if needs(*x) {
                        emit(*x, g.scale(sv));
                    }
                }
                Op::Div(a, b) => {
                    let (av, bv, gv) = (val(*a).data()[0], val(*b).data()[0], g.data()[0]);
                    if needs(*a) {
                        emit(*a, Tensor::full(val(*a).shape(), gv / bv));
                    }
                    if needs(*b) {
                        emit(*b, Tensor::full(val(*b).shape(), -gv * av / (bv * bv)));
                    }
                }
                Op::Relu(a) => emit(*a, g.zip_map(val(*a), |gi, x| if x > 0.0 { gi } else { 0.0 })?),
                Op::Sigmoid(_) => {
                    let a = node.op.parents()[0];
                    emit(a, g.zip_map(&node.value, |gi, y| gi * y * (1.0 - y))?);
                }
                Op::Softplus(a) => emit(*a, g.zip_map(val(*a), |gi, x| gi * sigmoid(x))?),
                Op::Sum(a) => emit(*a, Tensor::full(val(*a).shape(), g.data()[0])),
                Op::Mean(a) => {
                    let n = val(*a).len() as f64;
                    emit(*a, Tensor::full(val(*a).shape(), g.data()[0] / n));
                }
                Op::Dot(a, b) => {
                    let gv = g.data()[0];
                    if needs(*a) {
                        emit(*a, val(*b).scale(gv));
                    }
                    if needs(*b) {
                        emit(*b, val(*a).scale(gv));
                    }
                }
                Op::Concat(ids, widths) => {
                    for (p, part) in ids.iter().zip(g.split_channels(widths)?) {
                        if needs(*p) {
                            emit(*p, part);
                        }
                    }
                }
                Op::MaxPool2(a, arg) => {
                    emit(*a, sampling::max_pool2_backward(&g, arg, val(*a).shape())?)
                }
                Op::AvgPool(a, f) => emit(*a, sampling::avg_pool_backward(&g, *f)?),
                Op::Upsample2(a) => emit(*a, sampling::upsample2_backward(&g)?),
                Op::Conv2d(x, k) => {
                    if needs(*x) {
                        emit(*x, conv::conv2d_transpose(&g, val(*k))?);
                    }
                    if needs(*k) {
                        let ks = val(*k).shape()[0];
                        emit(*k, conv::conv2d_kernel_grad(val(*x), &g, ks)?);
                    }
                }
                Op::KernelGrad(x, r) => {
                    if needs(*x) {
                        emit(*x, conv::conv2d_transpose(val(*r), &g)?);
                    }
                    if needs(*r) {
                        emit(*r, conv::conv2d(val(*x), &g)?);
                    }
                }
                Op::AddBias(x, b) => {
                    if needs(*b) {
                        let c = val(*b).len();
                        let mut gb = vec![0.0; c];
                        for (i, v) in g.data().iter().enumerate() {
                            gb[i % c] += v;
                        }
                        emit(*b, Tensor::new(val(*b).shape(), gb)?);
                    }
                    if needs(*x) {
                        emit(*x, g);
                    }
                }
            }
        }

        let mut out = Vec::new();
        for (id, g) in grads.into_iter().enumerate() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                out.push((id, g.unwrap_or_else(|| Tensor::zeros(node.value.shape()))));
            }
        }
        Ok(Gradients { grads: out })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(acc) => acc.axpy(1.0, &g).expect("gradient shapes agree"),
        slot @ None => *slot = Some(g),
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

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Gradients of one backward pass, keyed by trainable leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<(usize, Tensor)>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads
            .binary_search_by_key(&var.id, |(id, _)| *id)
            .ok()
            .map(|i| &self.grads[i].1)
    }

    /// Gradient for a trainable leaf; zeros for anything else.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn same_tape(a: &Var<'_>, b: &Var<'_>) {
    assert!(std::ptr::eq(a.tape, b.tape), "vars from different tapes");
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a one-element var.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    fn binary(self, other: Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        same_tape(&self, &other);
        let v = self.value().zip_map(&other.value(), f)?;
        self.tape.push(v, op)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.tape.push(self.value().scale(-1.0), Op::Neg(self.id))
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        self.tape.push(self.value().scale(s), Op::ScaleConst(self.id, s))
    }

    pub fn add_const(self, c: f64) -> Result<Var<'t>> {
        self.tape.push(self.value().map(|v| v + c), Op::AddConst(self.id))
    }

    /// Multiplies every element by the one-element var `s`.
    pub fn scale_by(self, s: Var<'t>) -> Result<Var<'t>> {
        same_tape(&self, &s);
        let sv = s.value();
        if sv.len() != 1 {
            return Err(shape_err!("scale_by needs a scalar factor, got {:?}", sv.shape()));
        }
        let v = self.value().scale(sv.data()[0]);
        self.tape.push(v, Op::ScaleBy(self.id, s.id))
    }

    /// Quotient of two one-element vars.
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        same_tape(&self, &other);
        let (a, b) = (self.value(), other.value());
        if a.len() != 1 || b.len() != 1 {
            return Err(shape_err!("div is scalar-only: {:?} / {:?}", a.shape(), b.shape()));
        }
        let v = Tensor::new(a.shape(), vec![a.data()[0] / b.data()[0]])?;
        self.tape.push(v, Op::Div(self.id, other.id))
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.tape.push(self.value().map(|v| v.max(0.0)), Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.tape.push(self.value().map(sigmoid), Op::Sigmoid(self.id))
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        self.tape.push(self.value().map(softplus), Op::Softplus(self.id))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.tape.push(Tensor::scalar(self.value().sum()), Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.tape.push(Tensor::scalar(self.value().mean()), Op::Mean(self.id))
    }

    pub fn dot(self, other: Var<'t>) -> Result<Var<'t>> {
        same_tape(&self, &other);
        let d = self.value().dot(&other.value())?;
        self.tape.push(Tensor::scalar(d), Op::Dot(self.id, other.id))
    }

    pub fn concat_channels(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| invalid!("concat of zero vars"))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat_channels(&refs)?;
        let widths = values.iter().map(|v| v.shape()[2]).collect();
        first
            .tape
            .push(out, Op::Concat(parts.iter().map(|p| p.id).collect(), widths))
    }

    pub fn max_pool2(self) -> Result<Var<'t>> {
        let (out, arg) = sampling::max_pool2(&self.value())?;
        self.tape.push(out, Op::MaxPool2(self.id, arg))
    }

    pub fn avg_pool(self, f: usize) -> Result<Var<'t>> {
        let out = sampling::avg_pool(&self.value(), f)?;
        self.tape.push(out, Op::AvgPool(self.id, f))
    }

    pub fn upsample2(self) -> Result<Var<'t>> {
        let out = sampling::upsample2(&self.value())?;
        self.tape.push(out, Op::Upsample2(self.id))
    }

    pub fn conv2d(self, kernel: Var<'t>) -> Result<Var<'t>> {
        same_tape(&self, &kernel);
        let out = conv::conv2d(&self.value(), &kernel.value())?;
        self.tape.push(out, Op::Conv2d(self.id, kernel.id))
    }

    /// `conv2d_kernel_grad(self, grad_out)` as a differentiable op.
    pub fn conv2d_kernel_grad(self, grad_out: Var<'t>, k: usize) -> Result<Var<'t>> {
        same_tape(&self, &grad_out);
        let out = conv::conv2d_kernel_grad(&self.value(), &grad_out.value(), k)?;
        self.tape.push(out, Op::KernelGrad(self.id, grad_out.id))
    }

    /// Adds a per-channel bias of shape `[C]` to an `H×W×C` var.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        same_tape(&self, &bias);
        let x = self.value();
        let b = bias.value();
        let (_, _, c) = x.hwc()?;
        if b.shape() != [c] {
            return Err(shape_err!("bias {:?} for {} channels", b.shape(), c));
        }
        let mut out = (*x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b.data()[i % c];
        }
        self.tape.push(out, Op::AddBias(self.id, bias.id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{rand_tensor, rng};

    #[test]
    fn relu_and_sigmoid_values() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2], vec![-1.5, 0.0]).unwrap());
        assert_eq!(x.relu().unwrap().value().data(), &[0.0, 0.0]);
        assert_eq!(x.sigmoid().unwrap().value().data()[1], 0.5);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut r = rng(5);
        let tape = Tape::new();
        let x = tape.param(rand_tensor(&mut r, &[2, 3, 4]));
        let g = tape.backward(x.sum().unwrap()).unwrap();
        assert!(g.wrt(x).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn inner_product_gradient_is_twice_input() {
        let mut r = rng(6);
        let tape = Tape::new();
        let xv = rand_tensor(&mut r, &[5, 2]);
        let x = tape.param(xv.clone());
        let g = tape.backward(x.dot(x).unwrap()).unwrap();
        assert_eq!(g.wrt(x), xv.scale(2.0));
    }

    #[test]
    fn unused_leaf_gets_zero_and_constants_get_nothing() {
        let tape = Tape::new();
        let a = tape.param(Tensor::ones(&[3]));
        let b = tape.param(Tensor::ones(&[2, 2]));
        let c = tape.constant(Tensor::ones(&[3]));
        let loss = a.mul(c).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(b), Tensor::zeros(&[2, 2]));
        assert!(g.get(c).is_none());
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let a = tape.param(Tensor::ones(&[3]));
        assert!(matches!(tape.backward(a), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_values_are_errors() {
        let tape = Tape::new();
        let a = tape.param(Tensor::scalar(1.0));
        let z = tape.scalar(0.0);
        assert!(matches!(a.div(z), Err(Error::NonFinite(_))));
    }

    #[test]
    fn shared_operand_accumulates() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = x.mul(x).unwrap().add(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).data(), &[7.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut r = rng(7);
            let tape = Tape::new();
            let x = tape.param(rand_tensor(&mut r, &[6, 6, 3]));
            let k = tape.param(rand_tensor(&mut r, &[3, 3, 3, 2]));
            let y = x.conv2d(k).unwrap().relu().unwrap().max_pool2().unwrap();
            let loss = y.dot(y).unwrap();
            let g = tape.backward(loss).unwrap();
            (g.wrt(x), g.wrt(k))
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert_eq!(a1.data(), a2.data());
        assert_eq!(b1.data(), b2.data());
    }
}
