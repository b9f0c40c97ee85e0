//! The recording tape and reverse-mode backward pass.
//!
//! Every op appends a node holding its output value and enough context to
//! produce input gradients. Nodes are only ever appended, so the node list is
//! already in topological order and backward is a single reverse sweep.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::ops::{broadcast, conv, norm, reduce, sample, shape};
use crate::tensor::Tensor;
use crate::BnStats;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for a user-defined op: given the output gradient, the input
/// values and the output value, return one optional gradient per input.
pub type CustomBackward = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Abs,
    Exp,
    Log,
    Relu,
    Elu(f64),
    Sigmoid,
    Recip,
    AddScalar(f64),
    MulScalar(f64),
    Clamp(f64, f64),
}

enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    ScaleGrad(Var, f64),
    Softmax(Var, usize),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Concat(Vec<Var>, usize),
    Upsample2(Var),
    HFlip(Var),
    Reshape(Var),
    Diff(Var, usize),
    Box3(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: conv::ConvGeom,
    },
    GridSample(Var, Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        saved: norm::BnSaved,
    },
    Custom(Vec<Var>, CustomBackward),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Binary(_, a, b) | Op::GridSample(a, b) => vec![*a, *b],
            Op::Unary(_, a)
            | Op::ScaleGrad(a, _)
            | Op::Softmax(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumAxis(a, _)
            | Op::MeanAxis(a, _)
            | Op::Upsample2(a)
            | Op::HFlip(a)
            | Op::Reshape(a)
            | Op::Diff(a, _)
            | Op::Box3(a) => vec![*a],
            Op::Concat(v, _) | Op::Custom(v, _) => v.clone(),
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias);
                v
            }
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded record of tensor operations.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Rc<Tensor>>>>,
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

    fn push(&self, value: Tensor, op: Op) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|v| nodes[v.0].requires_grad)
        };
        self.push_node(Rc::new(value), op, requires_grad)
    }

    fn push_node(&self, value: Rc<Tensor>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Adds a leaf tensor. Leaves with `requires_grad` receive a gradient on
    /// every backward pass, including zeros when the loss does not reach them.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push_node(Rc::new(value), Op::Leaf, requires_grad)
    }

    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Gradient of the last backward loss with respect to the leaf `v`.
    /// Intermediate nodes do not retain gradients.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads
            .borrow()
            .get(v.0)
            .and_then(|g| g.as_deref().cloned())
    }

    fn binary(&self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
            Binary::Min => f64::min,
            Binary::Max => f64::max,
        };
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
            Binary::Min => "min",
            Binary::Max => "max",
        };
        let out = broadcast::binary(name, &av, &bv, f)?;
        Ok(self.push(out, Op::Binary(kind, a, b)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    /// Elementwise minimum; on ties the whole gradient goes to `a`.
    pub fn min(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Min, a, b)
    }

    /// Elementwise maximum; on ties the whole gradient goes to `a`.
    pub fn max(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Max, a, b)
    }

    fn unary(&self, kind: Unary, a: Var) -> Var {
        let av = self.value(a);
        let out = av.map(|x| match kind {
            Unary::Neg => -x,
            Unary::Abs => x.abs(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Relu => x.max(0.0),
            Unary::Elu(alpha) => {
                if x > 0.0 {
                    x
                } else {
                    alpha * x.exp_m1()
                }
            }
            Unary::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Unary::Recip => 1.0 / x,
            Unary::AddScalar(c) => x + c,
            Unary::MulScalar(c) => x * c,
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
        });
        self.push(out, Op::Unary(kind, a))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn elu(&self, a: Var) -> Var {
        self.unary(Unary::Elu(1.0), a)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn recip(&self, a: Var) -> Var {
        self.unary(Unary::Recip, a)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(Unary::AddScalar(c), a)
    }

    pub fn mul_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(Unary::MulScalar(c), a)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping was active.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(Unary::Clamp(lo, hi), a)
    }

    /// Identity on the forward pass; multiplies the incoming gradient by
    /// `factor` on the way back.
    pub fn scale_grad(&self, a: Var, factor: f64) -> Var {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (Rc::clone(&nodes[a.0].value), nodes[a.0].requires_grad)
        };
        self.push_node(value, Op::ScaleGrad(a, factor), rg)
    }

    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let out = reduce::softmax(&self.value(a), axis)?;
        Ok(self.push(out, Op::Softmax(a, axis)))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let m = self.value(a).mean();
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let out = reduce::sum_axis(&self.value(a), axis)?;
        Ok(self.push(out, Op::SumAxis(a, axis)))
    }

    /// Mean along `axis`, keeping it with extent 1.
    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        let len = av.shape().get(axis).copied().unwrap_or(1) as f64;
        let out = reduce::sum_axis(&av, axis)?.map(|v| v / len);
        Ok(self.push(out, Op::MeanAxis(a, axis)))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = shape::concat(&refs, axis)?;
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis)))
    }

    /// Nearest-neighbour x2 upsampling of an NCHW tensor.
    pub fn upsample2(&self, a: Var) -> Result<Var> {
        let out = shape::upsample2(&self.value(a))?;
        Ok(self.push(out, Op::Upsample2(a)))
    }

    /// Mirrors the last (width) axis.
    pub fn hflip(&self, a: Var) -> Result<Var> {
        let out = shape::hflip(&self.value(a))?;
        Ok(self.push(out, Op::HFlip(a)))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).as_ref().clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Forward differences along `axis`; the result is one shorter there.
    pub fn diff(&self, a: Var, axis: usize) -> Result<Var> {
        let out = shape::diff(&self.value(a), axis)?;
        Ok(self.push(out, Op::Diff(a, axis)))
    }

    /// Per-plane 3x3 mean with reflection padding (same spatial size).
    pub fn box_filter3(&self, a: Var) -> Result<Var> {
        let out = shape::box3(&self.value(a))?;
        Ok(self.push(out, Op::Box3(a)))
    }

    pub fn conv2d(
        &self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (iv, kv) = (self.value(input), self.value(kernel));
        let geom = conv::ConvGeom::new(&iv, &kv, stride, padding)?;
        let bv = bias.map(|b| self.value(b));
        if let Some(b) = &bv {
            if b.len() != geom.oc {
                return Err(TensorError::shape(
                    "conv2d",
                    format!("bias has {} entries for {} output channels", b.len(), geom.oc),
                ));
            }
        }
        let out = conv::forward(&iv, &kv, bv.as_deref(), &geom);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    /// Bilinear sampling of an NCHW `source` at an `N x H x W x 2` grid of
    /// continuous `(x, y)` pixel coordinates, clamped to the border.
    pub fn grid_sample(&self, source: Var, grid: Var) -> Result<Var> {
        let (sv, gv) = (self.value(source), self.value(grid));
        sample::check(&sv, &gv)?;
        let out = sample::forward(&sv, &gv);
        Ok(self.push(out, Op::GridSample(source, grid)))
    }

    /// Batch normalization. In training mode the batch statistics are used
    /// and `stats` is updated with its momentum; otherwise `stats` is read.
    pub fn batch_norm(
        &self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats,
        training: bool,
    ) -> Result<Var> {
        let (out, saved) = norm::forward(
            &self.value(input),
            &self.value(gamma),
            &self.value(beta),
            stats,
            training,
        )?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
            },
        ))
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(&self, inputs: &[Var], output: Tensor, backward: CustomBackward) -> Var {
        self.push(output, Op::Custom(inputs.to_vec(), backward))
    }

    /// Reverse sweep from a one-element `loss`. Replaces gradients from any
    /// earlier backward on this tape.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.len() != 1 {
            return Err(TensorError::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[loss.0] = Some(Tensor::ones(root.value.shape()));

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, gi) in local_grads(&nodes, node, &g) {
                if !nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot => *slot = Some(gi),
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        let mut out = self.grads.borrow_mut();
        out.clear();
        out.extend(nodes.iter().zip(grads).map(|(n, g)| {
            (n.requires_grad && matches!(n.op, Op::Leaf))
                .then(|| Rc::new(g.unwrap_or_else(|| Tensor::zeros(n.value.shape()))))
        }));
        Ok(())
    }
}

fn local_grads(nodes: &[Node], node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
    let val = |v: Var| nodes[v.0].value.as_ref();
    let rg = |v: Var| nodes[v.0].requires_grad;
    let mut out = Vec::new();
    let mut put = |v: Var, t: Option<Tensor>| {
        if let Some(t) = t {
            out.push((v, t));
        }
    };
    match &node.op {
        Op::Leaf => {}
        Op::Binary(kind, a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let want = (rg(*a), rg(*b));
            let (ga, gb) = match kind {
                Binary::Add => broadcast::binary_grads(av, bv, g, want, |_, _| 1.0, |_, _| 1.0),
                Binary::Sub => broadcast::binary_grads(av, bv, g, want, |_, _| 1.0, |_, _| -1.0),
                Binary::Mul => broadcast::binary_grads(av, bv, g, want, |_, y| y, |x, _| x),
                Binary::Div => broadcast::binary_grads(
                    av,
                    bv,
                    g,
                    want,
                    |_, y| 1.0 / y,
                    |x, y| -x / (y * y),
                ),
                Binary::Min => broadcast::binary_grads(
                    av,
                    bv,
                    g,
                    want,
                    |x, y| if x <= y { 1.0 } else { 0.0 },
                    |x, y| if x <= y { 0.0 } else { 1.0 },
                ),
                Binary::Max => broadcast::binary_grads(
                    av,
                    bv,
                    g,
                    want,
                    |x, y| if x >= y { 1.0 } else { 0.0 },
                    |x, y| if x >= y { 0.0 } else { 1.0 },
                ),
            };
            put(*a, ga);
            put(*b, gb);
        }
        Op::Unary(kind, a) => {
            let x = val(*a);
            let y = node.value.as_ref();
            let d: Vec<f64> = x
                .data()
                .iter()
                .zip(y.data())
                .zip(g.data())
                .map(|((&x, &y), &g)| {
                    g * match *kind {
                        Unary::Neg => -1.0,
                        Unary::Abs => {
                            if x >= 0.0 {
                                1.0
                            } else {
                                -1.0
                            }
                        }
                        Unary::Exp => y,
                        Unary::Log => 1.0 / x,
                        Unary::Relu => {
                            if x > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Elu(alpha) => {
                            if x > 0.0 {
                                1.0
                            } else {
                                y + alpha
                            }
                        }
                        Unary::Sigmoid => y * (1.0 - y),
                        Unary::Recip => -y * y,
                        Unary::AddScalar(_) => 1.0,
                        Unary::MulScalar(c) => c,
                        Unary::Clamp(lo, hi) => {
                            if x >= lo && x <= hi {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    }
                })
                .collect();
            put(*a, Some(Tensor::new(x.shape(), d).unwrap()));
        }
        Op::ScaleGrad(a, factor) => put(*a, Some(g.map(|v| v * factor))),
        Op::Softmax(a, axis) => put(*a, Some(reduce::softmax_backward(&node.value, g, *axis))),
        Op::Sum(a) => {
            let gv = g.data()[0];
            put(*a, Some(Tensor::full(val(*a).shape(), gv)));
        }
        Op::Mean(a) => {
            let x = val(*a);
            let gv = g.data()[0] / x.len() as f64;
            put(*a, Some(Tensor::full(x.shape(), gv)));
        }
        Op::SumAxis(a, axis) => put(*a, Some(reduce::expand_axis(g, val(*a).shape(), *axis, 1.0))),
        Op::MeanAxis(a, axis) => {
            let shape = val(*a).shape();
            let scale = 1.0 / shape[*axis] as f64;
            put(*a, Some(reduce::expand_axis(g, shape, *axis, scale)));
        }
        Op::Concat(parts, axis) => {
            let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| val(p).shape().to_vec()).collect();
            for (p, gp) in parts.iter().zip(shape::concat_backward(g, &shapes, *axis)) {
                put(*p, Some(gp));
            }
        }
        Op::Upsample2(a) => put(*a, Some(shape::upsample2_backward(g, val(*a).shape()))),
        Op::HFlip(a) => put(*a, Some(shape::hflip(g).unwrap())),
        Op::Reshape(a) => put(*a, Some(g.clone().reshape(val(*a).shape()).unwrap())),
        Op::Diff(a, axis) => put(*a, Some(shape::diff_backward(g, val(*a).shape(), *axis))),
        Op::Box3(a) => put(*a, Some(shape::box3_backward(g))),
        Op::Conv2d {
            input,
            kernel,
            bias,
            geom,
        } => {
            let want = (rg(*input), rg(*kernel), bias.is_some_and(rg));
            let (gi, gk, gb) = conv::backward(val(*input), val(*kernel), g, geom, want);
            put(*input, gi);
            put(*kernel, gk);
            if let Some(b) = bias {
                put(*b, gb);
            }
        }
        Op::GridSample(s, grid) => {
            let (gs, gg) = sample::backward(val(*s), val(*grid), g, (rg(*s), rg(*grid)));
            put(*s, gs);
            put(*grid, gg);
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            saved,
        } => {
            let want = (rg(*input), rg(*gamma), rg(*beta));
            let (gx, gg, gb) = norm::backward(val(*input).shape(), val(*gamma), saved, g, want);
            put(*input, gx);
            put(*gamma, gg.map(|t| t.reshape(val(*gamma).shape()).unwrap()));
            put(*beta, gb.map(|t| t.reshape(val(*beta).shape()).unwrap()));
        }
        Op::Custom(inputs, backward) => {
            let values: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
            for (v, gv) in inputs.iter().zip(backward(g, &values, &node.value)) {
                put(*v, gv);
            }
        }
    }
    out
}
