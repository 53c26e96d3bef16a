//! Reverse-mode tape.
//!
//! Operations append nodes to a [`Tape`] in execution order, so inputs always
//! precede their consumers. [`Tape::backward`] walks the nodes once in reverse
//! and returns a [`Gradients`] table. Leaves created from [`Tensor`]s with
//! `requires_grad` set receive gradients; constants and inference tapes do
//! not.

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;

use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    Scale(usize, f64),
    AddConst(usize),
    Sigmoid(usize),
    Tanh(usize),
    ClipMin(usize, f64),
    Concat {
        a: usize,
        b: usize,
        outer: usize,
        inner_a: usize,
        inner_b: usize,
    },
    Slice {
        a: usize,
        start: usize,
    },
    Sum(usize),
    Mean(usize),
    Stack(Vec<usize>),
    Reshape(usize),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Elementwise operation tags.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    /// `max(x, threshold)`; gradient 1 strictly above the threshold, else 0.
    ClipMin(f64),
}

impl ElementwiseOp {
    fn arity(self) -> usize {
        match self {
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul => 2,
            _ => 1,
        }
    }
}

impl FromStr for ElementwiseOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => ElementwiseOp::Add,
            "sub" => ElementwiseOp::Sub,
            "mul" => ElementwiseOp::Mul,
            "sigmoid" => ElementwiseOp::Sigmoid,
            "tanh" => ElementwiseOp::Tanh,
            "clip_min" => ElementwiseOp::ClipMin(0.0),
            other => return Err(Error::UnknownOp(other.to_string())),
        })
    }
}

/// Record of executed operations for one forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    record_grads: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.len())
            .field("record_grads", &self.record_grads)
            .finish()
    }
}

/// Handle to a node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by one backward pass, indexed by tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if it was reached.
    pub fn wrt(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` into `tensor.grad`. Unreached leaves add nothing.
    pub fn accumulate_into(&self, var: Var<'_>, tensor: &mut Tensor) -> Result<()> {
        match self.wrt(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

impl Tape {
    /// A tape that records everything needed for [`Tape::backward`].
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            record_grads: true,
        }
    }

    /// A tape for inference: leaves never require gradients.
    pub fn inference() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            record_grads: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var<'_> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            needs_grad: needs_grad && self.record_grads,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Registers a tensor as a leaf. Gradients are tracked iff `requires_grad`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad,
        )
    }

    /// A non-differentiable input. Values must be finite.
    pub fn constant(&self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var<'_>> {
        let t = Tensor::new(shape, value)?;
        let (shape, data) = (t.shape().to_vec(), t.data().to_vec());
        Ok(self.push(shape, data, Op::Constant, false))
    }

    pub fn vector(&self, value: Vec<f64>) -> Result<Var<'_>> {
        self.constant(vec![value.len()], value)
    }

    pub fn scalar(&self, value: f64) -> Result<Var<'_>> {
        self.constant(vec![], vec![value])
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Applies a tagged elementwise op to one or two arguments.
    pub fn elementwise<'t>(&'t self, op: ElementwiseOp, args: &[Var<'t>]) -> Result<Var<'t>> {
        if args.len() != op.arity() {
            return Err(Error::Tensor(format!(
                "{:?} takes {} argument(s), got {}",
                op,
                op.arity(),
                args.len()
            )));
        }
        Ok(match op {
            ElementwiseOp::Add => args[0].add(args[1])?,
            ElementwiseOp::Sub => args[0].sub(args[1])?,
            ElementwiseOp::Mul => args[0].mul(args[1])?,
            ElementwiseOp::Sigmoid => args[0].sigmoid(),
            ElementwiseOp::Tanh => args[0].tanh(),
            ElementwiseOp::ClipMin(t) => args[0].clip_min(t),
        })
    }

    /// Stacks equal-shaped rank-1 vars into a `[rows, width]` matrix.
    pub fn stack<'t>(&'t self, rows: &[Var<'t>]) -> Result<Var<'t>> {
        let first = rows.first().ok_or(Error::Empty("stack"))?;
        let width_shape = first.shape();
        if width_shape.len() != 1 {
            return Err(Error::Shape {
                op: "stack",
                lhs: width_shape,
                rhs: vec![],
            });
        }
        let width = width_shape[0];
        let nodes = self.nodes.borrow();
        let mut value = Vec::with_capacity(rows.len() * width);
        let mut needs = false;
        for r in rows {
            let node = &nodes[r.id];
            if node.shape != width_shape {
                return Err(Error::Shape {
                    op: "stack",
                    lhs: width_shape,
                    rhs: node.shape.clone(),
                });
            }
            needs |= node.needs_grad;
            value.extend_from_slice(&node.value);
        }
        drop(nodes);
        Ok(self.push(
            vec![rows.len(), width],
            value,
            Op::Stack(rows.iter().map(|r| r.id).collect()),
            needs,
        ))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(Error::Empty("backward on an empty tape"));
        }
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Shape {
                op: "backward (loss must be scalar)",
                lhs: nodes[loss.id].shape.clone(),
                rhs: vec![],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &dy, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(dy);
            }
        }
        Ok(Gradients { grads })
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].needs_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop_node(nodes: &[Node], node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match node.op {
        Op::Leaf | Op::Constant => {}
        Op::MatMul { a, b, m, k, n } => {
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            if let Some(ga) = slot(grads, nodes, a) {
                for i in 0..m {
                    let dy_row = &dy[i * n..(i + 1) * n];
                    let ga_row = &mut ga[i * k..(i + 1) * k];
                    for (p, g) in ga_row.iter_mut().enumerate() {
                        let b_row = &bv[p * n..(p + 1) * n];
                        *g += dy_row.iter().zip(b_row).map(|(d, x)| d * x).sum::<f64>();
                    }
                }
            }
            if let Some(gb) = slot(grads, nodes, b) {
                for i in 0..m {
                    let dy_row = &dy[i * n..(i + 1) * n];
                    let a_row = &av[i * k..(i + 1) * k];
                    for (p, &aip) in a_row.iter().enumerate() {
                        let gb_row = &mut gb[p * n..(p + 1) * n];
                        for (g, d) in gb_row.iter_mut().zip(dy_row) {
                            *g += aip * d;
                        }
                    }
                }
            }
        }
        Op::Binary { kind, a, b } => {
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            let a_scalar = av.len() == 1 && dy.len() != 1;
            let b_scalar = bv.len() == 1 && dy.len() != 1;
            let ai = |i: usize| if a_scalar { 0 } else { i };
            let bi = |i: usize| if b_scalar { 0 } else { i };
            if let Some(ga) = slot(grads, nodes, a) {
                for (i, d) in dy.iter().enumerate() {
                    ga[ai(i)] += match kind {
                        BinaryKind::Add | BinaryKind::Sub => *d,
                        BinaryKind::Mul => d * bv[bi(i)],
                    };
                }
            }
            if let Some(gb) = slot(grads, nodes, b) {
                for (i, d) in dy.iter().enumerate() {
                    gb[bi(i)] += match kind {
                        BinaryKind::Add => *d,
                        BinaryKind::Sub => -d,
                        BinaryKind::Mul => d * av[ai(i)],
                    };
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = slot(grads, nodes, a) {
                ga.iter_mut().zip(dy).for_each(|(g, d)| *g += c * d);
            }
        }
        Op::AddConst(a) | Op::Reshape(a) => {
            if let Some(ga) = slot(grads, nodes, a) {
                ga.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
            }
        }
        Op::Sigmoid(a) => {
            let y = &node.value;
            if let Some(ga) = slot(grads, nodes, a) {
                for ((g, d), y) in ga.iter_mut().zip(dy).zip(y) {
                    *g += d * y * (1.0 - y);
                }
            }
        }
        Op::Tanh(a) => {
            let y = &node.value;
            if let Some(ga) = slot(grads, nodes, a) {
                for ((g, d), y) in ga.iter_mut().zip(dy).zip(y) {
                    *g += d * (1.0 - y * y);
                }
            }
        }
        Op::ClipMin(a, threshold) => {
            let x = &nodes[a].value;
            if let Some(ga) = slot(grads, nodes, a) {
                for ((g, d), x) in ga.iter_mut().zip(dy).zip(x) {
                    if *x > threshold {
                        *g += d;
                    }
                }
            }
        }
        Op::Concat {
            a,
            b,
            outer,
            inner_a,
            inner_b,
        } => {
            let width = inner_a + inner_b;
            if let Some(ga) = slot(grads, nodes, a) {
                for o in 0..outer {
                    let src = &dy[o * width..o * width + inner_a];
                    let dst = &mut ga[o * inner_a..(o + 1) * inner_a];
                    dst.iter_mut().zip(src).for_each(|(g, d)| *g += d);
                }
            }
            if let Some(gb) = slot(grads, nodes, b) {
                for o in 0..outer {
                    let src = &dy[o * width + inner_a..(o + 1) * width];
                    let dst = &mut gb[o * inner_b..(o + 1) * inner_b];
                    dst.iter_mut().zip(src).for_each(|(g, d)| *g += d);
                }
            }
        }
        Op::Slice { a, start } => {
            if let Some(ga) = slot(grads, nodes, a) {
                ga[start..start + dy.len()]
                    .iter_mut()
                    .zip(dy)
                    .for_each(|(g, d)| *g += d);
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = slot(grads, nodes, a) {
                ga.iter_mut().for_each(|g| *g += dy[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(ga) = slot(grads, nodes, a) {
                let scale = dy[0] / ga.len() as f64;
                ga.iter_mut().for_each(|g| *g += scale);
            }
        }
        Op::Stack(ref rows) => {
            let width = dy.len() / rows.len();
            for (r, &id) in rows.iter().enumerate() {
                if let Some(g) = slot(grads, nodes, id) {
                    g.iter_mut()
                        .zip(&dy[r * width..(r + 1) * width])
                        .for_each(|(g, d)| *g += d);
                }
            }
        }
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

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    /// The single value of a one-element var.
    pub fn item(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.id].value;
        debug_assert_eq!(v.len(), 1, "item() on a non-scalar var");
        v[0]
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        let value = node.value.iter().map(|&x| f(x)).collect();
        let shape = node.shape.clone();
        let needs = node.needs_grad;
        drop(nodes);
        self.tape.push(shape, value, op, needs)
    }

    fn binary(self, other: Var<'t>, kind: BinaryKind) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        let shape = if a.shape == b.shape || b.value.len() == 1 {
            a.shape.clone()
        } else if a.value.len() == 1 {
            b.shape.clone()
        } else {
            let name = match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
            };
            return Err(Error::Shape {
                op: name,
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        };
        let n = numel(&shape);
        let ai = |i: usize| if a.value.len() == 1 { 0 } else { i };
        let bi = |i: usize| if b.value.len() == 1 { 0 } else { i };
        let value = (0..n)
            .map(|i| {
                let (x, y) = (a.value[ai(i)], b.value[bi(i)]);
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                }
            })
            .collect();
        let needs = a.needs_grad || b.needs_grad;
        drop(nodes);
        Ok(self.tape.push(
            shape,
            value,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
            },
            needs,
        ))
    }

    /// Elementwise sum. Shapes must match unless one side holds a single value.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Mul)
    }

    /// Multiplies every element by a constant.
    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |x| c * x)
    }

    /// Adds a constant to every element.
    pub fn add_const(self, c: f64) -> Var<'t> {
        self.unary(Op::AddConst(self.id), |x| x + c)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    /// `max(x, threshold)` elementwise; the subgradient at the threshold is 0.
    pub fn clip_min(self, threshold: f64) -> Var<'t> {
        self.unary(Op::ClipMin(self.id, threshold), |x| x.max(threshold))
    }

    /// Sum of all elements, as a rank-0 var.
    pub fn sum(self) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        let s = node.value.iter().sum();
        let needs = node.needs_grad;
        drop(nodes);
        self.tape.push(vec![], vec![s], Op::Sum(self.id), needs)
    }

    /// Mean of all elements, as a rank-0 var.
    pub fn mean(self) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        let m = node.value.iter().sum::<f64>() / node.value.len() as f64;
        let needs = node.needs_grad;
        drop(nodes);
        self.tape.push(vec![], vec![m], Op::Mean(self.id), needs)
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        if numel(&shape) != node.value.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: node.shape.clone(),
                rhs: shape,
            });
        }
        let value = node.value.clone();
        let needs = node.needs_grad;
        drop(nodes);
        Ok(self.tape.push(shape, value, Op::Reshape(self.id), needs))
    }

    /// Contiguous sub-range `[start, start + len)` of a rank-1 var.
    pub fn slice(self, start: usize, len: usize) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        if node.shape.len() != 1 || start + len > node.value.len() {
            return Err(Error::Shape {
                op: "slice",
                lhs: node.shape.clone(),
                rhs: vec![start, len],
            });
        }
        let value = node.value[start..start + len].to_vec();
        let needs = node.needs_grad;
        drop(nodes);
        Ok(self
            .tape
            .push(vec![len], value, Op::Slice { a: self.id, start }, needs))
    }

    /// Matrix product of `[m, k]` with `[k, n]`, or matrix-vector product with `[k]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        let mismatch = || Error::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        };
        if a.shape.len() != 2 {
            return Err(mismatch());
        }
        let (m, k) = (a.shape[0], a.shape[1]);
        let (n, out_shape) = match b.shape.as_slice() {
            [kb] if *kb == k => (1, vec![m]),
            [kb, n] if *kb == k => (*n, vec![m, *n]),
            _ => return Err(mismatch()),
        };
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &a.value[i * k..(i + 1) * k];
            let out = &mut value[i * n..(i + 1) * n];
            if n == 1 {
                out[0] = a_row.iter().zip(&b.value).map(|(x, y)| x * y).sum();
            } else {
                for (p, &aip) in a_row.iter().enumerate() {
                    let b_row = &b.value[p * n..(p + 1) * n];
                    out.iter_mut().zip(b_row).for_each(|(o, y)| *o += aip * y);
                }
            }
        }
        let needs = a.needs_grad || b.needs_grad;
        drop(nodes);
        Ok(self.tape.push(
            out_shape,
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            needs,
        ))
    }

    /// Joins two vars along `axis`; all other axes must agree.
    pub fn concat(self, other: Var<'t>, axis: usize) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        let compatible = a.shape.len() == b.shape.len()
            && axis < a.shape.len()
            && a.shape
                .iter()
                .zip(&b.shape)
                .enumerate()
                .all(|(d, (x, y))| d == axis || x == y);
        if !compatible {
            return Err(Error::Shape {
                op: "concat",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let outer: usize = a.shape[..axis].iter().product();
        let tail: usize = a.shape[axis + 1..].iter().product();
        let inner_a = a.shape[axis] * tail;
        let inner_b = b.shape[axis] * tail;
        let mut value = Vec::with_capacity(a.value.len() + b.value.len());
        for o in 0..outer {
            value.extend_from_slice(&a.value[o * inner_a..(o + 1) * inner_a]);
            value.extend_from_slice(&b.value[o * inner_b..(o + 1) * inner_b]);
        }
        let mut shape = a.shape.clone();
        shape[axis] += b.shape[axis];
        let needs = a.needs_grad || b.needs_grad;
        drop(nodes);
        Ok(self.tape.push(
            shape,
            value,
            Op::Concat {
                a: self.id,
                b: other.id,
                outer,
                inner_a,
                inner_b,
            },
            needs,
        ))
    }

    /// True if gradients will flow into this var.
    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }
}
