//! Reverse-mode automatic differentiation on a recording tape.
//!
//! Every primitive application appends a node holding its output value, so
//! the node order is a topological order and `backward` is a single reverse
//! sweep. Leaves created with `requires_grad` accumulate gradients across
//! sweeps until [`Tape::zero_grad`] is called.
//!
//! Shape rules (`[.., n]` means any leading extents with last axis `n`):
//!
//! | primitive       | inputs                       | output        |
//! |-----------------|------------------------------|---------------|
//! | `Add/Sub/Mul`   | two equal shapes             | same shape    |
//! | `MatMul`        | `[m,k]` or `[k]`, `[k,n]`    | `[m,n]`/`[n]` |
//! | `AddBias`       | `[.., n]`, `[n]`             | `[.., n]`     |
//! | unary ops       | any                          | same shape    |
//! | `Sum`, `Mean`   | any                          | `[]`          |
//! | `SumLastAxis`   | `[.., n]`                    | `[..]`        |
//! | `Concat`        | `[.., n_i]` with equal lead  | `[.., Σ n_i]` |
//! | `Slice`         | `[.., n]`                    | `[.., e - s]` |

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Operation tag recorded on each graph node.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    MatMul,
    AddBias,
    Relu,
    Sigmoid,
    Exp,
    /// Natural log; rejects non-positive inputs.
    Log,
    Square,
    Sum,
    SumLastAxis,
    Mean,
    Concat,
    Slice { start: usize, end: usize },
    Scale(f64),
    AddScalar(f64),
    /// Clamp into `[lo, hi]`; the gradient passes only inside the interval.
    Clamp { lo: f64, hi: f64 },
}

impl Primitive {
    fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::MatMul => "matmul",
            Primitive::AddBias => "add_bias",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Square => "square",
            Primitive::Sum => "sum",
            Primitive::SumLastAxis => "sum_last_axis",
            Primitive::Mean => "mean",
            Primitive::Concat => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Scale(_) => "scale",
            Primitive::AddScalar(_) => "add_scalar",
            Primitive::Clamp { .. } => "clamp",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::MatMul | Primitive::AddBias => Some(2),
            Primitive::Concat => None,
            _ => Some(1),
        }
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

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect()).expect("shape preserved")
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("shape preserved")
}

fn matmul_dims(op: &'static str, a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if b.len() != 2 {
        return Err(Error::shape(op, format!("rhs must be a matrix, got {b:?}")));
    }
    let (m, k) = match a {
        [k] => (1, *k),
        [m, k] => (*m, *k),
        _ => return Err(Error::shape(op, format!("lhs must be rank 1 or 2, got {a:?}"))),
    };
    if k != b[0] {
        return Err(Error::shape(op, format!("{a:?} x {b:?}: inner extents {k} and {} differ", b[0])));
    }
    Ok((m, k, b[1]))
}

/// Computes a primitive's output value.
pub fn forward(prim: &Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
    let op = prim.name();
    if let Some(n) = prim.arity() {
        if inputs.len() != n {
            return Err(Error::shape(op, format!("expected {n} inputs, got {}", inputs.len())));
        }
    }
    let same_shape = || -> Result<()> {
        if inputs[0].shape() != inputs[1].shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", inputs[0].shape(), inputs[1].shape())));
        }
        Ok(())
    };
    let x = inputs.first().copied();
    Ok(match prim {
        Primitive::Add => {
            same_shape()?;
            zip(inputs[0], inputs[1], |a, b| a + b)
        }
        Primitive::Sub => {
            same_shape()?;
            zip(inputs[0], inputs[1], |a, b| a - b)
        }
        Primitive::Mul => {
            same_shape()?;
            zip(inputs[0], inputs[1], |a, b| a * b)
        }
        Primitive::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = matmul_dims(op, a.shape(), b.shape())?;
            let mut out = vec![0.0; m * n];
            let (ad, bd) = (a.data(), b.data());
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = ad[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bd[p * n..(p + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            let shape = if a.shape().len() == 1 { vec![n] } else { vec![m, n] };
            Tensor::new(&shape, out)?
        }
        Primitive::AddBias => {
            let (a, b) = (inputs[0], inputs[1]);
            let n = a.last_dim();
            if b.shape() != [n] || a.shape().is_empty() {
                return Err(Error::shape(op, format!("{:?} + bias {:?}", a.shape(), b.shape())));
            }
            let mut out = a.data().to_vec();
            for row in out.chunks_mut(n.max(1)) {
                for (o, &bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            Tensor::new(a.shape(), out)?
        }
        Primitive::Relu => map(x.unwrap(), |v| if v > 0.0 { v } else { 0.0 }),
        Primitive::Sigmoid => map(x.unwrap(), sigmoid),
        Primitive::Exp => map(x.unwrap(), f64::exp),
        Primitive::Log => {
            let t = x.unwrap();
            if let Some(bad) = t.data().iter().find(|v| !(**v > 0.0)) {
                return Err(Error::Domain { op, detail: format!("log of {bad}") });
            }
            map(t, f64::ln)
        }
        Primitive::Square => map(x.unwrap(), |v| v * v),
        Primitive::Sum => Tensor::scalar(x.unwrap().data().iter().sum()),
        Primitive::Mean => {
            let t = x.unwrap();
            if t.is_empty() {
                return Err(Error::Empty("tensor in mean"));
            }
            Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
        }
        Primitive::SumLastAxis => {
            let t = x.unwrap();
            if t.shape().is_empty() {
                return Err(Error::shape(op, "scalar has no last axis"));
            }
            let n = t.last_dim();
            let lead = &t.shape()[..t.shape().len() - 1];
            let data = if n == 0 {
                vec![0.0; lead.iter().product()]
            } else {
                t.data().chunks(n).map(|r| r.iter().sum()).collect()
            };
            Tensor::new(lead, data)?
        }
        Primitive::Concat => {
            if inputs.is_empty() {
                return Err(Error::Empty("input list in concat"));
            }
            let lead = inputs[0].shape();
            if lead.is_empty() {
                return Err(Error::shape(op, "cannot concatenate scalars"));
            }
            let lead = &lead[..lead.len() - 1];
            for t in inputs {
                let s = t.shape();
                if s.is_empty() || &s[..s.len() - 1] != lead {
                    return Err(Error::shape(op, format!("leading extents {lead:?} vs {s:?}")));
                }
            }
            let rows: usize = lead.iter().product();
            let width: usize = inputs.iter().map(|t| t.last_dim()).sum();
            let mut out = Vec::with_capacity(rows * width);
            for r in 0..rows {
                for t in inputs {
                    let w = t.last_dim();
                    out.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(width);
            Tensor::new(&shape, out)?
        }
        Primitive::Slice { start, end } => {
            let t = x.unwrap();
            let n = t.last_dim();
            if t.shape().is_empty() || start > end || *end > n {
                return Err(Error::shape(op, format!("range {start}..{end} of {:?}", t.shape())));
            }
            let mut out = Vec::with_capacity(t.outer() * (end - start));
            for r in 0..t.outer() {
                out.extend_from_slice(&t.data()[r * n + start..r * n + end]);
            }
            let mut shape = t.shape().to_vec();
            *shape.last_mut().unwrap() = end - start;
            Tensor::new(&shape, out)?
        }
        Primitive::Scale(c) => map(x.unwrap(), |v| c * v),
        Primitive::AddScalar(c) => map(x.unwrap(), |v| v + c),
        Primitive::Clamp { lo, hi } => map(x.unwrap(), |v| v.clamp(*lo, *hi)),
    })
}

/// Vector-Jacobian product: gradients of each input given the output gradient.
/// Entries whose `needs` flag is false are returned empty.
fn vjp(prim: &Primitive, inputs: &[&Tensor], output: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Vec<f64>> {
    let x = inputs[0];
    let unary = |f: &dyn Fn(usize) -> f64| -> Vec<Vec<f64>> { vec![(0..g.len()).map(f).collect()] };
    match prim {
        Primitive::Add => vec![g.to_vec(), g.to_vec()],
        Primitive::Sub => vec![g.to_vec(), g.iter().map(|v| -v).collect()],
        Primitive::Mul => {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            let ga = if needs[0] { g.iter().zip(b).map(|(g, b)| g * b).collect() } else { Vec::new() };
            let gb = if needs[1] { g.iter().zip(a).map(|(g, a)| g * a).collect() } else { Vec::new() };
            vec![ga, gb]
        }
        Primitive::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = matmul_dims("matmul", a.shape(), b.shape()).expect("validated in forward");
            let (ad, bd) = (a.data(), b.data());
            let mut ga = Vec::new();
            if needs[0] {
                ga = vec![0.0; m * k];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
            }
            let mut gb = Vec::new();
            if needs[1] {
                gb = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = ad[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *o += av * gv;
                        }
                    }
                }
            }
            vec![ga, gb]
        }
        Primitive::AddBias => {
            let n = inputs[1].len();
            let mut gb = vec![0.0; n];
            if needs[1] && n > 0 {
                for row in g.chunks(n) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
            vec![g.to_vec(), gb]
        }
        Primitive::Relu => unary(&|i| if x.data()[i] > 0.0 { g[i] } else { 0.0 }),
        Primitive::Sigmoid => unary(&|i| {
            let s = output.data()[i];
            g[i] * s * (1.0 - s)
        }),
        Primitive::Exp => unary(&|i| g[i] * output.data()[i]),
        Primitive::Log => unary(&|i| g[i] / x.data()[i]),
        Primitive::Square => unary(&|i| 2.0 * x.data()[i] * g[i]),
        Primitive::Sum => vec![vec![g[0]; x.len()]],
        Primitive::Mean => vec![vec![g[0] / x.len() as f64; x.len()]],
        Primitive::SumLastAxis => {
            let n = x.last_dim();
            vec![(0..x.len()).map(|i| g[i / n]).collect()]
        }
        Primitive::Concat => {
            let rows = output.outer();
            let width = output.last_dim();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(inputs.len());
            for (t, &need) in inputs.iter().zip(needs) {
                let w = t.last_dim();
                if need {
                    let mut gi = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gi.extend_from_slice(&g[r * width + offset..r * width + offset + w]);
                    }
                    grads.push(gi);
                } else {
                    grads.push(Vec::new());
                }
                offset += w;
            }
            grads
        }
        Primitive::Slice { start, end } => {
            let n = x.last_dim();
            let w = end - start;
            let mut gx = vec![0.0; x.len()];
            for r in 0..x.outer() {
                gx[r * n + start..r * n + end].copy_from_slice(&g[r * w..(r + 1) * w]);
            }
            vec![gx]
        }
        Primitive::Scale(c) => unary(&|i| c * g[i]),
        Primitive::AddScalar(_) => vec![g.to_vec()],
        Primitive::Clamp { lo, hi } => unary(&|i| {
            let v = x.data()[i];
            if v >= *lo && v <= *hi {
                g[i]
            } else {
                0.0
            }
        }),
    }
}

struct Node {
    value: Tensor,
    op: Option<(Primitive, Vec<usize>)>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Recording tape for one computation graph.
///
/// A tape is single-threaded; build independent graphs on separate tapes.
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

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Registers a leaf tensor.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(Node { value, op: None, requires_grad, grad: None })
    }

    /// Registers a leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Applies `prim` to `inputs`, recording the result.
    pub fn apply<'t>(&'t self, prim: Primitive, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let values: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.id].value).collect();
            let out = forward(&prim, &values)?;
            (out, inputs.iter().any(|v| nodes[v.id].requires_grad))
        };
        let ids = inputs.iter().map(|v| v.id).collect();
        Ok(self.push(Node { value, op: Some((prim, ids)), requires_grad, grad: None }))
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        self.apply(Primitive::Concat, parts)
    }

    /// Reverse sweep from a scalar `loss`; gradients accumulate into leaves.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", nodes[loss.id].value.shape()),
            ));
        }
        if !nodes[loss.id].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Some((prim, inputs)) => {
                    let values: Vec<&Tensor> = inputs.iter().map(|&i| &nodes[i].value).collect();
                    let needs: Vec<bool> = inputs.iter().map(|&i| nodes[i].requires_grad).collect();
                    let input_grads = vjp(prim, &values, &node.value, &g, &needs);
                    for ((&i, gi), need) in inputs.iter().zip(input_grads).zip(needs) {
                        if !need {
                            continue;
                        }
                        match &mut grads[i] {
                            Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, v)| *a += v),
                            slot => *slot = Some(gi),
                        }
                    }
                }
                None => grads[id] = Some(g),
            }
        }
        for (id, g) in grads.into_iter().enumerate() {
            let (Some(g), node) = (g, &mut nodes[id]) else { continue };
            if node.op.is_some() || !node.requires_grad {
                continue;
            }
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Recomputes every recorded node from its inputs and reports whether all
    /// outputs match the stored values bit for bit.
    pub fn replay_matches(&self) -> Result<bool> {
        let nodes = self.nodes.borrow();
        for node in nodes.iter() {
            if let Some((prim, inputs)) = &node.op {
                let values: Vec<&Tensor> = inputs.iter().map(|&i| &nodes[i].value).collect();
                let again = forward(prim, &values)?;
                let same = again.shape() == node.value.shape()
                    && again.data().iter().zip(node.value.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                if !same {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    /// True when every recorded input precedes its consumer.
    pub fn is_acyclic(&self) -> bool {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .all(|(id, n)| n.op.as_ref().is_none_or(|(_, inputs)| inputs.iter().all(|&i| i < id)))
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient of a leaf, if any has been computed.
    pub fn grad(&self) -> Option<Tensor> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        node.grad.as_ref().map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad matches value"))
    }

    fn unary(self, prim: Primitive) -> Result<Var<'t>> {
        self.tape.apply(prim, &[self])
    }

    fn binary(self, prim: Primitive, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(prim, &[self, other])
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Primitive::Add, other)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Primitive::Sub, other)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Primitive::Mul, other)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Primitive::MatMul, other)
    }

    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.binary(Primitive::AddBias, bias)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(Primitive::Relu)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(Primitive::Sigmoid)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(Primitive::Exp)
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary(Primitive::Log)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary(Primitive::Square)
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.unary(Primitive::Sum)
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.unary(Primitive::Mean)
    }

    pub fn sum_last_axis(self) -> Result<Var<'t>> {
        self.unary(Primitive::SumLastAxis)
    }

    pub fn slice(self, start: usize, end: usize) -> Result<Var<'t>> {
        self.unary(Primitive::Slice { start, end })
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary(Primitive::Scale(c))
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary(Primitive::AddScalar(c))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'t>> {
        self.unary(Primitive::Clamp { lo, hi })
    }
}
