//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Nodes are appended in evaluation order, so every node's parents precede
//! it and a single reverse sweep visits nodes in a valid topological order.
//! Broadcasting is limited to one operand repeated over the other's leading
//! (batch) axis.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

/// A differentiable operation supplied from outside the built-in suite.
///
/// `backward` receives the forward inputs and output together with the
/// upstream gradient and must return one gradient per input, each shaped
/// like that input.
pub trait Primitive: Send + Sync {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

pub type PrimitiveHandle = Arc<dyn Primitive>;

type ForwardFn = dyn Fn(&[&Tensor]) -> Result<Tensor> + Send + Sync;
type BackwardFn = dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor> + Send + Sync;

struct ClosurePrimitive {
    name: String,
    forward: Box<ForwardFn>,
    backward: Box<BackwardFn>,
}

impl Primitive for ClosurePrimitive {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        (self.forward)(inputs)
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        (self.backward)(inputs, output, grad)
    }
}

/// Wraps a forward/backward closure pair as a tape primitive.
pub fn register_custom_primitive<F, B>(name: &str, forward: F, backward: B) -> PrimitiveHandle
where
    F: Fn(&[&Tensor]) -> Result<Tensor> + Send + Sync + 'static,
    B: Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor> + Send + Sync + 'static,
{
    Arc::new(ClosurePrimitive {
        name: name.to_string(),
        forward: Box::new(forward),
        backward: Box::new(backward),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs is repeated over lhs's leading axis
    Rhs,
    /// lhs is repeated over rhs's leading axis
    Lhs,
}

enum Op {
    Input,
    Add(Bcast),
    Sub(Bcast),
    Mul(Bcast),
    Scale(f64),
    AddScalar,
    MatMul,
    Relu,
    Tanh,
    Exp,
    Square,
    Sqrt,
    Sum,
    Mean,
    Concat(Vec<usize>),
    SliceRows(usize),
    L2NormRows,
    Softmax,
    CrossEntropy(Vec<usize>),
    Custom(PrimitiveHandle),
}

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

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

    /// A leaf that receives a gradient.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), Op::Input, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), Op::Input, false)
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn derived(&self, value: Tensor, parents: Vec<usize>, op: Op) -> Var<'_> {
        let rg = parents.iter().any(|&p| self.requires(p));
        self.push(value, parents, op, rg)
    }

    /// Applies a custom primitive to the given inputs.
    pub fn apply<'t>(&'t self, prim: &PrimitiveHandle, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        let vals: Vec<Rc<Tensor>> = inputs.iter().map(|v| v.value()).collect();
        let refs: Vec<&Tensor> = vals.iter().map(|v| v.as_ref()).collect();
        let out = prim.forward(&refs)?;
        Ok(self.derived(out, inputs.iter().map(|v| v.id).collect(), Op::Custom(Arc::clone(prim))))
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out_node = &nodes[output.id];
        if out_node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.id + 1];
        grads[output.id] = Some(Tensor::full(out_node.value.shape(), 1.0));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || node.parents.is_empty() {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let parent_vals: Vec<&Tensor> = node.parents.iter().map(|&p| nodes[p].value.as_ref()).collect();
            let pg = local_backward(&node.op, &parent_vals, &node.value, &g);
            for (&p, gp) in node.parents.iter().zip(pg) {
                if !nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gp.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(gp),
                }
            }
        }
        let shapes = nodes[..=output.id].iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients of a scalar with respect to every leaf on the tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for a leaf `var`; zeros when the output does not depend on
    /// it. Intermediate gradients are released during the sweep.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        match self.grads.get(var.id) {
            Some(Some(g)) => g.clone(),
            _ => {
                let shape = self
                    .shapes
                    .get(var.id)
                    .cloned()
                    .unwrap_or_else(|| var.value().shape().to_vec());
                Tensor::zeros(&shape)
            }
        }
    }
}

fn bcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    if a.shape() == b.shape() {
        Ok(Bcast::Same)
    } else if a.shape().len() == b.shape().len() + 1 && &a.shape()[1..] == b.shape() {
        Ok(Bcast::Rhs)
    } else if b.shape().len() == a.shape().len() + 1 && &b.shape()[1..] == a.shape() {
        Ok(Bcast::Lhs)
    } else {
        Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

fn zip_bcast(a: &Tensor, b: &Tensor, kind: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let shape = match kind {
        Bcast::Same | Bcast::Rhs => a.shape(),
        Bcast::Lhs => b.shape(),
    };
    let data: Vec<f64> = match kind {
        Bcast::Same => a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        Bcast::Rhs => {
            let w = b.len().max(1);
            a.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, b.data()[i % w]))
                .collect()
        }
        Bcast::Lhs => {
            let w = a.len().max(1);
            b.data()
                .iter()
                .enumerate()
                .map(|(i, &y)| f(a.data()[i % w], y))
                .collect()
        }
    };
    Tensor::new(shape.to_vec(), data).expect("broadcast shape")
}

/// Sums a batch-shaped gradient down to the repeated operand's shape.
fn reduce_rows(g: &Tensor, target_shape: &[usize]) -> Tensor {
    let w: usize = target_shape.iter().product();
    let mut out = vec![0.0; w];
    if w > 0 {
        for chunk in g.data().chunks(w) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
    }
    Tensor::new(target_shape.to_vec(), out).expect("reduce shape")
}

fn local_backward(op: &Op, inputs: &[&Tensor], out: &Tensor, g: &Tensor) -> Vec<Tensor> {
    match op {
        Op::Input => Vec::new(),
        Op::Add(k) | Op::Sub(k) => {
            let sign = if matches!(op, Op::Sub(_)) { -1.0 } else { 1.0 };
            let ga = match k {
                Bcast::Lhs => reduce_rows(g, inputs[0].shape()),
                _ => g.clone(),
            };
            let gb = match k {
                Bcast::Rhs => reduce_rows(g, inputs[1].shape()),
                _ => g.clone(),
            };
            vec![ga, gb.map(|v| sign * v)]
        }
        Op::Mul(k) => {
            let (a, b) = (inputs[0], inputs[1]);
            match k {
                Bcast::Same => vec![
                    zip_bcast(g, b, Bcast::Same, |x, y| x * y),
                    zip_bcast(g, a, Bcast::Same, |x, y| x * y),
                ],
                Bcast::Rhs => vec![
                    zip_bcast(g, b, Bcast::Rhs, |x, y| x * y),
                    reduce_rows(&zip_bcast(g, a, Bcast::Same, |x, y| x * y), b.shape()),
                ],
                Bcast::Lhs => vec![
                    reduce_rows(&zip_bcast(g, b, Bcast::Same, |x, y| x * y), a.shape()),
                    zip_bcast(g, a, Bcast::Rhs, |x, y| x * y),
                ],
            }
        }
        Op::Scale(c) => vec![g.map(|v| v * c)],
        Op::AddScalar => vec![g.clone()],
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let ga = tensor::matmul_bt(g.data(), b.data(), n, m, k);
            let gb = tensor::matmul_at(a.data(), g.data(), n, k, m);
            vec![
                Tensor::new(vec![n, k], ga).expect("matmul grad"),
                Tensor::new(vec![k, m], gb).expect("matmul grad"),
            ]
        }
        Op::Relu => vec![zip_bcast(
            g,
            inputs[0],
            Bcast::Same,
            |gv, x| {
                if x > 0.0 {
                    gv
                } else {
                    0.0
                }
            },
        )],
        Op::Tanh => vec![zip_bcast(g, out, Bcast::Same, |gv, y| gv * (1.0 - y * y))],
        Op::Exp => vec![zip_bcast(g, out, Bcast::Same, |gv, y| gv * y)],
        Op::Square => vec![zip_bcast(g, inputs[0], Bcast::Same, |gv, x| 2.0 * x * gv)],
        Op::Sqrt => vec![zip_bcast(g, out, Bcast::Same, |gv, y| gv / (2.0 * y))],
        Op::Sum => vec![Tensor::full(inputs[0].shape(), g.item())],
        Op::Mean => {
            let n = inputs[0].len().max(1) as f64;
            vec![Tensor::full(inputs[0].shape(), g.item() / n)]
        }
        Op::Concat(widths) => {
            let rows = out.rows();
            let total: usize = widths.iter().sum();
            let mut offset = 0;
            let mut res = Vec::with_capacity(widths.len());
            for (input, &w) in inputs.iter().zip(widths) {
                let mut data = Vec::with_capacity(rows * w);
                for r in 0..rows {
                    data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                }
                res.push(Tensor::new(input.shape().to_vec(), data).expect("concat grad"));
                offset += w;
            }
            res
        }
        Op::SliceRows(start) => {
            let mut full = Tensor::zeros(inputs[0].shape());
            let c = inputs[0].cols();
            full.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
            vec![full]
        }
        Op::L2NormRows => {
            let x = inputs[0];
            let c = x.cols();
            let mut gx = Tensor::zeros(x.shape());
            for i in 0..x.rows() {
                let norm = out.data()[i];
                if norm == 0.0 {
                    continue;
                }
                let s = g.data()[i] / norm;
                for (o, &v) in gx.row_mut(i).iter_mut().zip(x.row(i)) {
                    *o = s * v;
                }
                debug_assert_eq!(gx.row(i).len(), c);
            }
            vec![gx]
        }
        Op::Softmax => {
            let c = out.cols();
            let mut gx = Tensor::zeros(out.shape());
            for i in 0..out.rows() {
                let y = out.row(i);
                let gr = &g.data()[i * c..(i + 1) * c];
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((o, &yv), &gv) in gx.row_mut(i).iter_mut().zip(y).zip(gr) {
                    *o = yv * (gv - dot);
                }
            }
            vec![gx]
        }
        Op::CrossEntropy(labels) => {
            let logits = inputs[0];
            let c = logits.cols();
            let b = logits.rows();
            let mut p = tensor::softmax_rows(logits.data(), c);
            let scale = g.item() / b as f64;
            for (i, &l) in labels.iter().enumerate() {
                p[i * c + l] -= 1.0;
            }
            for v in p.iter_mut() {
                *v *= scale;
            }
            vec![Tensor::new(logits.shape().to_vec(), p).expect("ce grad")]
        }
        Op::Custom(prim) => prim.backward(inputs, out, g),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands live on different tapes".into()))
        }
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        mk: fn(Bcast) -> Op,
        f: fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let kind = bcast_kind(name, &a, &b)?;
        let out = zip_bcast(&a, &b, kind, f);
        Ok(self.tape.derived(out, vec![self.id, other.id], mk(kind)))
    }

    fn unary(self, op: Op, out: Tensor) -> Var<'t> {
        self.tape.derived(out, vec![self.id], op)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub, |x, y| x - y)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul, |x, y| x * y)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v * c);
        self.unary(Op::Scale(c), out)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v + c);
        self.unary(Op::AddScalar, out)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::dim("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
        }
        let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let out = Tensor::new(vec![n, m], tensor::matmul(a.data(), b.data(), n, k, m))?;
        Ok(self.tape.derived(out, vec![self.id, other.id], Op::MatMul))
    }

    pub fn relu(self) -> Var<'t> {
        let out = self.value().map(|v| v.max(0.0));
        self.unary(Op::Relu, out)
    }

    pub fn tanh(self) -> Var<'t> {
        let out = self.value().map(f64::tanh);
        self.unary(Op::Tanh, out)
    }

    pub fn exp(self) -> Var<'t> {
        let out = self.value().map(f64::exp);
        self.unary(Op::Exp, out)
    }

    pub fn square(self) -> Var<'t> {
        let out = self.value().map(|v| v * v);
        self.unary(Op::Square, out)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        let v = self.value();
        if let Some(bad) = v.data().iter().find(|x| **x < 0.0) {
            return Err(Error::domain("sqrt", format!("negative input {bad}")));
        }
        let out = v.map(f64::sqrt);
        Ok(self.unary(Op::Sqrt, out))
    }

    pub fn sum(self) -> Var<'t> {
        let out = Tensor::scalar(self.value().sum());
        self.unary(Op::Sum, out)
    }

    pub fn mean(self) -> Var<'t> {
        let v = self.value();
        let out = Tensor::scalar(v.sum() / v.len().max(1) as f64);
        self.unary(Op::Mean, out)
    }

    /// Concatenates matrices with equal row counts along the last axis.
    pub fn concat_last(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::Empty("concat of nothing".into()))?;
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let rows = vals[0].rows();
        for (p, v) in parts.iter().zip(&vals) {
            first.same_tape(p)?;
            if v.shape().len() != 2 || v.rows() != rows {
                return Err(Error::dim("concat_last", format!("part {:?}", v.shape())));
            }
        }
        let widths: Vec<usize> = vals.iter().map(|v| v.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &vals {
                data.extend_from_slice(v.row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(first
            .tape
            .derived(out, parts.iter().map(|p| p.id).collect(), Op::Concat(widths)))
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t>> {
        let v = self.value();
        if start > end || end > v.rows() {
            return Err(Error::dim("slice_rows", format!("{start}..{end} of {} rows", v.rows())));
        }
        let idx: Vec<usize> = (start..end).collect();
        let out = v.select_rows(&idx);
        Ok(self.unary(Op::SliceRows(start), out))
    }

    /// Euclidean norm of every row, shape `[rows]`.
    pub fn l2_norm_rows(self) -> Var<'t> {
        let v = self.value();
        let out = Tensor::vector(v.row_norms());
        self.unary(Op::L2NormRows, out)
    }

    pub fn softmax(self) -> Var<'t> {
        let v = self.value();
        let out = Tensor::new(v.shape().to_vec(), tensor::softmax_rows(v.data(), v.cols())).expect("softmax shape");
        self.unary(Op::Softmax, out)
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let out = Tensor::scalar(cross_entropy_value(&v, labels)?);
        Ok(self.unary(Op::CrossEntropy(labels.to_vec()), out))
    }
}

pub fn cross_entropy_value(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (b, c) = (logits.rows(), logits.cols());
    if labels.len() != b {
        return Err(Error::dim(
            "cross_entropy",
            format!("{b} rows, {} labels", labels.len()),
        ));
    }
    if b == 0 {
        return Err(Error::Empty("cross_entropy batch".into()));
    }
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::domain("cross_entropy", format!("label {l} outside [0, {c})")));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[l];
    }
    Ok(total / b as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn identity_matmul() {
        let t = Tape::new();
        let i = t.constant(Tensor::identity(2));
        let m = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let p = i.matmul(m).unwrap();
        assert_eq!(p.value().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn relu_and_softmax_forward() {
        let t = Tape::new();
        let x = t.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
        let s = t.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap()).softmax();
        assert_eq!(s.value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = x.square().sum();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_output_gives_zero_gradient() {
        let t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let c = t.constant(Tensor::vector(vec![3.0, 4.0]));
        let y = c.square().sum();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x.square()), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_errors() {
        let t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]));
        let b = t.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(a.matmul(b), Err(Error::Dimension { .. })));
        let c = t.leaf(Tensor::zeros(&[4]));
        assert!(a.add(c).is_err());
        let neg = t.leaf(Tensor::vector(vec![-1.0]));
        assert!(matches!(neg.sqrt(), Err(Error::Domain { .. })));
    }

    #[test]
    fn bias_broadcast_gradient_sums_over_batch() {
        let t = Tape::new();
        let x = t.constant(Tensor::matrix(3, 2, vec![1.0; 6]).unwrap());
        let b = t.leaf(Tensor::vector(vec![0.5, -0.5]));
        let y = x.add(b).unwrap().sum();
        assert_eq!(t.backward(y).unwrap().get(b).data(), &[3.0, 3.0]);
    }

    #[test]
    fn cross_entropy_reference_values() {
        let two = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        approx(cross_entropy_value(&two, &[0]).unwrap(), 2f64.ln());
        let five = Tensor::matrix(1, 5, vec![0.3; 5]).unwrap();
        approx(cross_entropy_value(&five, &[4]).unwrap(), 5f64.ln());
        let sure = Tensor::matrix(1, 3, vec![0.0, 800.0, 0.0]).unwrap();
        assert!(cross_entropy_value(&sure, &[1]).unwrap() < 1e-12);
        assert!(cross_entropy_value(&two, &[2]).is_err());
    }

    #[test]
    fn custom_square_matches_builtin() {
        let sq = register_custom_primitive(
            "square",
            |x| Ok(x[0].map(|v| v * v)),
            |x, _out, g| {
                vec![Tensor::new(
                    x[0].shape().to_vec(),
                    x[0].data().iter().zip(g.data()).map(|(a, b)| 2.0 * a * b).collect(),
                )
                .unwrap()]
            },
        );
        let t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.3, -1.7, 2.5]));
        let custom = t.apply(&sq, &[x]).unwrap().sum();
        let builtin = x.square().sum();
        let gc = t.backward(custom).unwrap().get(x);
        let gb = t.backward(builtin).unwrap().get(x);
        assert_eq!(gc, gb);
    }
}
