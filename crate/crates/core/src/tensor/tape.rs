use std::cell::{Ref, RefCell};
use std::ops::Range;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::attention::{segment_attention_backward, segment_attention_forward};
use super::{axis_extents, unary_derivative, BinaryOp, ReduceOp, Tensor, UnaryOp};

enum Op<T> {
    Leaf,
    Unary(usize, UnaryOp),
    Binary(usize, usize, BinaryOp),
    Scale(usize, T),
    Shift(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Reduce {
        input: usize,
        axis: usize,
        op: ReduceOp,
        selection: Vec<(usize, usize, T)>,
    },
    Softmax(usize, usize),
    Concat(Vec<usize>, usize),
    Slice(usize, usize, Range<usize>),
    GatherRows(usize, Rc<[usize]>),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        groups: Rc<[Vec<usize>]>,
        probs: Vec<Vec<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records operations on [`Var`]s for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so walking them from the back
/// visits every node after all of its consumers.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf)
    }

    /// Records a value whose gradient is still tracked but never needed;
    /// identical to [`Tape::leaf`] apart from intent.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let value = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&Tensor<T>> = parts.iter().map(|p| &nodes[p.id].value).collect();
            Tensor::concat(&refs, axis)?
        };
        Ok(self.push(value, Op::Concat(parts.iter().map(|p| p.id).collect(), axis)))
    }

    /// Attention where each row of `q` attends over the rows of its group.
    pub fn segment_attention<'t>(
        &'t self,
        q: Var<'t, T>,
        k: Var<'t, T>,
        v: Var<'t, T>,
        groups: Rc<[Vec<usize>]>,
    ) -> Result<Var<'t, T>> {
        let (value, probs) = {
            let nodes = self.nodes.borrow();
            segment_attention_forward(&nodes[q.id].value, &nodes[k.id].value, &nodes[v.id].value, &groups)?
        };
        Ok(self.push(
            value,
            Op::Attention {
                q: q.id,
                k: k.id,
                v: v.id,
                groups,
                probs,
            },
        ))
    }

    /// Propagates gradients from the scalar `loss` to every recorded node.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), T::one()));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            propagate(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += *x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Sums a broadcast gradient back down to `shape` (a trailing suffix).
fn unbroadcast<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let n: usize = shape.iter().product();
    let mut data = vec![T::zero(); n];
    for (i, &x) in g.data().iter().enumerate() {
        data[i % n] += x;
    }
    Tensor::new(shape.to_vec(), data).expect("suffix shape")
}

fn propagate<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let val = |id: usize| &nodes[id].value;
    match &node.op {
        Op::Leaf => {}
        Op::Unary(x, op) => {
            let xs = val(*x);
            let data = xs
                .data()
                .iter()
                .zip(node.value.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| gi * unary_derivative(*op, xi, yi))
                .collect();
            accumulate(grads, *x, Tensor::new(xs.shape().to_vec(), data).expect("shape"));
        }
        Op::Binary(a, b, op) => {
            let (av, bv) = (val(*a), val(*b));
            let (la, lb) = (av.numel(), bv.numel());
            let n = g.numel();
            let mut ga = vec![T::zero(); n];
            let mut gb = vec![T::zero(); n];
            for i in 0..n {
                let (x, y, gi) = (av.data()[i % la], bv.data()[i % lb], g.data()[i]);
                let (da, db) = match op {
                    BinaryOp::Add => (gi, gi),
                    BinaryOp::Sub => (gi, -gi),
                    BinaryOp::Mul => (gi * y, gi * x),
                    BinaryOp::Div => (gi / y, -gi * x / (y * y)),
                };
                ga[i] = da;
                gb[i] = db;
            }
            let shape = g.shape().to_vec();
            let ga = Tensor::new(shape.clone(), ga).expect("shape");
            let gb = Tensor::new(shape, gb).expect("shape");
            accumulate(grads, *a, unbroadcast(&ga, av.shape()));
            accumulate(grads, *b, unbroadcast(&gb, bv.shape()));
        }
        Op::Scale(x, c) => accumulate(grads, *x, g.scale(*c)),
        Op::Shift(x) => accumulate(grads, *x, g.clone()),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let ga = g.matmul(&bv.transpose().expect("2-D")).expect("shape");
            let gb = av.transpose().expect("2-D").matmul(g).expect("shape");
            accumulate(grads, *a, ga);
            accumulate(grads, *b, gb);
        }
        Op::Transpose(x) => accumulate(grads, *x, g.transpose().expect("2-D")),
        Op::Reshape(x) => accumulate(grads, *x, g.reshape(val(*x).shape()).expect("numel")),
        Op::Reduce {
            input,
            axis,
            op,
            selection,
        } => {
            let xs = val(*input);
            let mut data = vec![T::zero(); xs.numel()];
            match op {
                ReduceOp::Sum | ReduceOp::Mean => {
                    let (outer, n, inner) = axis_extents(xs.shape(), *axis);
                    let f = if *op == ReduceOp::Mean {
                        T::one() / T::of_usize(n)
                    } else {
                        T::one()
                    };
                    for o in 0..outer {
                        for k in 0..n {
                            for r in 0..inner {
                                data[(o * n + k) * inner + r] = g.data()[o * inner + r] * f;
                            }
                        }
                    }
                }
                _ => {
                    for &(oi, ii, w) in selection {
                        data[ii] += g.data()[oi] * w;
                    }
                }
            }
            accumulate(grads, *input, Tensor::new(xs.shape().to_vec(), data).expect("shape"));
        }
        Op::Softmax(x, axis) => {
            let y = &node.value;
            let (outer, n, inner) = axis_extents(y.shape(), *axis);
            let mut data = vec![T::zero(); y.numel()];
            for o in 0..outer {
                for r in 0..inner {
                    let idx = |k: usize| (o * n + k) * inner + r;
                    let dot: T = (0..n).map(|k| g.data()[idx(k)] * y.data()[idx(k)]).sum();
                    for k in 0..n {
                        data[idx(k)] = y.data()[idx(k)] * (g.data()[idx(k)] - dot);
                    }
                }
            }
            accumulate(grads, *x, Tensor::new(y.shape().to_vec(), data).expect("shape"));
        }
        Op::Concat(parts, axis) => {
            let mut start = 0;
            for &p in parts {
                let w = val(p).shape()[*axis];
                accumulate(grads, p, g.slice(*axis, start..start + w).expect("range"));
                start += w;
            }
        }
        Op::Slice(x, axis, range) => {
            let xs = val(*x);
            let (outer, n, inner) = axis_extents(xs.shape(), *axis);
            let width = range.end - range.start;
            let mut data = vec![T::zero(); xs.numel()];
            for o in 0..outer {
                let dst = (o * n + range.start) * inner;
                let src = o * width * inner;
                data[dst..dst + width * inner].copy_from_slice(&g.data()[src..src + width * inner]);
            }
            accumulate(grads, *x, Tensor::new(xs.shape().to_vec(), data).expect("shape"));
        }
        Op::GatherRows(x, indices) => {
            let xs = val(*x);
            let cols = xs.shape()[1];
            let mut data = vec![T::zero(); xs.numel()];
            for (r, &src) in indices.iter().enumerate() {
                for c in 0..cols {
                    data[src * cols + c] += g.data()[r * cols + c];
                }
            }
            accumulate(grads, *x, Tensor::new(xs.shape().to_vec(), data).expect("shape"));
        }
        Op::Attention { q, k, v, groups, probs } => {
            let (dq, dk, dv) = segment_attention_backward(val(*q), val(*k), val(*v), groups, probs, g);
            accumulate(grads, *q, dq);
            accumulate(grads, *k, dk);
            accumulate(grads, *v, dv);
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `var`; zeros when the loss
    /// does not depend on it.
    pub fn get(&self, var: Var<'_, T>) -> Tensor<T> {
        match self.grads.get(var.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.tape.value_ref(var.id).shape()),
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value_ref(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_ref(self.id).shape().to_vec()
    }

    pub fn item(&self) -> Result<T> {
        self.tape.value_ref(self.id).item()
    }

    fn same_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Usage("operands live on different tapes".into()))
        }
    }

    pub fn unary(self, op: UnaryOp) -> Result<Self> {
        let value = self.tape.value_ref(self.id).unary(op)?;
        Ok(self.tape.push(value, Op::Unary(self.id, op)))
    }

    fn infallible(self, op: UnaryOp) -> Self {
        self.unary(op).expect("op has no domain restriction")
    }

    pub fn silu(self) -> Self {
        self.infallible(UnaryOp::Silu)
    }

    pub fn sigmoid(self) -> Self {
        self.infallible(UnaryOp::Sigmoid)
    }

    pub fn relu(self) -> Self {
        self.infallible(UnaryOp::Relu)
    }

    pub fn exp(self) -> Self {
        self.infallible(UnaryOp::Exp)
    }

    pub fn neg(self) -> Self {
        self.infallible(UnaryOp::Neg)
    }

    pub fn square(self) -> Self {
        self.infallible(UnaryOp::Square)
    }

    pub fn softplus(self) -> Self {
        self.infallible(UnaryOp::Softplus)
    }

    pub fn tanh(self) -> Self {
        self.infallible(UnaryOp::Tanh)
    }

    pub fn log(self) -> Result<Self> {
        self.unary(UnaryOp::Log)
    }

    pub fn binary(self, other: Self, op: BinaryOp) -> Result<Self> {
        self.same_tape(&other)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.binary(&nodes[other.id].value, op)?
        };
        Ok(self.tape.push(value, Op::Binary(self.id, other.id, op)))
    }

    pub fn add(self, other: Self) -> Result<Self> {
        self.binary(other, BinaryOp::Add)
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        self.binary(other, BinaryOp::Sub)
    }

    pub fn mul(self, other: Self) -> Result<Self> {
        self.binary(other, BinaryOp::Mul)
    }

    pub fn div(self, other: Self) -> Result<Self> {
        self.binary(other, BinaryOp::Div)
    }

    pub fn scale(self, c: T) -> Self {
        let value = self.tape.value_ref(self.id).scale(c);
        self.tape.push(value, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: T) -> Self {
        let value = self.tape.value_ref(self.id).map(|x| x + c);
        self.tape.push(value, Op::Shift(self.id))
    }

    pub fn matmul(self, other: Self) -> Result<Self> {
        self.same_tape(&other)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.matmul(&nodes[other.id].value)?
        };
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(self) -> Result<Self> {
        let value = self.tape.value_ref(self.id).transpose()?;
        Ok(self.tape.push(value, Op::Transpose(self.id)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let value = self.tape.value_ref(self.id).reshape(shape)?;
        Ok(self.tape.push(value, Op::Reshape(self.id)))
    }

    pub fn reduce(self, axis: usize, op: ReduceOp) -> Result<Self> {
        let (value, selection) = self.tape.value_ref(self.id).reduce_with_selection(axis, op)?;
        Ok(self.tape.push(
            value,
            Op::Reduce {
                input: self.id,
                axis,
                op,
                selection,
            },
        ))
    }

    pub fn sum(self, axis: usize) -> Result<Self> {
        self.reduce(axis, ReduceOp::Sum)
    }

    pub fn mean(self, axis: usize) -> Result<Self> {
        self.reduce(axis, ReduceOp::Mean)
    }

    /// Reduction over all elements to a rank-0 value.
    pub fn reduce_all(self, op: ReduceOp) -> Result<Self> {
        let n = self.tape.value_ref(self.id).numel();
        self.reshape(&[n])?.reduce(0, op)
    }

    pub fn sum_all(self) -> Result<Self> {
        self.reduce_all(ReduceOp::Sum)
    }

    pub fn mean_all(self) -> Result<Self> {
        self.reduce_all(ReduceOp::Mean)
    }

    pub fn softmax(self, axis: usize) -> Result<Self> {
        let value = self.tape.value_ref(self.id).softmax(axis)?;
        Ok(self.tape.push(value, Op::Softmax(self.id, axis)))
    }

    pub fn slice(self, axis: usize, range: Range<usize>) -> Result<Self> {
        let value = self.tape.value_ref(self.id).slice(axis, range.clone())?;
        Ok(self.tape.push(value, Op::Slice(self.id, axis, range)))
    }

    pub fn gather_rows(self, indices: Rc<[usize]>) -> Result<Self> {
        let value = self.tape.value_ref(self.id).gather_rows(&indices)?;
        Ok(self.tape.push(value, Op::GatherRows(self.id, indices)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0f64));
        let y = x.square();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).item().unwrap(), 6.0);
    }

    #[test]
    fn silu_derivative_at_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(0.0f64));
        let g = tape.backward(x.silu()).unwrap();
        assert!((g.get(x).item().unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn matmul_gradient_example() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_f64(&[1, 2], &[1.0, 1.0]).unwrap());
        let b = tape.leaf(Tensor::from_f64(&[2, 1], &[2.0, 5.0]).unwrap());
        let s = a.matmul(b).unwrap().sum_all().unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).data(), &[2.0, 5.0]);
        assert_eq!(g.get(b).data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let y = tape.leaf(Tensor::scalar(4.0f64));
        let g = tape.backward(y.square()).unwrap();
        assert_eq!(g.get(x), Tensor::zeros(&[2]));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(2.0f64));
        let y = x.mul(x).unwrap().add(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).item().unwrap(), 5.0);
    }
}
