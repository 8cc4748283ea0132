//! Dense row-major tensors and the reverse-mode gradient tape built on them.
//!
//! [`Tensor`] is a plain value: a shape and a flat data buffer. Recording a
//! tensor on a [`Tape`] yields a [`Var`], whose operations are remembered so
//! that [`Tape::backward`] can replay them in reverse.

mod attention;
mod tape;

pub use attention::segment_attention_forward;
pub use tape::{Gradients, Tape, Var};

use std::ops::Range;

use crate::error::{Error, Result};
use crate::scalar::{self, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Silu,
    Sigmoid,
    Relu,
    Exp,
    Log,
    Neg,
    Square,
    Softplus,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
    Min,
    Median,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Result shape of a trailing-axis broadcast, or `None` if incompatible.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() >= b.len() && a.ends_with(b) {
        Some(a.to_vec())
    } else if b.ends_with(a) {
        Some(b.to_vec())
    } else {
        None
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.data.as_slice() {
            [x] => Ok(*x),
            _ => Err(Error::shape(format!("item() on shape {:?}", self.shape))),
        }
    }

    pub fn get(&self, index: &[usize]) -> Option<T> {
        if index.len() != self.shape.len() {
            return None;
        }
        let mut flat = 0;
        for (&i, &n) in index.iter().zip(&self.shape) {
            if i >= n {
                return None;
            }
            flat = flat * n + i;
        }
        Some(self.data[flat])
    }

    /// Row `r` of a matrix.
    pub fn row(&self, r: usize) -> &[T] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn unary(&self, op: UnaryOp) -> Result<Self> {
        if op == UnaryOp::Log {
            if let Some(bad) = self.data.iter().find(|&&x| x <= T::zero()) {
                return Err(Error::domain(format!("log of non-positive value {bad}")));
            }
        }
        Ok(self.map(|x| apply_unary(op, x)))
    }

    pub fn binary(&self, other: &Self, op: BinaryOp) -> Result<Self> {
        let shape = broadcast_shape(&self.shape, &other.shape)
            .ok_or_else(|| Error::shape(format!("cannot broadcast {:?} with {:?}", self.shape, other.shape)))?;
        let n: usize = shape.iter().product();
        let (la, lb) = (self.data.len(), other.data.len());
        let data = (0..n)
            .map(|i| apply_binary(op, self.data[i % la], other.data[i % lb]))
            .collect();
        Ok(Self { shape, data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.binary(other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.binary(other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.binary(other, BinaryOp::Mul)
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        self.binary(other, BinaryOp::Div)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = match self.shape.as_slice() {
            [m, k] => (*m, *k),
            s => return Err(Error::shape(format!("matmul lhs must be 2-D, got {s:?}"))),
        };
        let (k2, n) = match other.shape.as_slice() {
            [k2, n] => (*k2, *n),
            s => return Err(Error::shape(format!("matmul rhs must be 2-D, got {s:?}"))),
        };
        if k != k2 {
            return Err(Error::shape(format!("matmul inner axes disagree: {m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == T::zero() {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in row.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = match self.shape.as_slice() {
            [r, c] => (*r, *c),
            s => return Err(Error::shape(format!("transpose needs 2-D, got {s:?}"))),
        };
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data,
        })
    }

    fn check_axis(&self, axis: usize) -> Result<()> {
        if axis >= self.shape.len() {
            return Err(Error::shape(format!(
                "axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    /// Reduces `axis` away. For max/min/median also returns, per output
    /// element, the contributing input indices and their weights (the
    /// subgradient used on the tape).
    pub(crate) fn reduce_with_selection(&self, axis: usize, op: ReduceOp) -> Result<(Self, Vec<(usize, usize, T)>)> {
        self.check_axis(axis)?;
        let (outer, n, inner) = axis_extents(&self.shape, axis);
        if n == 0 {
            return Err(Error::domain("reduction over an empty axis"));
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        let mut out = vec![T::zero(); outer * inner];
        let mut selection = Vec::new();
        let mut scratch: Vec<(T, usize)> = Vec::with_capacity(n);
        for o in 0..outer {
            for r in 0..inner {
                let oi = o * inner + r;
                let idx = |k: usize| (o * n + k) * inner + r;
                match op {
                    ReduceOp::Sum | ReduceOp::Mean => {
                        let mut s = T::zero();
                        for k in 0..n {
                            s += self.data[idx(k)];
                        }
                        out[oi] = if op == ReduceOp::Mean { s / T::of_usize(n) } else { s };
                    }
                    ReduceOp::Max | ReduceOp::Min => {
                        let mut best = idx(0);
                        for k in 1..n {
                            let v = self.data[idx(k)];
                            let better = if op == ReduceOp::Max {
                                v > self.data[best]
                            } else {
                                v < self.data[best]
                            };
                            if better {
                                best = idx(k);
                            }
                        }
                        out[oi] = self.data[best];
                        selection.push((oi, best, T::one()));
                    }
                    ReduceOp::Median => {
                        scratch.clear();
                        scratch.extend((0..n).map(|k| (self.data[idx(k)], idx(k))));
                        scratch.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
                        if n % 2 == 1 {
                            let (v, i) = scratch[n / 2];
                            out[oi] = v;
                            selection.push((oi, i, T::one()));
                        } else {
                            let (lo, il) = scratch[n / 2 - 1];
                            let (hi, ih) = scratch[n / 2];
                            let half = T::lit(0.5);
                            out[oi] = (lo + hi) * half;
                            selection.push((oi, il, half));
                            selection.push((oi, ih, half));
                        }
                    }
                }
            }
        }
        Ok((Self { shape, data: out }, selection))
    }

    pub fn reduce(&self, axis: usize, op: ReduceOp) -> Result<Self> {
        self.reduce_with_selection(axis, op).map(|(t, _)| t)
    }

    /// Reduction over every element; returns a rank-0 tensor.
    pub fn reduce_all(&self, op: ReduceOp) -> Result<Self> {
        self.reshape(&[self.numel()])?.reduce(0, op)
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn softmax(&self, axis: usize) -> Result<Self> {
        self.check_axis(axis)?;
        let (outer, n, inner) = axis_extents(&self.shape, axis);
        let mut out = self.data.clone();
        for o in 0..outer {
            for r in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + r;
                let mut m = T::neg_infinity();
                for k in 0..n {
                    m = m.max(self.data[idx(k)]);
                }
                let mut z = T::zero();
                for k in 0..n {
                    let e = (self.data[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    out[idx(k)] /= z;
                }
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of an empty list"))?;
        first.check_axis(axis)?;
        let mut shape = first.shape.clone();
        shape[axis] = 0;
        for p in parts {
            let compatible = p.shape.len() == first.shape.len()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!(
                    "concat along {axis}: {:?} vs {:?}",
                    p.shape, first.shape
                )));
            }
            shape[axis] += p.shape[axis];
        }
        let (outer, _, inner) = axis_extents(&first.shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Self { shape, data })
    }

    pub fn slice(&self, axis: usize, range: Range<usize>) -> Result<Self> {
        self.check_axis(axis)?;
        if range.start > range.end || range.end > self.shape[axis] {
            return Err(Error::shape(format!(
                "slice {range:?} out of range for axis {axis} of {:?}",
                self.shape
            )));
        }
        let (outer, n, inner) = axis_extents(&self.shape, axis);
        let width = range.end - range.start;
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let start = (o * n + range.start) * inner;
            data.extend_from_slice(&self.data[start..start + width * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = width;
        Ok(Self { shape, data })
    }

    /// Rows `indices` of a matrix, in order.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::shape("gather_rows needs a matrix"));
        }
        let cols = self.shape[1];
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= self.shape[0] {
                return Err(Error::shape(format!("row {i} out of range")));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            shape: vec![indices.len(), cols],
            data,
        })
    }
}

pub(crate) fn apply_unary<T: Scalar>(op: UnaryOp, x: T) -> T {
    match op {
        UnaryOp::Silu => scalar::silu(x),
        UnaryOp::Sigmoid => scalar::sigmoid(x),
        UnaryOp::Relu => x.max(T::zero()),
        UnaryOp::Exp => x.exp(),
        UnaryOp::Log => x.ln(),
        UnaryOp::Neg => -x,
        UnaryOp::Square => x * x,
        UnaryOp::Softplus => scalar::softplus(x),
        UnaryOp::Tanh => x.tanh(),
    }
}

/// Derivative of a unary op given its input `x` and output `y`.
pub(crate) fn unary_derivative<T: Scalar>(op: UnaryOp, x: T, y: T) -> T {
    match op {
        UnaryOp::Silu => scalar::silu_grad(x),
        UnaryOp::Sigmoid => y * (T::one() - y),
        UnaryOp::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        UnaryOp::Exp => y,
        UnaryOp::Log => T::one() / x,
        UnaryOp::Neg => -T::one(),
        UnaryOp::Square => x + x,
        UnaryOp::Softplus => scalar::sigmoid(x),
        UnaryOp::Tanh => T::one() - y * y,
    }
}

pub(crate) fn apply_binary<T: Scalar>(op: BinaryOp, a: T, b: T) -> T {
    match op {
        BinaryOp::Add => a + b,
        BinaryOp::Sub => a - b,
        BinaryOp::Mul => a * b,
        BinaryOp::Div => a / b,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn unary_examples() {
        let x = t(&[3], &[0.0, 1.0, -3.0]);
        let s = x.unary(UnaryOp::Silu).unwrap();
        assert_eq!(s.data()[0], 0.0);
        assert!((s.data()[1] - 0.731_058_578_630_005).abs() < 1e-12);
        assert_eq!(x.unary(UnaryOp::Relu).unwrap().data()[2], 0.0);
        assert!(matches!(x.unary(UnaryOp::Log), Err(Error::Domain(_))));
    }

    #[test]
    fn binary_examples() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        let x = t(&[2, 2], &[1.0, -2.0, 3.5, 4.0]);
        assert_eq!(x.mul(&Tensor::zeros(&[2, 2])).unwrap(), Tensor::zeros(&[2, 2]));
        assert_eq!(x.sub(&x).unwrap(), Tensor::zeros(&[2, 2]));
        let row = t(&[2], &[10.0, 20.0]);
        assert_eq!(x.add(&row).unwrap().data(), &[11.0, 18.0, 13.5, 24.0]);
        assert_eq!(row.add(&x).unwrap().shape(), &[2, 2]);
        assert!(matches!(x.add(&t(&[3], &[1.0; 3])), Err(Error::Shape(_))));
        let q = a.div(&Tensor::zeros(&[2])).unwrap();
        assert!(!q.is_finite());
    }

    #[test]
    fn matmul_examples() {
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let v = t(&[2, 1], &[1.0, 2.0]);
        assert_eq!(id.matmul(&v).unwrap(), v);
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[2, 1], &[3.0, 4.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
        assert!(matches!(a.matmul(&a), Err(Error::Shape(_))));
    }

    #[test]
    fn reduce_examples() {
        let m = t(&[4], &[0.1, 0.9, 0.1, 1.0]);
        assert!((m.reduce(0, ReduceOp::Median).unwrap().item().unwrap() - 0.5).abs() < 1e-15);
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(x.reduce(0, ReduceOp::Sum).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(x.reduce(1, ReduceOp::Mean).unwrap().data(), &[1.5, 3.5]);
        let neg = t(&[3], &[-5.0, -1.5, -3.0]);
        assert_eq!(neg.reduce(0, ReduceOp::Max).unwrap().item().unwrap(), -1.5);
        assert_eq!(neg.reduce(0, ReduceOp::Min).unwrap().item().unwrap(), -5.0);
        let odd = t(&[3], &[3.0, 1.0, 2.0]);
        assert_eq!(odd.reduce(0, ReduceOp::Median).unwrap().item().unwrap(), 2.0);
        let empty = Tensor::<f64>::zeros(&[0]);
        assert!(matches!(empty.reduce(0, ReduceOp::Sum), Err(Error::Domain(_))));
        assert!(matches!(x.reduce(2, ReduceOp::Sum), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let s = t(&[2], &[0.0, 0.0]).softmax(0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = t(&[2], &[1000.0, 1000.0]).softmax(0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = t(&[2], &[0.0, 3f64.ln()]).softmax(0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15 && (s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn concat_slice_examples() {
        let a = t(&[2, 1], &[1.0, 2.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        assert_eq!(c.slice(1, 0..1).unwrap(), a);
        assert_eq!(c.slice(1, 1..3).unwrap(), b);
        assert!(matches!(Tensor::<f64>::concat(&[], 0), Err(Error::Shape(_))));
        let v = t(&[3], &[5.0, 6.0, 7.0]);
        assert_eq!(v.slice(0, 0..2).unwrap().data(), &[5.0, 6.0]);
        assert!(matches!(v.slice(0, 2..4), Err(Error::Shape(_))));
    }

    #[test]
    fn new_checks_length() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::<f32>::zeros(&[2, 3]).numel(), 6);
    }
}
