//! Grouped scaled dot-product attention: rows of `q`, `k`, `v` are split
//! into groups and each row attends over the members of its own group.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

fn check<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, groups: &[Vec<usize>]) -> Result<()> {
    if q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::shape(format!(
            "attention operands must be equal matrices: {:?} {:?} {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let rows = q.shape()[0];
    if groups.iter().flatten().any(|&r| r >= rows) {
        return Err(Error::shape("attention group references a missing row"));
    }
    Ok(())
}

/// Returns the attention output (rows outside every group are zero) and
/// the per-group row-major probability matrices.
pub fn segment_attention_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    groups: &[Vec<usize>],
) -> Result<(Tensor<T>, Vec<Vec<T>>)> {
    check(q, k, v, groups)?;
    let (rows, d) = (q.shape()[0], q.shape()[1]);
    let scale = T::one() / T::of_usize(d).sqrt();
    let mut out = vec![T::zero(); rows * d];
    let mut probs = Vec::with_capacity(groups.len());
    for g in groups {
        let m = g.len();
        let mut p = vec![T::zero(); m * m];
        for (a, &ra) in g.iter().enumerate() {
            let qa = q.row(ra);
            let scores = &mut p[a * m..(a + 1) * m];
            let mut mx = T::neg_infinity();
            for (b, &rb) in g.iter().enumerate() {
                let s = dot(qa, k.row(rb)) * scale;
                scores[b] = s;
                mx = mx.max(s);
            }
            let mut z = T::zero();
            for s in scores.iter_mut() {
                *s = (*s - mx).exp();
                z += *s;
            }
            for s in scores.iter_mut() {
                *s /= z;
            }
            let o = &mut out[ra * d..(ra + 1) * d];
            for (b, &rb) in g.iter().enumerate() {
                let w = scores[b];
                for (oc, &vc) in o.iter_mut().zip(v.row(rb)) {
                    *oc += w * vc;
                }
            }
        }
        probs.push(p);
    }
    Ok((Tensor::new(vec![rows, d], out)?, probs))
}

/// Gradients with respect to `q`, `k` and `v` given the upstream gradient.
pub(crate) fn segment_attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    groups: &[Vec<usize>],
    probs: &[Vec<T>],
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (rows, d) = (q.shape()[0], q.shape()[1]);
    let scale = T::one() / T::of_usize(d).sqrt();
    let mut dq = vec![T::zero(); rows * d];
    let mut dk = vec![T::zero(); rows * d];
    let mut dv = vec![T::zero(); rows * d];
    let mut dp = Vec::new();
    for (g, p) in groups.iter().zip(probs) {
        let m = g.len();
        for (a, &ra) in g.iter().enumerate() {
            let go = grad.row(ra);
            let pa = &p[a * m..(a + 1) * m];
            dp.clear();
            dp.extend(g.iter().map(|&rb| dot(go, v.row(rb))));
            let mean: T = pa.iter().zip(&dp).map(|(&x, &y)| x * y).sum();
            for (b, &rb) in g.iter().enumerate() {
                for c in 0..d {
                    dv[rb * d + c] += pa[b] * go[c];
                }
                let ds = pa[b] * (dp[b] - mean) * scale;
                if ds == T::zero() {
                    continue;
                }
                let (qa, kb) = (q.row(ra), k.row(rb));
                for c in 0..d {
                    dq[ra * d + c] += ds * kb[c];
                    dk[rb * d + c] += ds * qa[c];
                }
            }
        }
    }
    let shape = vec![rows, d];
    (
        Tensor::new(shape.clone(), dq).expect("shape"),
        Tensor::new(shape.clone(), dk).expect("shape"),
        Tensor::new(shape, dv).expect("shape"),
    )
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}
