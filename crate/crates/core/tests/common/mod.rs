//! Central finite differences, used as an independent oracle for taped
//! gradients.

#![allow(dead_code)]

use hypergen::tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-6;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both vanish.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

/// Central-difference gradient of a scalar function of a flat vector,
/// restricted to `coords`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], coords: &[usize], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let x0 = x[i];
            x[i] = x0 + h;
            let up = f(&x);
            x[i] = x0 - h;
            let down = f(&x);
            x[i] = x0;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error between the taped gradient of `f` at `inputs` and
/// central differences over every coordinate of every input.
pub fn check_tape_gradient<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars);
    let grads = tape.backward(out).expect("scalar output");
    let analytic: Vec<f64> = vars.iter().flat_map(|v| grads.get(*v).into_data()).collect();

    let sizes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let eval = |x: &[f64]| {
        let tape = Tape::new();
        let mut at = 0;
        let vars: Vec<_> = inputs
            .iter()
            .zip(&sizes)
            .map(|(t, &n)| {
                let v = tape.leaf(Tensor::new(t.shape().to_vec(), x[at..at + n].to_vec()).unwrap());
                at += n;
                v
            })
            .collect();
        f(&tape, &vars).item().unwrap()
    };
    let coords: Vec<usize> = (0..flat.len()).collect();
    let numeric = fd_gradient(eval, &flat, &coords, FD_STEP);
    rel_error(&analytic, &numeric)
}

pub fn randn<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random values bounded away from zero in magnitude.
pub fn rand_away_from_zero<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    randn(shape, rng).map(|x| if x >= 0.0 { x + 0.2 } else { x - 0.2 })
}

/// Weighted sum with fixed pseudo-random coefficients, turning any tensor
/// into a scalar whose gradient exercises every entry differently.
pub fn probe<'t>(tape: &'t Tape<f64>, v: Var<'t, f64>) -> Var<'t, f64> {
    let shape = v.shape();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * 0.7548776662).sin() + 0.3).collect();
    let w = tape.constant(Tensor::new(shape, w).unwrap());
    v.mul(w).unwrap().sum_all().unwrap()
}
