//! The target MLP and the standardized L1-norm regression task.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{silu, Scalar};
use crate::tensor::{Tape, Tensor, Var};

/// Layer widths of an MLP: input width, hidden widths, output width.
/// Hidden layers use silu; the output layer is affine.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
}

impl MlpSpec {
    /// One hidden layer of `hidden` units and a scalar output.
    pub fn l1(inputs: usize, hidden: usize) -> Self {
        Self {
            layer_sizes: vec![inputs, hidden, 1],
        }
    }

    pub fn inputs(&self) -> usize {
        self.layer_sizes[0]
    }

    /// Width of the first hidden layer.
    pub fn hidden(&self) -> usize {
        self.layer_sizes[1]
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// `(fan_in, fan_out)` of weight layer `l`.
    pub fn layer_dims(&self, l: usize) -> (usize, usize) {
        (self.layer_sizes[l], self.layer_sizes[l + 1])
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 3 {
            return Err(Error::config("an MLP needs at least one hidden layer"));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::config("layer sizes must be positive"));
        }
        Ok(())
    }
}

/// Weights of one affine layer. `weight` is `fan_out × fan_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpWeights<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> MlpWeights<T> {
    pub fn zeros(spec: &MlpSpec) -> Self {
        let layers = (0..spec.num_layers())
            .map(|l| {
                let (fan_in, fan_out) = spec.layer_dims(l);
                Layer {
                    weight: Tensor::zeros(&[fan_out, fan_in]),
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn spec(&self) -> MlpSpec {
        let mut sizes = vec![self.layers[0].weight.shape()[1]];
        sizes.extend(self.layers.iter().map(|l| l.weight.shape()[0]));
        MlpSpec { layer_sizes: sizes }
    }

    /// Checks that the layers chain and every entry is finite.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::shape("network has no layers"));
        }
        let mut width = self.layers[0].weight.shape().get(1).copied().unwrap_or(0);
        for (l, layer) in self.layers.iter().enumerate() {
            let ws = layer.weight.shape();
            if ws.len() != 2 || ws[1] != width || layer.bias.shape() != [ws[0]] {
                return Err(Error::shape(format!("layer {l} has inconsistent shapes {ws:?}")));
            }
            if !layer.weight.is_finite() || !layer.bias.is_finite() {
                return Err(Error::Numeric(format!("layer {l} has non-finite entries")));
            }
            width = ws[0];
        }
        Ok(())
    }

    /// First-layer weights oriented input × hidden, the layout the order
    /// parameters are defined on.
    pub fn first_layer_in_out(&self) -> Tensor<T> {
        self.layers[0].weight.transpose().expect("2-D weight")
    }

    pub fn map(&self, f: impl Fn(T) -> T + Copy) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: l.weight.map(f),
                    bias: l.bias.map(f),
                })
                .collect(),
        }
    }

    /// Forward pass over a `batch × inputs` matrix, returning `batch × outputs`.
    pub fn forward(&self, inputs: &Tensor<T>) -> Result<Tensor<T>> {
        let n0 = self.layers[0].weight.shape()[1];
        if inputs.rank() != 2 || inputs.shape()[1] != n0 {
            return Err(Error::shape(format!(
                "input width {:?} does not match network input width {n0}",
                inputs.shape()
            )));
        }
        let last = self.layers.len() - 1;
        let mut h = inputs.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            h = h.matmul(&layer.weight.transpose()?)?.add(&layer.bias)?;
            if l < last {
                h = h.map(silu);
            }
        }
        Ok(h)
    }

    pub fn to_serde(&self) -> SerdeWeights {
        SerdeWeights {
            layers: self
                .layers
                .iter()
                .map(|l| SerdeLayer {
                    weight: (0..l.weight.shape()[0])
                        .map(|r| l.weight.row(r).iter().map(|x| x.as_f64()).collect())
                        .collect(),
                    bias: l.bias.to_f64_vec(),
                })
                .collect(),
        }
    }

    pub fn from_serde(s: &SerdeWeights) -> Result<Self> {
        let layers = s
            .layers
            .iter()
            .map(|l| {
                let rows: Vec<Vec<T>> = l
                    .weight
                    .iter()
                    .map(|r| r.iter().map(|&x| T::lit(x)).collect())
                    .collect();
                Ok(Layer {
                    weight: Tensor::from_rows(&rows)?,
                    bias: Tensor::from_vec(l.bias.iter().map(|&x| T::lit(x)).collect()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let w = Self { layers };
        w.validate()?;
        Ok(w)
    }
}

/// JSON form of a weight file: `{"layers": [{"weight": [[..]], "bias": [..]}]}`
/// with each weight matrix stored `fan_out × fan_in`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SerdeWeights {
    pub layers: Vec<SerdeLayer>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SerdeLayer {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

/// Mean of ‖x‖₁ for x ~ N(0, I_n): n·√(2/π).
pub fn l1_mean(n: usize) -> f64 {
    n as f64 * (2.0 / PI).sqrt()
}

/// Standard deviation of ‖x‖₁ for x ~ N(0, I_n): √(n·(1 − 2/π)).
pub fn l1_std(n: usize) -> f64 {
    (n as f64 * (1.0 - 2.0 / PI)).sqrt()
}

pub fn standardize_l1(l1: f64, n: usize) -> f64 {
    (l1 - l1_mean(n)) / l1_std(n)
}

/// Maps a standardized prediction back to the raw L1 scale.
pub fn destandardize_l1(y: f64, n: usize) -> f64 {
    y * l1_std(n) + l1_mean(n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatch<T> {
    /// `batch × n₀`
    pub inputs: Tensor<T>,
    /// `batch × 1`, standardized L1 norms
    pub targets: Tensor<T>,
}

impl<T: Scalar> TaskBatch<T> {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draws `batch_size` standard-normal inputs and their standardized L1 targets.
pub fn sample_batch<T: Scalar, R: Rng + ?Sized>(inputs: usize, batch_size: usize, rng: &mut R) -> Result<TaskBatch<T>> {
    if batch_size == 0 {
        return Err(Error::domain("batch size must be at least 1"));
    }
    let (mu, sigma) = (l1_mean(inputs), l1_std(inputs));
    let mut xs = Vec::with_capacity(batch_size * inputs);
    let mut ys = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let mut l1 = 0.0;
        for _ in 0..inputs {
            let x: f64 = rng.sample(StandardNormal);
            l1 += x.abs();
            xs.push(T::lit(x));
        }
        ys.push(T::lit((l1 - mu) / sigma));
    }
    Ok(TaskBatch {
        inputs: Tensor::new(vec![batch_size, inputs], xs)?,
        targets: Tensor::new(vec![batch_size, 1], ys)?,
    })
}

pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, targets: &Tensor<T>) -> Result<T> {
    if pred.numel() != targets.numel() {
        return Err(Error::shape(format!(
            "prediction count {} != target count {}",
            pred.numel(),
            targets.numel()
        )));
    }
    if pred.numel() == 0 {
        return Err(Error::domain("mse of an empty batch"));
    }
    let s: T = pred
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Ok(s / T::of_usize(pred.numel()))
}

/// MSE of `weights` on `batch`.
pub fn evaluate<T: Scalar>(weights: &MlpWeights<T>, batch: &TaskBatch<T>) -> Result<T> {
    mse_loss(&weights.forward(&batch.inputs)?, &batch.targets)
}

/// Taped forward pass where layer `l` is given as a `fan_in × fan_out`
/// matrix (already transposed) and a `fan_out` bias.
pub fn forward_on_tape<'t, T: Scalar>(layers: &[(Var<'t, T>, Var<'t, T>)], inputs: Var<'t, T>) -> Result<Var<'t, T>> {
    let last = layers.len().saturating_sub(1);
    let mut h = inputs;
    for (l, &(w_in_out, b)) in layers.iter().enumerate() {
        h = h.matmul(w_in_out)?.add(b)?;
        if l < last {
            h = h.silu();
        }
    }
    Ok(h)
}

pub fn mse_on_tape<'t, T: Scalar>(pred: Var<'t, T>, targets: Var<'t, T>) -> Result<Var<'t, T>> {
    pred.sub(targets)?.square().mean_all()
}

/// Records `weights` on `tape` as leaves in the layout
/// [`forward_on_tape`] expects.
pub fn weights_on_tape<'t, T: Scalar>(
    tape: &'t Tape<T>,
    weights: &MlpWeights<T>,
) -> Result<Vec<(Var<'t, T>, Var<'t, T>)>> {
    weights
        .layers
        .iter()
        .map(|l| Ok((tape.leaf(l.weight.transpose()?), tape.leaf(l.bias.clone()))))
        .collect()
}
