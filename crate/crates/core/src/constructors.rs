//! Hand-built weights for the three L1 algorithms.
//!
//! The algorithms are stated with ReLU, while the target network uses silu.
//! Since `silu(c·x)/c → ReLU(x)` as `c → ∞`, each kink-forming hidden unit
//! gets its inner weights multiplied by the sharpness `c_act` and its outer
//! weight divided by it. Linear pass-through units ride on a large positive
//! bias instead, where silu is the identity to within `e^{-C}`. The output
//! layer also folds in the task standardization, so every constructor's
//! output is directly comparable to the standardized targets.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{l1_mean, l1_std, sample_batch, Layer, MlpWeights};
use crate::scalar::{silu, Scalar};
use crate::tensor::Tensor;

/// Orientation of the per-input units of the pudding algorithm.
/// `Negative` computes `2·Σ ReLU(−xᵢ) + Σ xᵢ`; `Positive` computes
/// `2·Σ ReLU(xᵢ) − Σ xᵢ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PuddingSign {
    Negative,
    Positive,
}

impl PuddingSign {
    /// Sign of the linear `±Σ xᵢ` term.
    fn sum_sign(self) -> f64 {
        match self {
            PuddingSign::Negative => 1.0,
            PuddingSign::Positive => -1.0,
        }
    }
}

/// Distribution of first-layer weights for the convexity algorithm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ConvexityDist {
    Unimodal {
        sigma: f64,
    },
    /// Random sign times `mean`, plus `N(0, sigma²)`.
    Bimodal {
        mean: f64,
        sigma: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstructorConfig {
    pub inputs: usize,
    pub hidden: usize,
    /// Sharpness multiplier turning silu units into near-ReLU kinks.
    pub c_act: f64,
    pub pudding_sign: PuddingSign,
    /// Offset that keeps pass-through units in silu's linear regime.
    pub pudding_c: f64,
    pub convexity: ConvexityDist,
    /// Samples used to fit the convexity output scale.
    pub calibration_samples: usize,
}

impl ConstructorConfig {
    pub fn new(inputs: usize, hidden: usize) -> Self {
        Self {
            inputs,
            hidden,
            c_act: 50.0,
            pudding_sign: PuddingSign::Negative,
            pudding_c: 100.0,
            convexity: ConvexityDist::Unimodal { sigma: 1.0 },
            calibration_samples: 100_000,
        }
    }

    pub fn with_c_act(mut self, c_act: f64) -> Self {
        self.c_act = c_act;
        self
    }

    pub fn with_sign(mut self, sign: PuddingSign) -> Self {
        self.pudding_sign = sign;
        self
    }

    pub fn with_convexity(mut self, dist: ConvexityDist) -> Self {
        self.convexity = dist;
        self
    }

    /// Gain of the pass-through unit in the exact pudding construction.
    pub fn pass_through_gain(&self) -> f64 {
        self.c_act / 10.0
    }

    fn validate(&self) -> Result<()> {
        if self.inputs == 0 || self.hidden == 0 {
            return Err(Error::config("layer sizes must be positive"));
        }
        if !(self.c_act > 0.0) || !(self.pudding_c > 0.0) {
            return Err(Error::config("c_act and pudding_c must be positive"));
        }
        Ok(())
    }

    fn require_hidden(&self, needed: usize, what: &str) -> Result<()> {
        self.validate()?;
        if self.hidden < needed {
            return Err(Error::config(format!(
                "{what} needs at least {needed} hidden units for {} inputs, got {}",
                self.inputs, self.hidden
            )));
        }
        Ok(())
    }
}

/// Dense builder in `f64`, converted to `T` at the end.
struct Builder {
    n0: usize,
    n1: usize,
    w0: Vec<f64>,
    b0: Vec<f64>,
    w1: Vec<f64>,
    b1: f64,
}

impl Builder {
    fn new(n0: usize, n1: usize) -> Self {
        Self {
            n0,
            n1,
            w0: vec![0.0; n1 * n0],
            b0: vec![0.0; n1],
            w1: vec![0.0; n1],
            b1: 0.0,
        }
    }

    fn set_in(&mut self, hidden: usize, input: usize, w: f64) {
        self.w0[hidden * self.n0 + input] = w;
    }

    fn finish<T: Scalar>(self) -> MlpWeights<T> {
        let conv = |v: &[f64]| v.iter().map(|&x| T::lit(x)).collect::<Vec<_>>();
        MlpWeights {
            layers: vec![
                Layer {
                    weight: Tensor::new(vec![self.n1, self.n0], conv(&self.w0)).expect("shape"),
                    bias: Tensor::from_vec(conv(&self.b0)),
                },
                Layer {
                    weight: Tensor::new(vec![1, self.n1], conv(&self.w1)).expect("shape"),
                    bias: Tensor::from_vec(vec![T::lit(self.b1)]),
                },
            ],
        }
    }
}

/// `|xᵢ| = ReLU(xᵢ) + ReLU(−xᵢ)` with hidden pair `(2i, 2i+1)` per input.
pub fn build_double_sided<T: Scalar>(cfg: &ConstructorConfig) -> Result<MlpWeights<T>> {
    let (n0, n1) = (cfg.inputs, cfg.hidden);
    cfg.require_hidden(2 * n0, "double-sided")?;
    let (mu, sigma, c) = (l1_mean(n0), l1_std(n0), cfg.c_act);
    let mut b = Builder::new(n0, n1);
    for i in 0..n0 {
        b.set_in(2 * i, i, c);
        b.set_in(2 * i + 1, i, -c);
        b.w1[2 * i] = 1.0 / (c * sigma);
        b.w1[2 * i + 1] = 1.0 / (c * sigma);
    }
    b.b1 = -mu / sigma;
    Ok(b.finish())
}

/// `‖x‖₁ = 2·Σ ReLU(∓xᵢ) ± Σ xᵢ` on `n₀ + 1` hidden units: one kink unit
/// per input and a single pass-through unit for the linear term.
pub fn build_pudding<T: Scalar>(cfg: &ConstructorConfig) -> Result<MlpWeights<T>> {
    let (n0, n1) = (cfg.inputs, cfg.hidden);
    cfg.require_hidden(n0 + 1, "pudding")?;
    let (mu, sigma, c) = (l1_mean(n0), l1_std(n0), cfg.c_act);
    let s = cfg.pudding_sign.sum_sign();
    let k = cfg.pass_through_gain();
    let big = cfg.pudding_c;
    let mut b = Builder::new(n0, n1);
    for j in 0..n0 {
        b.set_in(j, j, -s * c);
        b.w1[j] = 2.0 / (c * sigma);
    }
    for i in 0..n0 {
        b.set_in(n0, i, s * k);
    }
    b.b0[n0] = k * big;
    b.w1[n0] = 1.0 / (k * sigma);
    b.b1 = -big / sigma - mu / sigma;
    Ok(b.finish())
}

/// The literal imperfect pudding wiring: `n₀` units computing
/// `ReLU(∓xⱼ ± Σᵢ xᵢ)` with outer weight 2, and every remaining unit
/// computing `ReLU(C ± Σᵢ xᵢ) − C`.
pub fn build_pudding_imperfect<T: Scalar>(cfg: &ConstructorConfig) -> Result<MlpWeights<T>> {
    let (n0, n1) = (cfg.inputs, cfg.hidden);
    cfg.require_hidden(2 * n0, "imperfect pudding")?;
    let (mu, sigma, c) = (l1_mean(n0), l1_std(n0), cfg.c_act);
    let s = cfg.pudding_sign.sum_sign();
    let k = cfg.pass_through_gain();
    let big = cfg.pudding_c;
    let mut b = Builder::new(n0, n1);
    for j in 0..n0 {
        for i in 0..n0 {
            let w = if i == j { 0.0 } else { s };
            b.set_in(j, i, c * w);
        }
        b.w1[j] = 2.0 / (c * sigma);
    }
    let extra = n1 - n0;
    for j in n0..n1 {
        for i in 0..n0 {
            b.set_in(j, i, s * k);
        }
        b.b0[j] = k * big;
        b.w1[j] = 1.0 / (k * sigma);
    }
    b.b1 = -(extra as f64) * big / sigma - mu / sigma;
    Ok(b.finish())
}

/// Randomly oriented silu units with one shared, least-squares fitted
/// output weight.
pub fn build_convexity<T: Scalar, R: Rng + ?Sized>(cfg: &ConstructorConfig, rng: &mut R) -> Result<MlpWeights<T>> {
    cfg.validate()?;
    let (n0, n1) = (cfg.inputs, cfg.hidden);
    let w0: Vec<f64> = match cfg.convexity {
        ConvexityDist::Unimodal { sigma } => {
            let d = Normal::new(0.0, sigma).map_err(|e| Error::config(e.to_string()))?;
            (0..n0 * n1).map(|_| d.sample(rng)).collect()
        }
        ConvexityDist::Bimodal { mean, sigma } => {
            let d = Normal::new(0.0, sigma).map_err(|e| Error::config(e.to_string()))?;
            (0..n0 * n1)
                .map(|_| {
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    sign * mean + d.sample(rng)
                })
                .collect()
        }
    };
    let mut b = Builder::new(n0, n1);
    b.w0 = w0;
    fit_convexity_output(&mut b, cfg.calibration_samples, rng)?;
    Ok(b.finish())
}

/// Builds the convexity network around a given `hidden × inputs` matrix.
pub fn build_convexity_from<T: Scalar, R: Rng + ?Sized>(
    first_layer: &Tensor<f64>,
    calibration_samples: usize,
    rng: &mut R,
) -> Result<MlpWeights<T>> {
    let (n1, n0) = match first_layer.shape() {
        [a, b] => (*a, *b),
        s => return Err(Error::shape(format!("first layer must be 2-D, got {s:?}"))),
    };
    let mut b = Builder::new(n0, n1);
    b.w0 = first_layer.data().to_vec();
    fit_convexity_output(&mut b, calibration_samples, rng)?;
    Ok(b.finish())
}

fn fit_convexity_output<R: Rng + ?Sized>(b: &mut Builder, samples: usize, rng: &mut R) -> Result<()> {
    let batch = sample_batch::<f64, _>(b.n0, samples.max(2), rng)?;
    let pre = batch
        .inputs
        .matmul(&Tensor::new(vec![b.n1, b.n0], b.w0.clone())?.transpose()?)?;
    let n = batch.len();
    let features: Vec<f64> = (0..n).map(|r| pre.row(r).iter().map(|&z| silu(z)).sum()).collect();
    let targets = batch.targets.data();
    let fm = features.iter().sum::<f64>() / n as f64;
    let tm = targets.iter().sum::<f64>() / n as f64;
    let (mut sff, mut sft) = (0.0, 0.0);
    for (f, t) in features.iter().zip(targets) {
        sff += (f - fm) * (f - fm);
        sft += (f - fm) * (t - tm);
    }
    if sff <= 1e-12 * n as f64 {
        return Err(Error::Numeric("convexity calibration feature has zero variance".into()));
    }
    let alpha = sft / sff;
    b.w1 = vec![alpha; b.n1];
    b.b1 = tm - alpha * fm;
    Ok(())
}

/// Hidden units with any nonzero incoming or outgoing weight.
pub fn active_hidden_units<T: Scalar>(w: &MlpWeights<T>) -> usize {
    let first = &w.layers[0].weight;
    (0..first.shape()[0])
        .filter(|&j| {
            first.row(j).iter().any(|&x| x != T::zero())
                || w.layers[1].weight.data()[j] != T::zero()
                || w.layers[0].bias.data()[j] != T::zero()
        })
        .count()
}
