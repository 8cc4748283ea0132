//! Order parameters that tell the three L1 algorithms apart, a threshold
//! classifier calibrated on the reference constructions, and the
//! (training step, β) phase grid.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::constructors::{
    build_convexity, build_double_sided, build_pudding, build_pudding_imperfect, ConstructorConfig, ConvexityDist,
    PuddingSign,
};
use crate::error::{Error, Result};
use crate::network::MlpWeights;
use crate::scalar::Scalar;
use crate::tensor::{ReduceOp, Tensor};

/// Double-sidedness of a first-layer matrix. `degenerate` is set, and
/// `value` is `+∞`, when the median absolute weight is zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DoubleSidedness<T> {
    pub value: T,
    pub degenerate: bool,
}

fn check_matrix<T: Scalar>(w: &Tensor<T>) -> Result<(usize, usize)> {
    match w.shape() {
        [r, c] if *r > 0 && *c > 0 => Ok((*r, *c)),
        s => Err(Error::shape(format!(
            "order parameters need a non-empty matrix, got {s:?}"
        ))),
    }
}

/// `α₁ = minᵢ min(−minⱼ Wᵢⱼ, maxⱼ Wᵢⱼ) / medianᵢⱼ |Wᵢⱼ|` for `W` laid out
/// inputs × hidden.
pub fn double_sidedness<T: Scalar>(w: &Tensor<T>) -> Result<DoubleSidedness<T>> {
    let (rows, _) = check_matrix(w)?;
    let numerator = (0..rows)
        .map(|i| {
            let row = w.row(i);
            let lo = row.iter().copied().fold(T::infinity(), T::min);
            let hi = row.iter().copied().fold(T::neg_infinity(), T::max);
            (-lo).min(hi)
        })
        .fold(T::infinity(), T::min);
    let median = w.map(T::abs).reduce_all(ReduceOp::Median)?.item()?;
    if median == T::zero() {
        return Ok(DoubleSidedness {
            value: T::infinity(),
            degenerate: true,
        });
    }
    Ok(DoubleSidedness {
        value: numerator / median,
        degenerate: false,
    })
}

/// `α₂ = maxᵢⱼ |Wᵢⱼ|`.
pub fn strongest_connection<T: Scalar>(w: &Tensor<T>) -> Result<T> {
    check_matrix(w)?;
    Ok(w.data().iter().fold(T::zero(), |m, &x| m.max(x.abs())))
}

/// `α₃ = ‖W − V‖²_F / (‖W‖²_F + ‖V‖²_F)` for two generations of the same
/// layer under different seeds.
pub fn seed_dependence<T: Scalar>(w: &Tensor<T>, v: &Tensor<T>) -> Result<T> {
    if w.shape() != v.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", w.shape(), v.shape())));
    }
    let (mut diff, mut nw, mut nv) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in w.data().iter().zip(v.data()) {
        diff += (a - b) * (a - b);
        nw += a * a;
        nv += b * b;
    }
    if nw + nv == T::zero() {
        return Err(Error::domain("seed dependence of two zero matrices"));
    }
    Ok(diff / (nw + nv))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderParams {
    pub alpha1: f64,
    pub alpha2: f64,
    /// Present only when the network was paired with a second seed.
    pub alpha3: Option<f64>,
    #[serde(default)]
    pub degenerate: bool,
}

impl OrderParams {
    /// α₁ and α₂ of a network's first layer; α₃ when `partner` is given.
    pub fn of<T: Scalar>(net: &MlpWeights<T>, partner: Option<&MlpWeights<T>>) -> Result<Self> {
        let w = net.first_layer_in_out();
        let a1 = double_sidedness(&w)?;
        let alpha3 = partner
            .map(|p| seed_dependence(&w, &p.first_layer_in_out()).map(Scalar::as_f64))
            .transpose()?;
        Ok(Self {
            alpha1: a1.value.as_f64(),
            alpha2: strongest_connection(&w)?.as_f64(),
            alpha3,
            degenerate: a1.degenerate,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AlgorithmLabel {
    Convexity,
    Pudding,
    DoubleSided,
}

impl AlgorithmLabel {
    pub const ALL: [AlgorithmLabel; 3] = [
        AlgorithmLabel::Convexity,
        AlgorithmLabel::Pudding,
        AlgorithmLabel::DoubleSided,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlgorithmLabel::Convexity => "convexity",
            AlgorithmLabel::Pudding => "pudding",
            AlgorithmLabel::DoubleSided => "double_sided",
        }
    }

    /// Phase-diagram color: red, green, blue.
    pub fn color(self) -> &'static str {
        match self {
            AlgorithmLabel::Convexity => "#ff0000",
            AlgorithmLabel::Pudding => "#00ff00",
            AlgorithmLabel::DoubleSided => "#0000ff",
        }
    }
}

impl std::fmt::Display for AlgorithmLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Decision boundaries in (α₁, α₂) space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// α₁ above this (with a strong connection) means double-sided.
    pub theta1: f64,
    /// α₂ below this means convexity.
    pub theta2: f64,
}

/// Convexity if the strongest connection is weak; otherwise double-sided
/// if both signs are strongly present for every input; otherwise pudding.
/// Seed dependence is deliberately ignored.
pub fn classify(op: &OrderParams, thresholds: Option<&Thresholds>) -> Result<AlgorithmLabel> {
    let th = thresholds.ok_or_else(|| Error::config("classifier thresholds are not calibrated"))?;
    Ok(if op.alpha2 < th.theta2 {
        AlgorithmLabel::Convexity
    } else if op.alpha1 > th.theta1 {
        AlgorithmLabel::DoubleSided
    } else {
        AlgorithmLabel::Pudding
    })
}

/// Boundary between a lower class whose values top out at `lower_max` and
/// an upper class starting at `upper_min`: their geometric mean when both
/// are positive, the arithmetic mean otherwise.
pub fn midpoint_boundary(lower_max: f64, upper_min: f64, what: &str) -> Result<f64> {
    if !(lower_max < upper_min) {
        return Err(Error::Calibration(format!(
            "{what}: class ranges overlap (lower max {lower_max}, upper min {upper_min})"
        )));
    }
    Ok(if lower_max > 0.0 {
        (lower_max * upper_min).sqrt()
    } else {
        0.5 * (lower_max + upper_min)
    })
}

/// Fits `(θ₁, θ₂)` from labelled order parameters of reference networks.
pub fn calibrate_thresholds(samples: &[(AlgorithmLabel, OrderParams)]) -> Result<Thresholds> {
    let values = |label: AlgorithmLabel, f: fn(&OrderParams) -> f64| -> Vec<f64> {
        samples.iter().filter(|(l, _)| *l == label).map(|(_, p)| f(p)).collect()
    };
    for label in AlgorithmLabel::ALL {
        let n = samples.iter().filter(|(l, _)| *l == label).count();
        if n < 10 {
            return Err(Error::Calibration(format!("need at least 10 {label} samples, got {n}")));
        }
    }
    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let a2_conv = values(AlgorithmLabel::Convexity, |p| p.alpha2);
    let a2_rest: Vec<f64> = values(AlgorithmLabel::Pudding, |p| p.alpha2)
        .into_iter()
        .chain(values(AlgorithmLabel::DoubleSided, |p| p.alpha2))
        .collect();
    let theta2 = midpoint_boundary(max(&a2_conv), min(&a2_rest), "strongest connection")?;
    let a1_pud = values(AlgorithmLabel::Pudding, |p| p.alpha1);
    let a1_ds = values(AlgorithmLabel::DoubleSided, |p| p.alpha1);
    let theta1 = midpoint_boundary(max(&a1_pud), min(&a1_ds), "double sidedness")?;
    Ok(Thresholds { theta1, theta2 })
}

/// How reference networks are drawn for calibration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub inputs: usize,
    pub hidden: usize,
    pub samples_per_class: usize,
    /// Standard deviation of the Gaussian jitter added to every weight.
    pub jitter: f64,
    /// Sharpness range sampled log-uniformly for the exact constructions.
    pub c_act_range: (f64, f64),
    /// Range of the unimodal convexity weight scale.
    pub convexity_sigma_range: (f64, f64),
    /// Samples for the convexity output fit (only the first layer matters).
    pub fit_samples: usize,
    pub seed: u64,
}

impl CalibrationConfig {
    pub fn new(inputs: usize, hidden: usize) -> Self {
        Self {
            inputs,
            hidden,
            samples_per_class: 20,
            jitter: 1e-2,
            c_act_range: (10.0, 40.0),
            convexity_sigma_range: (0.5, 1.0),
            fit_samples: 2_000,
            seed: 0x5eed_ca1b,
        }
    }
}

fn jitter<T: Scalar, R: Rng + ?Sized>(w: &MlpWeights<T>, sd: f64, rng: &mut R) -> Result<MlpWeights<T>> {
    let normal = Normal::new(0.0, sd).map_err(|e| Error::config(e.to_string()))?;
    let mut out = w.clone();
    for layer in &mut out.layers {
        for x in layer.weight.data_mut().iter_mut().chain(layer.bias.data_mut()) {
            *x += T::lit(normal.sample(rng));
        }
    }
    Ok(out)
}

/// Draws one jittered reference network of class `label`. Pudding samples
/// alternate between the exact and imperfect wirings and both signs;
/// convexity samples alternate between unimodal and bimodal weights.
pub fn reference_sample<R: Rng + ?Sized>(
    cfg: &CalibrationConfig,
    label: AlgorithmLabel,
    index: usize,
    rng: &mut R,
) -> Result<MlpWeights<f64>> {
    let (lo, hi) = cfg.c_act_range;
    let c_act = (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp();
    let mut base = ConstructorConfig::new(cfg.inputs, cfg.hidden).with_c_act(c_act);
    base.calibration_samples = cfg.fit_samples;
    let sign = if index.is_multiple_of(2) {
        PuddingSign::Negative
    } else {
        PuddingSign::Positive
    };
    let net = match label {
        AlgorithmLabel::DoubleSided => build_double_sided(&base)?,
        AlgorithmLabel::Pudding => {
            let base = base.with_sign(sign);
            if (index / 2).is_multiple_of(2) {
                build_pudding(&base)?
            } else {
                build_pudding_imperfect(&base)?
            }
        }
        AlgorithmLabel::Convexity => {
            let (slo, shi) = cfg.convexity_sigma_range;
            let sigma = slo + rng.random::<f64>() * (shi - slo);
            let dist = if index.is_multiple_of(2) {
                ConvexityDist::Unimodal { sigma }
            } else {
                ConvexityDist::Bimodal {
                    mean: sigma,
                    sigma: 0.25 * sigma,
                }
            };
            build_convexity(&base.with_convexity(dist), rng)?
        }
    };
    jitter(&net, cfg.jitter, rng)
}

/// Labelled order parameters of freshly drawn reference networks. The
/// stream is keyed by `seed`, so calibration and held-out sets drawn with
/// different seeds share no randomness.
pub fn reference_order_params(cfg: &CalibrationConfig, seed: u64) -> Result<Vec<(AlgorithmLabel, OrderParams)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(3 * cfg.samples_per_class);
    for label in AlgorithmLabel::ALL {
        for i in 0..cfg.samples_per_class {
            let net = reference_sample(cfg, label, i, &mut rng)?;
            out.push((label, OrderParams::of(&net, None)?));
        }
    }
    Ok(out)
}

/// Calibrates thresholds on reference networks drawn with `cfg.seed`.
pub fn calibrate_on_references(cfg: &CalibrationConfig) -> Result<Thresholds> {
    calibrate_thresholds(&reference_order_params(cfg, cfg.seed)?)
}

/// Fraction of samples whose predicted label matches.
pub fn accuracy(samples: &[(AlgorithmLabel, OrderParams)], th: &Thresholds) -> Result<f64> {
    let mut hits = 0;
    for (label, op) in samples {
        if classify(op, Some(th))? == *label {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len().max(1) as f64)
}

/// One classified network in a phase grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseCell {
    pub step: u64,
    pub beta: f64,
    pub seed: u64,
    pub params: OrderParams,
    pub label: AlgorithmLabel,
    pub loss: f64,
    pub kl: f64,
}

/// Algorithm labels over (checkpoint step, β).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseGrid {
    pub steps: Vec<u64>,
    pub betas: Vec<f64>,
    /// Row-major by step, then β.
    pub cells: Vec<PhaseCell>,
}

impl PhaseGrid {
    pub fn cell(&self, step_index: usize, beta_index: usize) -> &PhaseCell {
        &self.cells[step_index * self.betas.len() + beta_index]
    }

    pub fn is_complete(&self) -> bool {
        self.cells.len() == self.steps.len() * self.betas.len()
    }

    /// Most common label in the column of checkpoint `step_index`.
    pub fn column_majority(&self, step_index: usize) -> AlgorithmLabel {
        let mut counts = [0usize; 3];
        for b in 0..self.betas.len() {
            counts[self.cell(step_index, b).label as usize] += 1;
        }
        let best = (0..3).max_by_key(|&i| (counts[i], std::cmp::Reverse(i))).unwrap_or(0);
        AlgorithmLabel::ALL[best]
    }
}
