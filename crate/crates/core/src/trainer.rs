//! β-conditioned hyperhypernetwork, its training loop, checkpoints, the
//! directly trained baseline and frontier evaluation.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::OrderParams;
use crate::error::{Error, Result};
use crate::hypernet::{
    generate_on_tape, generate_weights, GenerationMode, HyperLayout, TargetGraph, DEFAULT_HYPERDEPTH,
};
use crate::network::{
    evaluate, forward_on_tape, mse_on_tape, sample_batch, weights_on_tape, Layer, MlpSpec, MlpWeights, TaskBatch,
};
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::{Tape, Tensor};

/// Seed of the shared evaluation batch.
pub const EVAL_SEED: u64 = 0xE7A1;
pub const EVAL_SAMPLES: usize = 100_000;
pub const VERSION: &str = concat!("hypergen ", env!("CARGO_PKG_VERSION"));

/// Maps `β ∈ [1e-12, 1]` affinely in `log₁₀ β` onto `[-1, 1]`.
pub fn beta_input(beta: f64) -> Result<f64> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::domain(format!("β must be positive, got {beta}")));
    }
    Ok((beta.log10() + 6.0) / 6.0)
}

/// `steps` values spaced evenly in `log β` from `min` to `max` inclusive.
pub fn log_beta_grid(min: f64, max: f64, steps: usize) -> Result<Vec<f64>> {
    if !(min > 0.0 && min < max) || steps < 2 {
        return Err(Error::config(format!("bad β grid [{min}, {max}] × {steps}")));
    }
    let (a, b) = (min.ln(), max.ln());
    Ok((0..steps)
        .map(|k| (a + (b - a) * k as f64 / (steps - 1) as f64).exp())
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, n: usize) -> Self {
        Self {
            config,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "Adam state has {} entries, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::one() - b1.powi(self.t as i32);
        let bc2 = T::one() - b2.powi(self.t as i32);
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
        }
        Ok(())
    }
}

fn flatten<T: Scalar>(w: &MlpWeights<T>) -> Vec<T> {
    w.layers
        .iter()
        .flat_map(|l| l.weight.data().iter().chain(l.bias.data()).copied())
        .collect()
}

fn unflatten<T: Scalar>(spec: &MlpSpec, flat: &[T]) -> Result<MlpWeights<T>> {
    let mut out = MlpWeights::zeros(spec);
    let mut at = 0;
    for layer in &mut out.layers {
        for x in layer.weight.data_mut().iter_mut().chain(layer.bias.data_mut()) {
            *x = *flat
                .get(at)
                .ok_or_else(|| Error::shape("flat parameter vector too short"))?;
            at += 1;
        }
    }
    if at != flat.len() {
        return Err(Error::shape("flat parameter vector too long"));
    }
    Ok(out)
}

fn xavier_layer<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, scale: f64, rng: &mut R) -> Layer<f64> {
    let sd = scale * (2.0 / (fan_in + fan_out) as f64).sqrt();
    let normal = Normal::new(0.0, sd).expect("finite sd");
    let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
    Layer {
        weight: Tensor::new(vec![fan_out, fan_in], data).expect("shape"),
        bias: Tensor::zeros(&[fan_out]),
    }
}

/// The `1 → h₁ → h₂ → 2P` swish MLP whose output `(a, b)` gives the
/// hyperweights `a ⊙ sigmoid(b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperHyperWeights<T> {
    pub net: MlpWeights<T>,
}

impl<T: Scalar> HyperHyperWeights<T> {
    pub fn num_hyperweights(&self) -> usize {
        self.net.layers.last().map_or(0, |l| l.bias.numel() / 2)
    }

    pub fn flat(&self) -> Vec<T> {
        flatten(&self.net)
    }

    pub fn from_flat(spec: &MlpSpec, flat: &[T]) -> Result<Self> {
        Ok(Self {
            net: unflatten(spec, flat)?,
        })
    }

    /// Hyperweights for `β`.
    pub fn generate_hyperweights(&self, beta: f64) -> Result<Vec<T>> {
        let t = Tensor::from_f64(&[1, 1], &[beta_input(beta)?])?;
        let out = self.net.forward(&t)?;
        let p = self.num_hyperweights();
        let (a, b) = out.data().split_at(p);
        Ok(a.iter().zip(b).map(|(&a, &b)| a * sigmoid(b)).collect())
    }
}

impl HyperHyperWeights<f64> {
    /// Xavier hidden layers; the output layer starts with small weights and
    /// a bias reproducing `hw0` at every β (the `a` half is `2·hw0` since
    /// `sigmoid(0) = 1/2`).
    pub fn init<R: Rng + ?Sized>(hidden: [usize; 2], hw0: &[f64], final_scale: f64, rng: &mut R) -> Self {
        let p = hw0.len();
        let l0 = xavier_layer(1, hidden[0], 1.0, rng);
        let l1 = xavier_layer(hidden[0], hidden[1], 1.0, rng);
        let mut l2 = xavier_layer(hidden[1], 2 * p, final_scale, rng);
        for (b, &h) in l2.bias.data_mut().iter_mut().zip(hw0) {
            *b = 2.0 * h;
        }
        Self {
            net: MlpWeights {
                layers: vec![l0, l1, l2],
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub inputs: usize,
    pub hidden: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub hyperdepth: usize,
    pub hyperhyper_hidden: [usize; 2],
    /// Scale of the hyperhypernetwork's output-layer weights at init.
    pub final_weight_scale: f64,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            inputs: 4,
            hidden: 12,
            beta_min: 1e-12,
            beta_max: 1.0,
            steps: 2_000,
            batch_size: 256,
            adam: AdamConfig::default(),
            checkpoint_every: 500,
            seed: 0,
            hyperdepth: DEFAULT_HYPERDEPTH,
            hyperhyper_hidden: [100, 10],
            final_weight_scale: 1e-2,
        }
    }

    pub fn paper() -> Self {
        Self {
            inputs: 16,
            hidden: 48,
            steps: 20_000,
            checkpoint_every: 2_000,
            ..Self::desk()
        }
    }

    pub fn spec(&self) -> MlpSpec {
        MlpSpec::l1(self.inputs, self.hidden)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_min > 0.0 && self.beta_min < self.beta_max && self.beta_max.is_finite()) {
            return Err(Error::config(format!(
                "β range must satisfy 0 < min < max, got [{}, {}]",
                self.beta_min, self.beta_max
            )));
        }
        if self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::config("batch size and checkpoint cadence must be positive"));
        }
        if !(self.adam.lr >= 0.0) {
            return Err(Error::config("learning rate must be non-negative"));
        }
        self.spec().validate()
    }

    pub fn layout(&self) -> Result<HyperLayout> {
        HyperLayout::new(self.spec(), self.hyperdepth)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

pub fn config_hash<C: Serialize>(config: &C) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

fn sample_beta<R: Rng + ?Sized>(min: f64, max: f64, rng: &mut R) -> f64 {
    (min.ln() + rng.random::<f64>() * (max.ln() - min.ln())).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub beta: f64,
    pub loss: f64,
    pub kl: f64,
    pub objective: f64,
}

pub fn objective_value(loss: f64, beta: f64, kl: f64) -> f64 {
    (loss + beta * kl).ln()
}

/// Objective `log(L + β·KL)` and its gradient with respect to the flat
/// hyperhypernetwork parameters.
pub fn objective_and_gradient<R: Rng + ?Sized>(
    layout: &HyperLayout,
    graph: &TargetGraph,
    hhw: &HyperHyperWeights<f64>,
    beta: f64,
    batch: &TaskBatch<f64>,
    rng: &mut R,
) -> Result<(StepMetrics, Vec<f64>)> {
    let tape = Tape::new();
    let params = weights_on_tape(&tape, &hhw.net)?;
    let t = tape.constant(Tensor::from_f64(&[1, 1], &[beta_input(beta)?])?);
    let p = hhw.num_hyperweights();
    let out = forward_on_tape(&params, t)?.reshape(&[2 * p])?;
    let hw = out.slice(0, 0..p)?.mul(out.slice(0, p..2 * p)?.sigmoid())?;
    let generated = generate_on_tape(layout, graph, hw, rng, GenerationMode::WithEncoder)?;
    let pred = forward_on_tape(&generated.layers, tape.constant(batch.inputs.clone()))?;
    let loss = mse_on_tape(pred, tape.constant(batch.targets.clone()))?;
    let total = loss.add(generated.kl.scale(beta))?;
    let metrics = StepMetrics {
        step: 0,
        beta,
        loss: loss.item()?,
        kl: generated.kl.item()?,
        objective: total.item()?.ln(),
    };
    if !metrics.objective.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite objective: β={beta:e} L={} KL={}",
            metrics.loss, metrics.kl
        )));
    }
    let objective = total.log()?;
    let grads = tape.backward(objective)?;
    let mut flat = Vec::with_capacity(hhw.flat().len());
    for (w, b) in &params {
        flat.extend(grads.get(*w).transpose()?.into_data());
        flat.extend(grads.get(*b).into_data());
    }
    Ok((metrics, flat))
}

/// Training state: hyperhypernetwork, optimizer and RNG stream.
pub struct Trainer {
    pub config: TrainConfig,
    pub layout: HyperLayout,
    graph: TargetGraph,
    pub hhw: HyperHyperWeights<f64>,
    pub adam: Adam<f64>,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let layout = config.layout()?;
        let graph = TargetGraph::new(&config.spec())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let hw0 = layout.xavier_init(&mut rng);
        let hhw = HyperHyperWeights::init(config.hyperhyper_hidden, &hw0, config.final_weight_scale, &mut rng);
        let adam = Adam::new(config.adam, hhw.flat().len());
        Ok(Self {
            config,
            layout,
            graph,
            hhw,
            adam,
            rng,
            step: 0,
        })
    }

    pub fn hhw_spec(&self) -> MlpSpec {
        self.hhw.net.spec()
    }

    /// One optimizer step at a freshly sampled β on a fresh batch.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let beta = sample_beta(self.config.beta_min, self.config.beta_max, &mut self.rng);
        let batch = sample_batch(self.config.inputs, self.config.batch_size, &mut self.rng)?;
        let (mut metrics, grad) =
            objective_and_gradient(&self.layout, &self.graph, &self.hhw, beta, &batch, &mut self.rng).map_err(|e| {
                match e {
                    Error::Numeric(m) => Error::Numeric(format!("step {}: {m}", self.step)),
                    e => e,
                }
            })?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "step {}: non-finite gradient at β={beta:e}",
                self.step
            )));
        }
        let mut flat = self.hhw.flat();
        self.adam.step(&mut flat, &grad)?;
        self.hhw = HyperHyperWeights::from_flat(&self.hhw_spec(), &flat)?;
        self.step += 1;
        metrics.step = self.step;
        Ok(metrics)
    }

    /// Generates a network for `β` with its own RNG stream.
    pub fn generate(&self, beta: f64, seed: u64, mode: GenerationMode) -> Result<(MlpWeights<f64>, f64)> {
        generate_network(&self.layout, &self.hhw, &self.config.spec(), beta, seed, mode)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            hhw: self.hhw.clone(),
            adam: self.adam.clone(),
            rng: RngState::of(&self.rng),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let layout = ck.config.layout()?;
        let graph = TargetGraph::new(&ck.config.spec())?;
        Ok(Self {
            rng: ck.rng.restore()?,
            config: ck.config,
            layout,
            graph,
            hhw: ck.hhw,
            adam: ck.adam,
            step: ck.step,
        })
    }
}

/// Generates a network of shape `spec` at `β`, seeding generation with `seed`.
pub fn generate_network(
    layout: &HyperLayout,
    hhw: &HyperHyperWeights<f64>,
    spec: &MlpSpec,
    beta: f64,
    seed: u64,
    mode: GenerationMode,
) -> Result<(MlpWeights<f64>, f64)> {
    let hw = hhw.generate_hyperweights(beta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (net, kl) = generate_weights(layout, &hw, spec, &mut rng, mode)?;
    Ok((net, kl.total()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal, since the word position is 128-bit.
    pub word_pos: String,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| Error::config(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::config("rng seed must be 32 bytes"))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| Error::config(format!("rng word position: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub hhw: HyperHyperWeights<f64>,
    pub adam: Adam<f64>,
    pub rng: RngState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub file: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub version: String,
    pub config: TrainConfig,
    pub config_hash: String,
    pub step: u64,
    pub adam_t: u64,
    pub adam: AdamConfig,
    pub hhw_layer_sizes: Vec<usize>,
    pub rng: RngState,
    pub arrays: Vec<ArrayEntry>,
}

const MANIFEST: &str = "manifest.json";

fn write_f64s(path: &Path, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 * data.len());
    for x in data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f64s(path: &Path, len: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != 8 * len {
        return Err(Error::config(format!(
            "{} holds {} bytes, manifest says {len} floats",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

impl Checkpoint {
    pub fn dir_name(step: u64) -> String {
        format!("step_{step:08}")
    }

    /// Writes `manifest.json` plus little-endian float arrays into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let arrays = [
            ("hhw", self.hhw.flat()),
            ("adam_m", self.adam.m.clone()),
            ("adam_v", self.adam.v.clone()),
        ];
        let mut entries = Vec::new();
        for (name, data) in &arrays {
            let file = format!("{name}.f64le");
            write_f64s(&dir.join(&file), data)?;
            entries.push(ArrayEntry {
                name: name.to_string(),
                file,
                len: data.len(),
            });
        }
        let manifest = CheckpointManifest {
            format: 1,
            version: VERSION.to_string(),
            config_hash: self.config.hash(),
            config: self.config.clone(),
            step: self.step,
            adam_t: self.adam.t,
            adam: self.adam.config,
            hhw_layer_sizes: self.hhw.net.spec().layer_sizes,
            rng: self.rng.clone(),
            arrays: entries,
        };
        let path = dir.join(MANIFEST);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        f.write_all(json.as_bytes()).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            offset: line_col_offset(&text, e.line(), e.column()),
            message: e.to_string(),
        })?;
        if manifest.config_hash != manifest.config.hash() {
            return Err(Error::config("checkpoint config hash does not match its config"));
        }
        let array = |name: &str| -> Result<Vec<f64>> {
            let entry = manifest
                .arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| Error::config(format!("checkpoint lacks array {name}")))?;
            read_f64s(&dir.join(&entry.file), entry.len)
        };
        let spec = MlpSpec {
            layer_sizes: manifest.hhw_layer_sizes.clone(),
        };
        let hhw = HyperHyperWeights::from_flat(&spec, &array("hhw")?)?;
        let adam = Adam {
            config: manifest.adam,
            m: array("adam_m")?,
            v: array("adam_v")?,
            t: manifest.adam_t,
        };
        if adam.m.len() != adam.v.len() || adam.m.len() != hhw.flat().len() {
            return Err(Error::config("checkpoint optimizer state does not match the weights"));
        }
        Ok(Self {
            config: manifest.config,
            step: manifest.step,
            hhw,
            adam,
            rng: manifest.rng,
        })
    }

    /// Checkpoint directories under `root`, sorted by step.
    pub fn list(root: &Path) -> Result<Vec<(u64, PathBuf)>> {
        let mut out = Vec::new();
        let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(root, e))?;
            let name = entry.file_name();
            if let Some(step) = name
                .to_str()
                .and_then(|n| n.strip_prefix("step_"))
                .and_then(|s| s.parse().ok())
            {
                if entry.path().join(MANIFEST).exists() {
                    out.push((step, entry.path()));
                }
            }
        }
        out.sort();
        Ok(out)
    }
}

/// Byte offset of a 1-based `(line, column)` position.
pub fn line_col_offset(text: &str, line: usize, column: usize) -> usize {
    let start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (start + column.saturating_sub(1)).min(text.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub inputs: usize,
    pub hidden: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl BaselineConfig {
    pub fn new(inputs: usize, hidden: usize) -> Self {
        Self {
            inputs,
            hidden,
            steps: 50_000,
            batch_size: 256,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineRun {
    pub weights: MlpWeights<f64>,
    pub losses: Vec<f64>,
}

/// Xavier-normal weights and zero biases.
pub fn init_network<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> MlpWeights<f64> {
    MlpWeights {
        layers: (0..spec.num_layers())
            .map(|l| {
                let (i, o) = spec.layer_dims(l);
                xavier_layer(i, o, 1.0, rng)
            })
            .collect(),
    }
}

/// Trains the target network's weights directly with Adam.
pub fn train_baseline_adam(cfg: &BaselineConfig) -> Result<BaselineRun> {
    let spec = MlpSpec::l1(cfg.inputs, cfg.hidden);
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weights = init_network(&spec, &mut rng);
    let mut flat = flatten(&weights);
    let mut adam = Adam::new(cfg.adam, flat.len());
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    let mut above = 0;
    for step in 0..cfg.steps {
        let batch = sample_batch(cfg.inputs, cfg.batch_size, &mut rng)?;
        let tape = Tape::new();
        let params = weights_on_tape(&tape, &weights)?;
        let pred = forward_on_tape(&params, tape.constant(batch.inputs))?;
        let loss = mse_on_tape(pred, tape.constant(batch.targets))?;
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("baseline loss non-finite at step {step}")));
        }
        above = if losses.first().is_some_and(|&l0: &f64| value > 10.0 * l0) {
            above + 1
        } else {
            0
        };
        if above >= 100 {
            return Err(Error::Numeric(format!(
                "baseline diverged by step {step} (loss {value})"
            )));
        }
        losses.push(value);
        let grads = tape.backward(loss)?;
        let mut g = Vec::with_capacity(flat.len());
        for (w, b) in &params {
            g.extend(grads.get(*w).transpose()?.into_data());
            g.extend(grads.get(*b).into_data());
        }
        adam.step(&mut flat, &g)?;
        weights = unflatten(&spec, &flat)?;
    }
    Ok(BaselineRun { weights, losses })
}

/// The shared evaluation batch for `inputs` dimensions.
pub fn eval_batch(inputs: usize, samples: usize) -> Result<TaskBatch<f64>> {
    sample_batch(
        inputs,
        samples,
        &mut ChaCha8Rng::seed_from_u64(EVAL_SEED ^ inputs as u64),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierRow {
    pub beta: f64,
    pub seed: u64,
    pub mode: GenerationMode,
    pub loss: f64,
    pub kl: f64,
    pub params: OrderParams,
}

/// Generates and evaluates one network per `(mode, β, seed)`. Seeds at
/// positions `2k` and `2k+1` are paired for seed dependence.
pub fn evaluate_frontier(
    layout: &HyperLayout,
    hhw: &HyperHyperWeights<f64>,
    spec: &MlpSpec,
    betas: &[f64],
    seeds: &[u64],
    modes: &[GenerationMode],
    batch: &TaskBatch<f64>,
) -> Result<Vec<FrontierRow>> {
    let cells: Vec<(GenerationMode, f64)> = modes.iter().flat_map(|&m| betas.iter().map(move |&b| (m, b))).collect();
    let per_cell: Vec<Vec<FrontierRow>> = cells
        .par_iter()
        .map(|&(mode, beta)| -> Result<Vec<FrontierRow>> {
            let nets = seeds
                .iter()
                .map(|&s| generate_network(layout, hhw, spec, beta, s, mode))
                .collect::<Result<Vec<_>>>()?;
            nets.iter()
                .enumerate()
                .map(|(k, (net, kl))| {
                    let partner = nets.get(k ^ 1).map(|(n, _)| n);
                    Ok(FrontierRow {
                        beta,
                        seed: seeds[k],
                        mode,
                        loss: evaluate(net, batch)?,
                        kl: *kl,
                        params: OrderParams::of(net, partner)?,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_cell.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_input_endpoints() {
        assert_eq!(beta_input(1.0).unwrap(), 1.0);
        assert_eq!(beta_input(1e-12).unwrap(), -1.0);
        assert_eq!(beta_input(1e-6).unwrap(), 0.0);
        assert!(matches!(beta_input(0.0), Err(Error::Domain(_))));
        assert!(matches!(beta_input(-1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn objective_examples() {
        assert_eq!(objective_value(1.0, 0.5, 0.0), 0.0);
        assert_eq!(objective_value(0.1, 1.0, 0.9), 0.0);
    }

    #[test]
    fn beta_grid_is_logarithmic() {
        let g = log_beta_grid(1e-12, 1.0, 30).unwrap();
        assert_eq!(g.len(), 30);
        assert!((g[0] - 1e-12).abs() < 1e-24 && (g[29] - 1.0).abs() < 1e-12);
        let r = g[1] / g[0];
        assert!(g.windows(2).all(|w| (w[1] / w[0] - r).abs() < 1e-9));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(AdamConfig::default(), 2);
        let mut p = vec![1.0f64, -1.0];
        adam.step(&mut p, &[3.0, -0.5]).unwrap();
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn init_reproduces_base_hyperweights() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let hw0: Vec<f64> = (0..7).map(|i| i as f64 * 0.1 - 0.3).collect();
        let hhw = HyperHyperWeights::init([100, 10], &hw0, 0.0, &mut rng);
        assert_eq!(hhw.num_hyperweights(), 7);
        for beta in [1e-12, 1e-3, 1.0] {
            let hw = hhw.generate_hyperweights(beta).unwrap();
            for (a, b) in hw.iter().zip(&hw0) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = MlpSpec::l1(3, 4);
        let w = init_network(&spec, &mut rng);
        assert_eq!(unflatten(&spec, &flatten(&w)).unwrap(), w);
        assert!(unflatten(&spec, &[0.0; 3]).is_err());
    }

    #[test]
    fn rng_state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let _: u64 = rng.random();
        let state = RngState::of(&rng);
        let mut back = state.restore().unwrap();
        assert_eq!(rng.random::<u64>(), back.random::<u64>());
    }

    #[test]
    fn invalid_beta_range_rejected() {
        let mut cfg = TrainConfig::desk();
        cfg.beta_min = 2.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_learning_rate_leaves_baseline_unchanged() {
        let mut cfg = BaselineConfig::new(3, 4);
        cfg.steps = 5;
        cfg.adam.lr = 0.0;
        let run = train_baseline_adam(&cfg).unwrap();
        let init = init_network(&MlpSpec::l1(3, 4), &mut ChaCha8Rng::seed_from_u64(cfg.seed));
        assert_eq!(run.weights, init);
    }

    #[test]
    fn offset_of_line_and_column() {
        assert_eq!(line_col_offset("ab\ncd", 2, 2), 4);
        assert_eq!(line_col_offset("ab", 1, 1), 0);
    }
}
