//! Attentional hypernetwork over the computation graph of a target MLP.
//!
//! Hyperactivations are a `2E × F` matrix: one row per (KL side, weight
//! position). Encoder rows come first. Within a side, position
//! `e = offset_ℓ + i·n_out + j` so that a contiguous slice of rows reshapes
//! to layer `ℓ`'s weight as `[fan_in, fan_out]`.

use std::ops::Range;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Layer, MlpSpec, MlpWeights};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Hyperfeature width, constant across hyperlayers.
pub const HYPER_WIDTH: usize = 68;
pub const DEFAULT_HYPERDEPTH: usize = 4;
/// Width of each key, query and value.
pub const ATTENTION_WIDTH: usize = 5;
pub const ACTIVATION_WIDTH: usize = 20;
pub const POSITION_WIDTH: usize = 8;
pub const RANDOM_WIDTH: usize = 5;
pub const LEARNED_WIDTH: usize = 5;
pub const CHANNEL_WIDTH: usize = 4;
/// Floor added to every channel standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GenerationMode {
    /// Channel samples come from the encoder-side distribution `q`.
    WithEncoder,
    /// Channel samples come from the decoder-side distribution `p`; the
    /// encoder still runs so the KL can be reported.
    DecoderOnly,
}

impl GenerationMode {
    pub fn name(self) -> &'static str {
        match self {
            GenerationMode::WithEncoder => "with_encoder",
            GenerationMode::DecoderOnly => "decoder_only",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    /// Elementwise swish.
    Activation,
    /// Sinusoidal encoding of the input neuron `i`, only in the first layer.
    PositionIn,
    /// Sinusoidal encoding of the output neuron `j`, only in the last layer.
    PositionOut,
    /// Sinusoidal encoding of the layer index `ℓ`.
    PositionLayer,
    /// Fresh standard normals, shared by both sides.
    Random,
    /// One attention head per neuron; input is front q, k, v then behind q, k, v.
    Attention,
    /// Learned variables on the encoder side, zeros on the decoder side.
    Learned,
    /// Gaussian channel from encoder to decoder; input is μ then raw σ.
    Channel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    /// Columns of the mixing output read by the block (empty for injections).
    pub input: Range<usize>,
    pub width: usize,
}

/// A mixing linear map followed by blocks whose outputs are concatenated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperLayerSpec {
    pub blocks: Vec<BlockSpec>,
}

impl HyperLayerSpec {
    pub fn standard() -> Self {
        use BlockKind::*;
        let a = ACTIVATION_WIDTH;
        let att = 6 * ATTENTION_WIDTH;
        let ch = 2 * CHANNEL_WIDTH;
        let b = |kind, input: Range<usize>, width| BlockSpec { kind, input, width };
        Self {
            blocks: vec![
                b(Activation, 0..a, a),
                b(PositionIn, a..a, POSITION_WIDTH),
                b(PositionOut, a..a, POSITION_WIDTH),
                b(PositionLayer, a..a, POSITION_WIDTH),
                b(Random, a..a, RANDOM_WIDTH),
                b(Attention, a..a + att, 2 * ATTENTION_WIDTH),
                b(Learned, a + att..a + att, LEARNED_WIDTH),
                b(Channel, a + att..a + att + ch, CHANNEL_WIDTH),
            ],
        }
    }

    /// Width of the mixing output.
    pub fn mix_width(&self) -> usize {
        self.blocks.iter().map(|b| b.input.end).max().unwrap_or(0)
    }

    pub fn out_width(&self) -> usize {
        self.blocks.iter().map(|b| b.width).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for b in &self.blocks {
            if b.input.start != next || b.input.end < b.input.start {
                return Err(Error::config(format!(
                    "block {:?} does not continue the mixing prefix",
                    b.kind
                )));
            }
            let want_in = match b.kind {
                BlockKind::Activation => b.width,
                BlockKind::Attention => 3 * b.width,
                BlockKind::Channel => 2 * b.width,
                _ => 0,
            };
            if b.input.len() != want_in {
                return Err(Error::config(format!(
                    "block {:?} reads {} columns, needs {want_in}",
                    b.kind,
                    b.input.len()
                )));
            }
            if b.kind == BlockKind::Attention && b.width != 2 * ATTENTION_WIDTH {
                return Err(Error::config("attention block must be 10 wide"));
            }
            if matches!(
                b.kind,
                BlockKind::PositionIn | BlockKind::PositionOut | BlockKind::PositionLayer
            ) && b.width % 2 != 0
            {
                return Err(Error::config("positional encodings need an even width"));
            }
            next = b.input.end;
        }
        if self.out_width() != HYPER_WIDTH {
            return Err(Error::config(format!(
                "blocks emit {} hyperfeatures, need {HYPER_WIDTH}",
                self.out_width()
            )));
        }
        Ok(())
    }
}

/// Where each group of hyperweights lives in the flat vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperLayout {
    /// Largest target architecture; sizes the learned variables.
    pub bounds: MlpSpec,
    pub layer: HyperLayerSpec,
    pub depth: usize,
}

impl HyperLayout {
    pub fn new(bounds: MlpSpec, depth: usize) -> Result<Self> {
        bounds.validate()?;
        let layer = HyperLayerSpec::standard();
        layer.validate()?;
        if depth == 0 {
            return Err(Error::config("hyperdepth must be positive"));
        }
        Ok(Self { bounds, layer, depth })
    }

    fn mix_params(&self) -> usize {
        (HYPER_WIDTH + 1) * self.layer.mix_width()
    }

    /// Offset of hyperlayer `l`'s mixing matrix (`F × mix`, row-major) and
    /// bias.
    pub fn mixing_range(&self, l: usize) -> (Range<usize>, Range<usize>) {
        let m = self.layer.mix_width();
        let start = l * self.mix_params();
        (
            start..start + HYPER_WIDTH * m,
            start + HYPER_WIDTH * m..start + self.mix_params(),
        )
    }

    pub fn readout_range(&self) -> (Range<usize>, Range<usize>) {
        let start = self.depth * self.mix_params();
        (
            start..start + 2 * HYPER_WIDTH,
            start + 2 * HYPER_WIDTH..start + 2 * HYPER_WIDTH + 2,
        )
    }

    pub fn learned_range(&self) -> Range<usize> {
        let start = self.readout_range().1.end;
        start..start + LEARNED_WIDTH * num_edges(&self.bounds)
    }

    /// Total number of hyperweights `P`.
    pub fn num_params(&self) -> usize {
        self.learned_range().end
    }

    /// Xavier-normal matrices, zero biases and zero learned variables.
    pub fn xavier_init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut hw = vec![0.0; self.num_params()];
        let m = self.layer.mix_width();
        let mut fill = |range: Range<usize>, fan_in: usize, fan_out: usize, rng: &mut R| {
            let sd = (2.0 / (fan_in + fan_out) as f64).sqrt();
            let normal = Normal::new(0.0, sd).expect("positive sd");
            for x in &mut hw[range] {
                *x = normal.sample(rng);
            }
        };
        for l in 0..self.depth {
            fill(self.mixing_range(l).0, HYPER_WIDTH, m, rng);
        }
        fill(self.readout_range().0, HYPER_WIDTH, 2, rng);
        hw
    }
}

pub fn num_edges(spec: &MlpSpec) -> usize {
    (0..spec.num_layers())
        .map(|l| {
            let (i, o) = spec.layer_dims(l);
            i * o
        })
        .sum()
}

/// `[sin(2πx/λ₀), cos(2πx/λ₀), sin(2πx/λ₁), …]` with wavelengths geometric
/// from 2 to 10⁴.
pub fn sinusoidal_encoding(x: usize, width: usize) -> Vec<f64> {
    let pairs = width / 2;
    let mut out = Vec::with_capacity(width);
    for k in 0..pairs {
        let frac = if pairs > 1 { k as f64 / (pairs - 1) as f64 } else { 0.0 };
        let wavelength = 2.0 * (1e4f64 / 2.0).powf(frac);
        let angle = std::f64::consts::TAU * x as f64 / wavelength;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    out
}

/// `KL(N(μ_q, σ_q²) ‖ N(μ_p, σ_p²))` for one dimension.
pub fn gaussian_kl<T: Scalar>(mu_q: T, sd_q: T, mu_p: T, sd_p: T) -> T {
    let d = mu_q - mu_p;
    (sd_p / sd_q).ln() + (sd_q * sd_q + d * d) / (T::lit(2.0) * sd_p * sd_p) - T::lit(0.5)
}

/// Running total of channel KL divergences in one generation pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KlAccumulator<T> {
    total: T,
}

impl<T: Scalar> KlAccumulator<T> {
    pub fn add(&mut self, kl: T) {
        self.total += kl;
    }

    pub fn total(&self) -> T {
        self.total
    }
}

/// Static description of one target architecture: edge offsets, per-row
/// coordinates and attention groups.
#[derive(Clone, Debug)]
pub struct TargetGraph {
    pub spec: MlpSpec,
    pub edges: usize,
    /// Start of each layer's positions.
    pub offsets: Vec<usize>,
    /// `(ℓ, i, j)` of every position.
    pub coords: Vec<(usize, usize, usize)>,
    /// Groups over the `4E` message rows: front messages of all `2E` rows,
    /// then behind messages.
    pub groups: Rc<[Vec<usize>]>,
}

impl TargetGraph {
    pub fn new(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        if spec.num_layers() < 2 {
            return Err(Error::config("target network needs at least one hidden layer"));
        }
        let edges = num_edges(spec);
        let mut offsets = Vec::with_capacity(spec.num_layers());
        let mut coords = Vec::with_capacity(edges);
        for l in 0..spec.num_layers() {
            offsets.push(coords.len());
            let (n_in, n_out) = spec.layer_dims(l);
            for i in 0..n_in {
                for j in 0..n_out {
                    coords.push((l, i, j));
                }
            }
        }
        // A neuron (k, n) hears the front messages of edges entering it and
        // the behind messages of edges leaving it.
        let sizes = &spec.layer_sizes;
        let neuron_base: Vec<usize> = sizes
            .iter()
            .scan(0, |acc, &s| {
                let b = *acc;
                *acc += s;
                Some(b)
            })
            .collect();
        let neurons = sizes.iter().sum::<usize>();
        let mut per_neuron: Vec<Vec<usize>> = vec![Vec::new(); 2 * neurons];
        let rows = 2 * edges;
        for side in 0..2 {
            for (e, &(l, i, j)) in coords.iter().enumerate() {
                let r = side * edges + e;
                per_neuron[side * neurons + neuron_base[l + 1] + j].push(r);
                per_neuron[side * neurons + neuron_base[l] + i].push(rows + r);
            }
        }
        if per_neuron.iter().any(Vec::is_empty) {
            return Err(Error::config("every neuron needs at least one edge"));
        }
        Ok(Self {
            spec: spec.clone(),
            edges,
            offsets,
            coords,
            groups: per_neuron.into(),
        })
    }

    fn position_block(&self, kind: BlockKind, width: usize) -> Vec<f64> {
        let last = self.spec.num_layers() - 1;
        let mut one = Vec::with_capacity(self.edges * width);
        for &(l, i, j) in &self.coords {
            let enc = match kind {
                BlockKind::PositionIn if l == 0 => Some(i),
                BlockKind::PositionOut if l == last => Some(j),
                BlockKind::PositionLayer => Some(l),
                _ => None,
            };
            match enc {
                Some(x) => one.extend(sinusoidal_encoding(x, width)),
                None => one.extend(std::iter::repeat_n(0.0, width)),
            }
        }
        let mut both = one.clone();
        both.extend(one);
        both
    }
}

/// Generated network on a tape, with the KL total.
pub struct TapedGeneration<'t, T: Scalar> {
    /// Per layer `(W as fan_in × fan_out, b)`.
    pub layers: Vec<(Var<'t, T>, Var<'t, T>)>,
    pub kl: Var<'t, T>,
}

impl<T: Scalar> TapedGeneration<'_, T> {
    pub fn weights(&self) -> Result<MlpWeights<T>> {
        let layers = self
            .layers
            .iter()
            .map(|(w, b)| {
                Ok(Layer {
                    weight: w.value().transpose()?,
                    bias: b.value(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(MlpWeights { layers })
    }
}

/// Shared state of one generation pass.
pub struct HyperPass<'t, 'g, T: Scalar> {
    pub tape: &'t Tape<T>,
    pub graph: &'g TargetGraph,
    pub layout: &'g HyperLayout,
    pub hw: Var<'t, T>,
    pub mode: GenerationMode,
    learned: Var<'t, T>,
    kl_terms: Vec<Var<'t, T>>,
}

impl<'t, 'g, T: Scalar> HyperPass<'t, 'g, T> {
    pub fn new(layout: &'g HyperLayout, graph: &'g TargetGraph, hw: Var<'t, T>, mode: GenerationMode) -> Result<Self> {
        let tape = hw.tape();
        if hw.shape() != [layout.num_params()] {
            return Err(Error::config(format!(
                "hyperweights have shape {:?}, layout needs [{}]",
                hw.shape(),
                layout.num_params()
            )));
        }
        if graph.spec.num_layers() != layout.bounds.num_layers() {
            return Err(Error::config("target depth differs from the layout's bounds"));
        }
        let learned = learned_rows(layout, graph, hw)?;
        Ok(Self {
            tape,
            graph,
            layout,
            hw,
            mode,
            learned,
            kl_terms: Vec::new(),
        })
    }

    fn param(&self, range: Range<usize>, shape: &[usize]) -> Result<Var<'t, T>> {
        self.hw.slice(0, range)?.reshape(shape)
    }

    /// Sum of the channel KLs so far.
    pub fn kl(&self) -> Result<Var<'t, T>> {
        match self.kl_terms.split_first() {
            None => Ok(self.tape.scalar(T::zero())),
            Some((first, rest)) => rest.iter().try_fold(*first, |acc, &k| acc.add(k)),
        }
    }

    /// Mixing linear map then every block of the layer spec.
    pub fn run_hyperlayer<R: Rng + ?Sized>(&mut self, acts: Var<'t, T>, l: usize, rng: &mut R) -> Result<Var<'t, T>> {
        let m = self.layout.layer.mix_width();
        let (wr, br) = self.layout.mixing_range(l);
        let mixed = acts
            .matmul(self.param(wr, &[HYPER_WIDTH, m])?)?
            .add(self.param(br, &[m])?)?;
        let e = self.graph.edges;
        let blocks = self.layout.layer.blocks.clone();
        let mut outs = Vec::with_capacity(blocks.len());
        for b in &blocks {
            let input = || mixed.slice(1, b.input.clone());
            let out = match b.kind {
                BlockKind::Activation => input()?.silu(),
                BlockKind::PositionIn | BlockKind::PositionOut | BlockKind::PositionLayer => {
                    let data = self.graph.position_block(b.kind, b.width);
                    self.tape.constant(Tensor::from_f64(&[2 * e, b.width], &data)?)
                }
                BlockKind::Random => {
                    let one: Vec<f64> = (0..e * b.width).map(|_| StandardNormal.sample(rng)).collect();
                    let mut both = one.clone();
                    both.extend(one);
                    self.tape.constant(Tensor::from_f64(&[2 * e, b.width], &both)?)
                }
                BlockKind::Attention => self.attention(input()?)?,
                BlockKind::Learned => self.learned,
                BlockKind::Channel => self.channel(input()?, b.width, rng)?,
            };
            outs.push(out);
        }
        self.tape.concat(&outs, 1)
    }

    fn attention(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = ATTENTION_WIDTH;
        let rows = 2 * self.graph.edges;
        let part = |dir: usize, k: usize| x.slice(1, (3 * dir + k) * w..(3 * dir + k + 1) * w);
        let stack = |k: usize| -> Result<Var<'t, T>> { self.tape.concat(&[part(0, k)?, part(1, k)?], 0) };
        let out = self
            .tape
            .segment_attention(stack(0)?, stack(1)?, stack(2)?, self.graph.groups.clone())?;
        self.tape
            .concat(&[out.slice(0, 0..rows)?, out.slice(0, rows..2 * rows)?], 1)
    }

    fn channel<R: Rng + ?Sized>(&mut self, x: Var<'t, T>, width: usize, rng: &mut R) -> Result<Var<'t, T>> {
        let e = self.graph.edges;
        let mu = x.slice(1, 0..width)?;
        let sd = x.slice(1, width..2 * width)?.softplus().add_scalar(T::lit(SIGMA_FLOOR));
        let (mu_q, mu_p) = (mu.slice(0, 0..e)?, mu.slice(0, e..2 * e)?);
        let (sd_q, sd_p) = (sd.slice(0, 0..e)?, sd.slice(0, e..2 * e)?);
        let diff = mu_q.sub(mu_p)?;
        let kl = sd_p
            .div(sd_q)?
            .log()?
            .add(
                sd_q.square()
                    .add(diff.square())?
                    .div(sd_p.square().scale(T::lit(2.0)))?,
            )?
            .add_scalar(T::lit(-0.5))
            .sum_all()?;
        self.kl_terms.push(kl);
        let eps: Vec<f64> = (0..e * width).map(|_| StandardNormal.sample(rng)).collect();
        let eps = self.tape.constant(Tensor::from_f64(&[e, width], &eps)?);
        let z = match self.mode {
            GenerationMode::WithEncoder => mu_q.add(sd_q.mul(eps)?)?,
            GenerationMode::DecoderOnly => mu_p.add(sd_p.mul(eps)?)?,
        };
        self.tape.concat(&[z, z], 0)
    }

    /// Reads weights and biases off the decoder rows of the final output.
    pub fn readout(&self, acts: Var<'t, T>) -> Result<Vec<(Var<'t, T>, Var<'t, T>)>> {
        let e = self.graph.edges;
        let (wr, br) = self.layout.readout_range();
        let out = acts
            .slice(0, e..2 * e)?
            .matmul(self.param(wr, &[HYPER_WIDTH, 2])?)?
            .add(self.param(br, &[2])?)?;
        let (weights, biases) = (out.slice(1, 0..1)?, out.slice(1, 1..2)?);
        (0..self.graph.spec.num_layers())
            .map(|l| {
                let (n_in, n_out) = self.graph.spec.layer_dims(l);
                let r = self.graph.offsets[l]..self.graph.offsets[l] + n_in * n_out;
                let w = weights.slice(0, r.clone())?.reshape(&[n_in, n_out])?;
                let b = biases.slice(0, r)?.reshape(&[n_in, n_out])?.mean(0)?;
                Ok((w, b))
            })
            .collect()
    }
}

/// Learned variables laid out as a `2E × 5` block: encoder rows pick the
/// variables of their position within the bounds (zeros outside), decoder
/// rows are zero.
fn learned_rows<'t, T: Scalar>(layout: &HyperLayout, graph: &TargetGraph, hw: Var<'t, T>) -> Result<Var<'t, T>> {
    let tape = hw.tape();
    let bound_edges = num_edges(&layout.bounds);
    let table = hw
        .slice(0, layout.learned_range())?
        .reshape(&[bound_edges, LEARNED_WIDTH])?;
    let zero_row = tape.constant(Tensor::zeros(&[1, LEARNED_WIDTH]));
    let table = tape.concat(&[table, zero_row], 0)?;
    let mut bound_offsets = Vec::new();
    let mut acc = 0;
    for l in 0..layout.bounds.num_layers() {
        bound_offsets.push(acc);
        let (i, o) = layout.bounds.layer_dims(l);
        acc += i * o;
    }
    let index: Vec<usize> = graph
        .coords
        .iter()
        .map(|&(l, i, j)| {
            let (bi, bo) = layout.bounds.layer_dims(l);
            if i < bi && j < bo {
                bound_offsets[l] + i * bo + j
            } else {
                bound_edges
            }
        })
        .collect();
    let encoder = table.gather_rows(index.into())?;
    let decoder = tape.constant(Tensor::zeros(&[graph.edges, LEARNED_WIDTH]));
    tape.concat(&[encoder, decoder], 0)
}

/// Runs the hypernetwork on a tape so gradients reach `hw`.
pub fn generate_on_tape<'t, T: Scalar, R: Rng + ?Sized>(
    layout: &HyperLayout,
    graph: &TargetGraph,
    hw: Var<'t, T>,
    rng: &mut R,
    mode: GenerationMode,
) -> Result<TapedGeneration<'t, T>> {
    let mut pass = HyperPass::new(layout, graph, hw, mode)?;
    let mut acts = hw.tape().constant(Tensor::zeros(&[2 * graph.edges, HYPER_WIDTH]));
    for l in 0..layout.depth {
        acts = pass.run_hyperlayer(acts, l, rng)?;
    }
    Ok(TapedGeneration {
        layers: pass.readout(acts)?,
        kl: pass.kl()?,
    })
}

/// Generates the weights of `spec` from flat hyperweights `hw`. Returns the
/// network and the accumulated channel KL.
pub fn generate_weights<T: Scalar, R: Rng + ?Sized>(
    layout: &HyperLayout,
    hw: &[T],
    spec: &MlpSpec,
    rng: &mut R,
    mode: GenerationMode,
) -> Result<(MlpWeights<T>, KlAccumulator<T>)> {
    if hw.len() != layout.num_params() {
        return Err(Error::config(format!(
            "expected {} hyperweights, got {}",
            layout.num_params(),
            hw.len()
        )));
    }
    let graph = TargetGraph::new(spec)?;
    let tape = Tape::new();
    let hw = tape.constant(Tensor::from_vec(hw.to_vec()));
    let generated = generate_on_tape(layout, &graph, hw, rng, mode)?;
    let mut kl = KlAccumulator::default();
    kl.add(generated.kl.item()?);
    Ok((generated.weights()?, kl))
}
