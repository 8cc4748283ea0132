//! Force-directed drawings of networks. Nodes are placed in four
//! dimensions, and the two extra dimensions are squeezed out during
//! descent so that clusters can pass around each other early on.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::MlpWeights;
use crate::scalar::Scalar;

pub const DIMS: usize = 4;
pub type Point = [f64; DIMS];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Input,
    Hidden,
    Output,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub layer: usize,
    pub index: usize,
    pub role: Role,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NeuronGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

impl NeuronGraph {
    /// One node per neuron and one edge per weight.
    pub fn from_network<T: Scalar>(net: &MlpWeights<T>) -> Result<Self> {
        net.validate()?;
        let sizes = net.spec().layer_sizes;
        let last = sizes.len() - 1;
        let mut nodes = Vec::new();
        let mut base = Vec::new();
        for (layer, &n) in sizes.iter().enumerate() {
            base.push(nodes.len());
            let role = match layer {
                0 => Role::Input,
                l if l == last => Role::Output,
                _ => Role::Hidden,
            };
            nodes.extend((0..n).map(|index| Node { layer, index, role }));
        }
        let mut edges = Vec::new();
        for (l, layer) in net.layers.iter().enumerate() {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            for j in 0..n_out {
                for i in 0..n_in {
                    edges.push(Edge {
                        from: base[l] + i,
                        to: base[l + 1] + j,
                        weight: layer.weight.data()[j * n_in + i].as_f64(),
                    });
                }
            }
        }
        let g = Self { nodes, edges };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.edges {
            let (a, b) = (self.nodes.get(e.from), self.nodes.get(e.to));
            match (a, b) {
                (Some(a), Some(b)) if a.layer.abs_diff(b.layer) == 1 => {}
                _ => {
                    return Err(Error::shape(format!(
                        "edge {}→{} does not join adjacent layers",
                        e.from, e.to
                    )))
                }
            }
            if !e.weight.is_finite() {
                return Err(Error::Numeric(format!(
                    "edge {}→{} has weight {}",
                    e.from, e.to, e.weight
                )));
            }
        }
        Ok(())
    }

    pub fn max_abs_weight(&self) -> f64 {
        self.edges.iter().fold(0.0, |m, e| m.max(e.weight.abs()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyCoefficients {
    pub repulsion: f64,
    pub attraction: f64,
    pub centering: f64,
}

impl Default for EnergyCoefficients {
    fn default() -> Self {
        Self {
            repulsion: 1.0,
            attraction: 1.0,
            centering: 1.0,
        }
    }
}

/// Softening of pairwise distances.
pub const DISTANCE_EPS: f64 = 1e-9;

fn diff(a: &Point, b: &Point) -> Point {
    std::array::from_fn(|d| a[d] - b[d])
}

fn norm2(p: &Point) -> f64 {
    p.iter().map(|x| x * x).sum()
}

/// Energy with edge strengths `|w| · weight_scale`.
pub fn layout_energy(pos: &[Point], graph: &NeuronGraph, coef: &EnergyCoefficients, weight_scale: f64) -> f64 {
    let mut e = 0.0;
    for p in 0..pos.len() {
        for q in p + 1..pos.len() {
            e += coef.repulsion / (norm2(&diff(&pos[p], &pos[q])) + DISTANCE_EPS * DISTANCE_EPS).sqrt();
        }
    }
    for edge in &graph.edges {
        e += coef.attraction * edge.weight.abs() * weight_scale * norm2(&diff(&pos[edge.from], &pos[edge.to]));
    }
    e + coef.centering * pos.iter().map(norm2).sum::<f64>()
}

pub fn layout_gradient(pos: &[Point], graph: &NeuronGraph, coef: &EnergyCoefficients, weight_scale: f64) -> Vec<Point> {
    let mut g: Vec<Point> = pos.iter().map(|p| p.map(|x| 2.0 * coef.centering * x)).collect();
    for p in 0..pos.len() {
        for q in p + 1..pos.len() {
            let d = diff(&pos[p], &pos[q]);
            let s2 = norm2(&d) + DISTANCE_EPS * DISTANCE_EPS;
            let f = -coef.repulsion / (s2 * s2.sqrt());
            for k in 0..DIMS {
                g[p][k] += f * d[k];
                g[q][k] -= f * d[k];
            }
        }
    }
    for edge in &graph.edges {
        let d = diff(&pos[edge.from], &pos[edge.to]);
        let f = 2.0 * coef.attraction * edge.weight.abs() * weight_scale;
        for k in 0..DIMS {
            g[edge.from][k] += f * d[k];
            g[edge.to][k] -= f * d[k];
        }
    }
    g
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutConfig {
    pub iterations: usize,
    pub step: f64,
    /// Excess dimensions are multiplied by `exp(-decay_rate · t / T)` after step `t`.
    pub decay_rate: f64,
    pub coefficients: EnergyCoefficients,
    /// Divide edge strengths by the largest `|w|` so the fixed step is stable
    /// for any weight scale.
    pub normalize_weights: bool,
    /// Largest distance a node may move in one step.
    pub max_displacement: f64,
    pub max_restarts: usize,
    pub seed: u64,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            iterations: 2_000,
            step: 1e-2,
            decay_rate: 5.0,
            coefficients: EnergyCoefficients::default(),
            normalize_weights: true,
            max_displacement: 0.1,
            max_restarts: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutResult {
    pub positions: Vec<Point>,
    pub energies: Vec<f64>,
    pub restarts: usize,
}

impl LayoutResult {
    pub fn planar(&self) -> Vec<[f64; 2]> {
        self.positions.iter().map(|p| [p[0], p[1]]).collect()
    }
}

/// Starting point of a node, keyed by its identity rather than its index
/// so that reordering nodes reorders the layout.
fn initial_point(node: &Node, seed: u64, attempt: usize) -> Point {
    let key = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((node.layer as u64) << 32 | node.index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(attempt as u64);
    std::array::from_fn(|_| StandardNormal.sample(&mut rng))
}

pub fn run_layout(graph: &NeuronGraph, cfg: &LayoutConfig) -> Result<LayoutResult> {
    graph.validate()?;
    let max_w = graph.max_abs_weight();
    let scale = if cfg.normalize_weights && max_w > 0.0 {
        1.0 / max_w
    } else {
        1.0
    };
    let coef = &cfg.coefficients;
    'attempt: for attempt in 0..=cfg.max_restarts {
        let mut pos: Vec<Point> = graph
            .nodes
            .iter()
            .map(|n| initial_point(n, cfg.seed, attempt))
            .collect();
        let mut energies = Vec::with_capacity(cfg.iterations + 1);
        energies.push(layout_energy(&pos, graph, coef, scale));
        for t in 1..=cfg.iterations {
            let grad = layout_gradient(&pos, graph, coef, scale);
            let decay = (-cfg.decay_rate * t as f64 / cfg.iterations as f64).exp();
            for (p, g) in pos.iter_mut().zip(&grad) {
                let len = cfg.step * norm2(g).sqrt();
                let shrink = if len > cfg.max_displacement {
                    cfg.max_displacement / len
                } else {
                    1.0
                };
                for k in 0..DIMS {
                    p[k] -= cfg.step * shrink * g[k];
                }
                p[2] *= decay;
                p[3] *= decay;
            }
            let e = layout_energy(&pos, graph, coef, scale);
            if !e.is_finite() {
                continue 'attempt;
            }
            energies.push(e);
        }
        if !energies[0].is_finite() {
            continue;
        }
        return Ok(LayoutResult {
            positions: pos,
            energies,
            restarts: attempt,
        });
    }
    Err(Error::Numeric(format!(
        "layout energy stayed non-finite after {} restarts",
        cfg.max_restarts
    )))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub size: f64,
    pub margin: f64,
    pub node_radius: f64,
    pub max_stroke: f64,
    /// Edges with `|w|` below this fraction of the largest are not drawn.
    pub floor_fraction: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            size: 600.0,
            margin: 30.0,
            node_radius: 6.0,
            max_stroke: 6.0,
            floor_fraction: 0.02,
        }
    }
}

pub const INPUT_COLOR: &str = "#2ca02c";
pub const OUTPUT_COLOR: &str = "#d62ad6";
pub const HIDDEN_COLOR: &str = "#7f7f7f";
pub const POSITIVE_COLOR: &str = "#d62728";
pub const NEGATIVE_COLOR: &str = "#1f77b4";

/// Maps planar positions into the square viewport, keeping the aspect ratio.
pub fn fit_to_viewport(points: &[[f64; 2]], opts: &RenderOptions) -> Vec<[f64; 2]> {
    if points.is_empty() {
        return Vec::new();
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let inner = opts.size - 2.0 * opts.margin;
    let s = if span > 0.0 { inner / span } else { 0.0 };
    let center = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
    points
        .iter()
        .map(|p| {
            [
                opts.size / 2.0 + s * (p[0] - center[0]),
                opts.size / 2.0 - s * (p[1] - center[1]),
            ]
        })
        .collect()
}

/// Edges drawn under `opts`.
pub fn visible_edges<'g>(graph: &'g NeuronGraph, opts: &RenderOptions) -> impl Iterator<Item = &'g Edge> {
    let max_w = graph.max_abs_weight();
    let floor = opts.floor_fraction * max_w;
    graph
        .edges
        .iter()
        .filter(move |e| e.weight != 0.0 && e.weight.abs() >= floor)
}

/// SVG text. `comment` is embedded verbatim as an XML comment.
pub fn svg_string(
    points: &[[f64; 2]],
    graph: &NeuronGraph,
    opts: &RenderOptions,
    comment: Option<&str>,
) -> Result<String> {
    if points.len() != graph.nodes.len() {
        return Err(Error::shape(format!(
            "{} positions for {} nodes",
            points.len(),
            graph.nodes.len()
        )));
    }
    let xy = fit_to_viewport(points, opts);
    let max_w = graph.max_abs_weight();
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{0}" height="{0}" viewBox="0 0 {0} {0}">"#,
        opts.size
    );
    if let Some(c) = comment {
        let _ = writeln!(s, "<!-- {} -->", c.replace("--", "- -"));
    }
    for e in visible_edges(graph, opts) {
        let (a, b) = (xy[e.from], xy[e.to]);
        let color = if e.weight > 0.0 { POSITIVE_COLOR } else { NEGATIVE_COLOR };
        let width = opts.max_stroke * e.weight.abs() / max_w;
        let _ = writeln!(
            s,
            r#"<line x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}" stroke="{color}" stroke-width="{width:.3}" stroke-opacity="0.8"/>"#,
            a[0], a[1], b[0], b[1]
        );
    }
    for (n, p) in graph.nodes.iter().zip(&xy) {
        let color = match n.role {
            Role::Input => INPUT_COLOR,
            Role::Output => OUTPUT_COLOR,
            Role::Hidden => HIDDEN_COLOR,
        };
        let _ = writeln!(
            s,
            r#"<circle cx="{:.3}" cy="{:.3}" r="{}" fill="{color}" stroke="black" stroke-width="0.5"/>"#,
            p[0], p[1], opts.node_radius
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn render_svg(
    points: &[[f64; 2]],
    graph: &NeuronGraph,
    path: &Path,
    opts: &RenderOptions,
    comment: Option<&str>,
) -> Result<()> {
    let text = svg_string(points, graph, opts, comment)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Sidecar written next to each drawing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrawingSidecar {
    pub version: String,
    pub config_hash: String,
    pub layout: LayoutConfig,
    pub render: RenderOptions,
    pub restarts: usize,
    pub final_energy: f64,
    pub positions: Vec<[f64; 2]>,
    pub nodes: Vec<Node>,
}
