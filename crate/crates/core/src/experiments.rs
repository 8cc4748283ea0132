//! Experiment commands behind the `hypergen` binary. Every command reads a
//! [`RunConfig`], writes its artifacts under `out_dir`, and stamps them
//! with the config hash and crate version.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::{
    accuracy, calibrate_thresholds, classify, reference_order_params, AlgorithmLabel, CalibrationConfig, OrderParams,
    PhaseCell, PhaseGrid, Thresholds,
};
use crate::contour::{contour, Contour};
use crate::error::{Error, Result};
use crate::hypernet::GenerationMode;
use crate::layout::{render_svg, run_layout, DrawingSidecar, LayoutConfig, NeuronGraph, RenderOptions};
use crate::network::{evaluate, MlpSpec, MlpWeights, SerdeWeights};
use crate::trainer::{
    config_hash, eval_batch, evaluate_frontier, generate_network, line_col_offset, log_beta_grid, train_baseline_adam,
    BaselineConfig, Checkpoint, FrontierRow, StepMetrics, TrainConfig, Trainer, VERSION,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const CONTOUR_LEVELS: [f64; 2] = [0.07, 0.15];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Desk,
    Paper,
}

/// What to do when an output file already exists.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverwritePolicy {
    Refuse,
    /// Move the old file aside as `name.N.ext` and write a fresh one.
    #[default]
    Versioned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub experiment: String,
    pub scale: Scale,
    pub train: TrainConfig,
    pub beta_min: f64,
    pub beta_max: f64,
    pub beta_steps: usize,
    pub seeds: Vec<u64>,
    pub eval_samples: usize,
    pub generalize_samples: usize,
    /// Below this maximum KL over the β grid a run counts as encoder-independent.
    pub encoder_independence_kl: f64,
    pub contour_levels: Vec<f64>,
    pub baseline: BaselineConfig,
    pub calibration: CalibrationConfig,
    pub heldout_per_class: usize,
    pub layout: LayoutConfig,
    pub render: RenderOptions,
    pub out_dir: PathBuf,
    pub jobs: usize,
    pub overwrite: OverwritePolicy,
}

impl RunConfig {
    pub fn preset(scale: Scale) -> Self {
        let train = match scale {
            Scale::Desk => TrainConfig::desk(),
            Scale::Paper => TrainConfig::paper(),
        };
        let (n0, n1) = (train.inputs, train.hidden);
        let mut baseline = BaselineConfig::new(n0, n1);
        if scale == Scale::Desk {
            baseline.steps = 10_000;
        }
        let seeds = match scale {
            Scale::Desk => 5,
            Scale::Paper => 33,
        };
        Self {
            experiment: "l1".into(),
            scale,
            beta_min: train.beta_min,
            beta_max: train.beta_max,
            beta_steps: 30,
            seeds: (0..seeds).collect(),
            eval_samples: 100_000,
            generalize_samples: 10_000,
            encoder_independence_kl: 1e-3,
            contour_levels: CONTOUR_LEVELS.to_vec(),
            baseline,
            calibration: CalibrationConfig::new(n0, n1),
            heldout_per_class: 50,
            layout: LayoutConfig::default(),
            render: RenderOptions::default(),
            out_dir: PathBuf::from("runs").join(match scale {
                Scale::Desk => "desk",
                Scale::Paper => "paper",
            }),
            jobs: 1,
            overwrite: OverwritePolicy::default(),
            train,
        }
    }

    /// Parses a JSON config layered over the preset named by its `scale`
    /// field, or `scale` when the file names none.
    pub fn from_json(text: &str, scale: Scale) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| parse_error(text, &e))?;
        if !user.is_object() {
            return Err(Error::config("config must be a JSON object"));
        }
        let scale = match user.get("scale") {
            Some(s) => serde_json::from_value(s.clone()).map_err(|e| Error::config(format!("scale: {e}")))?,
            None => scale,
        };
        let mut merged = serde_json::to_value(Self::preset(scale)).expect("preset serializes");
        merge(&mut merged, user);
        let mut cfg: Self = serde_json::from_value(merged).map_err(|e| Error::config(e.to_string()))?;
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, scale: Scale) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, scale)
    }

    /// Copies the shared architecture and β range into sub-configs.
    pub fn sync(&mut self) {
        self.train.beta_min = self.beta_min;
        self.train.beta_max = self.beta_max;
        self.baseline.inputs = self.train.inputs;
        self.baseline.hidden = self.train.hidden;
        self.calibration.inputs = self.train.inputs;
        self.calibration.hidden = self.train.hidden;
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        log_beta_grid(self.beta_min, self.beta_max, self.beta_steps)?;
        if self.seeds.is_empty() || self.eval_samples == 0 || self.generalize_samples == 0 {
            return Err(Error::config("need at least one seed and a non-empty evaluation batch"));
        }
        if self.jobs == 0 {
            return Err(Error::config("jobs must be at least 1"));
        }
        Ok(())
    }

    pub fn spec(&self) -> MlpSpec {
        self.train.spec()
    }

    pub fn betas(&self) -> Result<Vec<f64>> {
        log_beta_grid(self.beta_min, self.beta_max, self.beta_steps)
    }

    /// Hash of everything that affects results (not paths or parallelism).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.jobs = 1;
        c.overwrite = OverwritePolicy::default();
        config_hash(&c)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out_dir.join("checkpoints")
    }

    fn stamp(&self) -> Stamp {
        Stamp {
            version: VERSION.to_string(),
            config_hash: self.hash(),
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| Error::config(format!("worker pool: {e}")))
    }
}

fn parse_error(text: &str, e: &serde_json::Error) -> Error {
    Error::Parse {
        line: e.line(),
        column: e.column(),
        offset: line_col_offset(text, e.line(), e.column()),
        message: e.to_string(),
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub version: String,
    pub config_hash: String,
}

impl Stamp {
    fn comment(&self) -> String {
        format!("{} config {}", self.version, self.config_hash)
    }
}

/// Prepares `path` for writing under `policy`.
pub fn claim_output(path: &Path, policy: OverwritePolicy) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    if !path.exists() {
        return Ok(());
    }
    match policy {
        OverwritePolicy::Refuse => Err(Error::io(
            path,
            std::io::Error::new(
                std::io::ErrorKind::AlreadyExists,
                "output exists and overwriting is refused",
            ),
        )),
        OverwritePolicy::Versioned => {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
            let ext = path
                .extension()
                .and_then(|s| s.to_str())
                .map(|e| format!(".{e}"))
                .unwrap_or_default();
            let aside = (1..)
                .map(|n| path.with_file_name(format!("{stem}.{n}{ext}")))
                .find(|p| !p.exists())
                .expect("unbounded search");
            fs::rename(path, &aside).map_err(|e| Error::io(path, e))
        }
    }
}

fn write_output(path: &Path, contents: &[u8], policy: OverwritePolicy) -> Result<()> {
    claim_output(path, policy)?;
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S, policy: OverwritePolicy) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("artifact serializes");
    write_output(path, text.as_bytes(), policy)
}

/// One row of every experiment table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub schema: u32,
    pub version: String,
    pub config_hash: String,
    pub experiment: String,
    pub step: u64,
    pub beta: f64,
    pub seed: u64,
    pub n0: usize,
    pub n1: usize,
    pub mode: String,
    pub loss: f64,
    pub kl: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: Option<f64>,
    pub label: String,
}

/// Append-only CSV table of [`ResultRow`]s.
pub struct ResultsTable {
    path: PathBuf,
}

impl ResultsTable {
    /// Starts a fresh table at `path`.
    pub fn create(path: &Path, policy: OverwritePolicy) -> Result<Self> {
        claim_output(path, policy)?;
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(CSV_HEADER).map_err(|e| csv_error(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
        })
    }

    pub fn append(&self, rows: &[ResultRow]) -> Result<()> {
        let file = fs::OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        for r in rows {
            w.serialize(r).map_err(|e| csv_error(&self.path, e))?;
        }
        w.flush().map_err(|e| Error::io(&self.path, e))
    }

    pub fn read(path: &Path) -> Result<Vec<ResultRow>> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
    }
}

const CSV_HEADER: [&str; 16] = [
    "schema",
    "version",
    "config_hash",
    "experiment",
    "step",
    "beta",
    "seed",
    "n0",
    "n1",
    "mode",
    "loss",
    "kl",
    "alpha1",
    "alpha2",
    "alpha3",
    "label",
];

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
        _ => Error::config(format!("{}: {e}", path.display())),
    }
}

#[allow(clippy::too_many_arguments)]
fn row(
    cfg: &RunConfig,
    experiment: &str,
    step: u64,
    spec: &MlpSpec,
    f: &FrontierRow,
    th: &Thresholds,
) -> Result<ResultRow> {
    let stamp = cfg.stamp();
    Ok(ResultRow {
        schema: SCHEMA_VERSION,
        version: stamp.version,
        config_hash: stamp.config_hash,
        experiment: experiment.into(),
        step,
        beta: f.beta,
        seed: f.seed,
        n0: spec.inputs(),
        n1: spec.hidden(),
        mode: f.mode.name().into(),
        loss: f.loss,
        kl: f.kl,
        alpha1: f.params.alpha1,
        alpha2: f.params.alpha2,
        alpha3: f.params.alpha3,
        label: classify(&f.params, Some(th))?.name().into(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stamp: Stamp,
    pub resumed_from: Option<u64>,
    pub final_step: u64,
    pub checkpoints: Vec<u64>,
    pub last: Option<StepMetrics>,
    /// MSE of the network generated at the smallest β.
    pub final_loss_beta_min: f64,
}

fn append_log(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    let fresh = !path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for m in metrics {
        w.serialize(m).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains (or resumes) the hyperhypernetwork and writes checkpoints.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let dir = cfg.checkpoint_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let existing = Checkpoint::list(&dir)?;
    let mut trainer = match existing.last() {
        Some((_, path)) => {
            let ck = Checkpoint::load(path)?;
            let mut want = cfg.train.clone();
            want.steps = ck.config.steps;
            if want.hash() != ck.config.hash() {
                return Err(Error::config(format!(
                    "refusing to resume from {}: its training config differs from the current one",
                    path.display()
                )));
            }
            let mut t = Trainer::from_checkpoint(ck)?;
            t.config.steps = cfg.train.steps;
            t
        }
        None => Trainer::new(cfg.train.clone())?,
    };
    let resumed_from = existing.last().map(|(s, _)| *s);
    let log_path = cfg.out_dir.join("train_log.csv");
    let mut written = Vec::new();
    if resumed_from.is_none() {
        trainer.checkpoint().save(&dir.join(Checkpoint::dir_name(0)))?;
        written.push(0);
    }
    let mut pending = Vec::new();
    let mut last = None;
    while trainer.step < cfg.train.steps {
        let m = match trainer.train_step() {
            Ok(m) => m,
            Err(e) => {
                append_log(&log_path, &pending)?;
                let dump = serde_json::json!({
                    "error": e.to_string(),
                    "step": trainer.step,
                    "recent": pending.iter().rev().take(20).collect::<Vec<_>>(),
                    "stamp": cfg.stamp(),
                });
                write_json(&cfg.out_dir.join("failure.json"), &dump, OverwritePolicy::Versioned)?;
                return Err(e);
            }
        };
        pending.push(m);
        last = Some(m);
        if trainer.step % cfg.train.checkpoint_every == 0 || trainer.step == cfg.train.steps {
            trainer
                .checkpoint()
                .save(&dir.join(Checkpoint::dir_name(trainer.step)))?;
            written.push(trainer.step);
            append_log(&log_path, &pending)?;
            pending.clear();
        }
    }
    let batch = eval_batch(cfg.train.inputs, cfg.generalize_samples)?;
    let (net, _) = trainer.generate(cfg.beta_min, cfg.seeds[0], GenerationMode::WithEncoder)?;
    Ok(TrainSummary {
        stamp: cfg.stamp(),
        resumed_from,
        final_step: trainer.step,
        checkpoints: written,
        last,
        final_loss_beta_min: evaluate(&net, &batch)?,
    })
}

fn latest_checkpoint(cfg: &RunConfig, explicit: Option<&Path>) -> Result<(u64, Checkpoint)> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => Checkpoint::list(&cfg.checkpoint_dir())?
            .pop()
            .map(|(_, p)| p)
            .ok_or_else(|| Error::config(format!("no checkpoints under {}", cfg.checkpoint_dir().display())))?,
    };
    let ck = Checkpoint::load(&path)?;
    Ok((ck.step, ck))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdArtifact {
    pub stamp: Stamp,
    pub thresholds: Thresholds,
    pub calibration_accuracy: f64,
    pub heldout_accuracy: f64,
    pub samples_per_class: usize,
    pub heldout_per_class: usize,
}

/// Calibrates the classifier on reference networks and scores it on a
/// held-out set drawn from an independent stream.
pub fn calibrate(cfg: &RunConfig) -> Result<ThresholdArtifact> {
    let cal = &cfg.calibration;
    let train = reference_order_params(cal, cal.seed)?;
    let thresholds = calibrate_thresholds(&train)?;
    let mut held = cal.clone();
    held.samples_per_class = cfg.heldout_per_class;
    let heldout = reference_order_params(&held, cal.seed.wrapping_add(0x1000_0000))?;
    Ok(ThresholdArtifact {
        stamp: cfg.stamp(),
        thresholds,
        calibration_accuracy: accuracy(&train, &thresholds)?,
        heldout_accuracy: accuracy(&heldout, &thresholds)?,
        samples_per_class: cal.samples_per_class,
        heldout_per_class: cfg.heldout_per_class,
    })
}

pub fn cmd_calibrate(cfg: &RunConfig) -> Result<ThresholdArtifact> {
    let art = calibrate(cfg)?;
    write_json(&cfg.out_dir.join("thresholds.json"), &art, cfg.overwrite)?;
    Ok(art)
}

/// Thresholds from `thresholds.json` when it matches this config, else
/// freshly calibrated.
pub fn thresholds_for(cfg: &RunConfig) -> Result<Thresholds> {
    let path = cfg.out_dir.join("thresholds.json");
    if let Ok(text) = fs::read_to_string(&path) {
        if let Ok(art) = serde_json::from_str::<ThresholdArtifact>(&text) {
            if art.stamp.config_hash == cfg.hash() {
                return Ok(art.thresholds);
            }
        }
    }
    Ok(calibrate(cfg)?.thresholds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub beta: f64,
    pub seed: u64,
    pub mode: String,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: Option<f64>,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub stamp: Stamp,
    pub step: u64,
    pub rows: usize,
    pub table: PathBuf,
    pub max_kl: f64,
    pub encoder_independent: bool,
    pub best_loss: f64,
    pub best_beta: f64,
}

/// Evaluates the β frontier of a checkpoint for each mode.
pub fn cmd_sweep(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    modes: &[GenerationMode],
    name: &str,
) -> Result<SweepSummary> {
    let (step, ck) = latest_checkpoint(cfg, checkpoint)?;
    let layout = ck.config.layout()?;
    let spec = ck.config.spec();
    let th = thresholds_for(cfg)?;
    let batch = eval_batch(spec.inputs(), cfg.eval_samples)?;
    let betas = cfg.betas()?;
    let frontier = cfg
        .pool()?
        .install(|| evaluate_frontier(&layout, &ck.hhw, &spec, &betas, &cfg.seeds, modes, &batch))?;
    let rows = frontier
        .iter()
        .map(|f| row(cfg, name, step, &spec, f, &th))
        .collect::<Result<Vec<_>>>()?;
    let table_path = cfg.out_dir.join(format!("{name}.csv"));
    ResultsTable::create(&table_path, cfg.overwrite)?.append(&rows)?;
    let scatter: Vec<ScatterPoint> = rows
        .iter()
        .map(|r| ScatterPoint {
            beta: r.beta,
            seed: r.seed,
            mode: r.mode.clone(),
            alpha1: r.alpha1,
            alpha2: r.alpha2,
            alpha3: r.alpha3,
            label: r.label.clone(),
        })
        .collect();
    write_json(
        &cfg.out_dir.join(format!("{name}_scatter.json")),
        &serde_json::json!({ "stamp": cfg.stamp(), "thresholds": th, "points": scatter }),
        cfg.overwrite,
    )?;
    let max_kl = frontier.iter().map(|f| f.kl).fold(0.0, f64::max);
    let best = frontier
        .iter()
        .filter(|f| f.mode == GenerationMode::WithEncoder || !modes.contains(&GenerationMode::WithEncoder))
        .min_by(|a, b| a.loss.total_cmp(&b.loss))
        .ok_or_else(|| Error::config("empty sweep"))?;
    Ok(SweepSummary {
        stamp: cfg.stamp(),
        step,
        rows: rows.len(),
        table: table_path,
        max_kl,
        encoder_independent: max_kl < cfg.encoder_independence_kl,
        best_loss: best.loss,
        best_beta: best.beta,
    })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::domain("spearman needs two equal series of length ≥ 2"));
    }
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = 0.5 * (i + j) as f64;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub stamp: Stamp,
    pub steps: Vec<u64>,
    pub cells: usize,
    pub first_column_majority: AlgorithmLabel,
}

/// Classifies generated networks over every checkpoint and β.
pub fn cmd_phases(cfg: &RunConfig) -> Result<PhaseSummary> {
    let list = Checkpoint::list(&cfg.checkpoint_dir())?;
    if list.len() < 2 {
        return Err(Error::config("phase grid needs at least two checkpoints"));
    }
    let th = thresholds_for(cfg)?;
    let betas = cfg.betas()?;
    let seed = cfg.seeds[0];
    let mut cells = Vec::new();
    let mut steps = Vec::new();
    for (step, path) in &list {
        let ck = Checkpoint::load(path)?;
        let layout = ck.config.layout()?;
        let spec = ck.config.spec();
        let batch = eval_batch(spec.inputs(), cfg.generalize_samples)?;
        let column = cfg.pool()?.install(|| {
            betas
                .par_iter()
                .map(|&beta| -> Result<PhaseCell> {
                    let (net, kl) = generate_network(&layout, &ck.hhw, &spec, beta, seed, GenerationMode::WithEncoder)?;
                    let params = OrderParams::of(&net, None)?;
                    Ok(PhaseCell {
                        step: *step,
                        beta,
                        seed,
                        label: classify(&params, Some(&th))?,
                        params,
                        loss: evaluate(&net, &batch)?,
                        kl,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })?;
        steps.push(*step);
        cells.extend(column);
    }
    let grid = PhaseGrid {
        steps: steps.clone(),
        betas,
        cells,
    };
    let stamp = cfg.stamp();
    let path = cfg.out_dir.join("phases.csv");
    claim_output(&path, cfg.overwrite)?;
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    w.write_record([
        "version",
        "config_hash",
        "step",
        "beta",
        "seed",
        "alpha1",
        "alpha2",
        "loss",
        "kl",
        "label",
        "color",
    ])
    .map_err(|e| csv_error(&path, e))?;
    for c in &grid.cells {
        w.write_record([
            stamp.version.clone(),
            stamp.config_hash.clone(),
            c.step.to_string(),
            c.beta.to_string(),
            c.seed.to_string(),
            c.params.alpha1.to_string(),
            c.params.alpha2.to_string(),
            c.loss.to_string(),
            c.kl.to_string(),
            c.label.name().to_string(),
            c.label.color().to_string(),
        ])
        .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_output(
        &cfg.out_dir.join("phases.svg"),
        phase_svg(&grid, &stamp).as_bytes(),
        cfg.overwrite,
    )?;
    write_json(
        &cfg.out_dir.join("phases.json"),
        &serde_json::json!({ "stamp": stamp, "grid": grid }),
        cfg.overwrite,
    )?;
    Ok(PhaseSummary {
        stamp,
        steps,
        cells: grid.cells.len(),
        first_column_majority: grid.column_majority(0),
    })
}

/// Raster of the phase grid: x is the checkpoint, y is β (largest on top).
pub fn phase_svg(grid: &PhaseGrid, stamp: &Stamp) -> String {
    let cell = 16.0;
    let (w, h) = (grid.steps.len() as f64 * cell, grid.betas.len() as f64 * cell);
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, "<!-- {} -->", stamp.comment());
    for (si, _) in grid.steps.iter().enumerate() {
        for bi in 0..grid.betas.len() {
            let c = grid.cell(si, bi);
            let y = (grid.betas.len() - 1 - bi) as f64 * cell;
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{y}" width="{cell}" height="{cell}" fill="{}"/>"#,
                si as f64 * cell,
                c.label.color()
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Grid axis for dimension `n`: multiples of `max(1, n / div)` up to `2n`.
pub fn generalization_axis(n: usize, div: usize) -> Vec<usize> {
    let step = (n / div).max(1);
    (1..).map(|k| k * step).take_while(|&v| v <= 2 * n).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizeCell {
    pub n0: usize,
    pub n1: usize,
    pub loss: f64,
    pub shape_ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizeSummary {
    pub stamp: Stamp,
    pub step: u64,
    pub encoder_independent: bool,
    pub max_kl: f64,
    pub n0_axis: Vec<usize>,
    pub n1_axis: Vec<usize>,
    pub cells: Vec<GeneralizeCell>,
    pub contour_levels: Vec<f64>,
    pub contours: Vec<Contour>,
    pub training_cell_loss: f64,
    pub loss_p25: f64,
}

/// Decoder-only losses over a grid of target sizes around the training size.
pub fn cmd_generalize(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<GeneralizeSummary> {
    let (step, ck) = latest_checkpoint(cfg, checkpoint)?;
    let layout = ck.config.layout()?;
    let train_spec = ck.config.spec();
    let beta = cfg.beta_min;
    let seed = cfg.seeds[0];
    let betas = cfg.betas()?;
    let max_kl = betas
        .iter()
        .map(|&b| generate_network(&layout, &ck.hhw, &train_spec, b, seed, GenerationMode::WithEncoder).map(|r| r.1))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let encoder_independent = max_kl < cfg.encoder_independence_kl;
    if !encoder_independent {
        eprintln!("warning: checkpoint is not encoder-independent (max KL {max_kl:.3e}); continuing");
    }
    let n0_axis = generalization_axis(train_spec.inputs(), 8);
    let n1_axis = generalization_axis(train_spec.hidden(), 12);
    let pairs: Vec<(usize, usize)> = n0_axis
        .iter()
        .flat_map(|&a| n1_axis.iter().map(move |&b| (a, b)))
        .collect();
    let cells = cfg.pool()?.install(|| {
        pairs
            .par_iter()
            .map(|&(n0, n1)| -> Result<GeneralizeCell> {
                let spec = MlpSpec::l1(n0, n1);
                let (net, _) = generate_network(&layout, &ck.hhw, &spec, beta, seed, GenerationMode::DecoderOnly)?;
                let batch = eval_batch(n0, cfg.generalize_samples)?;
                Ok(GeneralizeCell {
                    n0,
                    n1,
                    loss: evaluate(&net, &batch)?,
                    shape_ok: net.spec() == spec && net.validate().is_ok(),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let z: Vec<Vec<f64>> = n0_axis
        .iter()
        .enumerate()
        .map(|(r, _)| (0..n1_axis.len()).map(|c| cells[r * n1_axis.len() + c].loss).collect())
        .collect();
    let xs: Vec<f64> = n1_axis.iter().map(|&v| v as f64).collect();
    let ys: Vec<f64> = n0_axis.iter().map(|&v| v as f64).collect();
    let contours = cfg
        .contour_levels
        .iter()
        .map(|&l| contour(&xs, &ys, &z, l))
        .collect::<Result<Vec<_>>>()?;
    let training_cell_loss = cells
        .iter()
        .find(|c| c.n0 == train_spec.inputs() && c.n1 == train_spec.hidden())
        .map_or(f64::NAN, |c| c.loss);
    let mut sorted: Vec<f64> = cells.iter().map(|c| c.loss).collect();
    sorted.sort_by(f64::total_cmp);
    let loss_p25 = sorted[(sorted.len() - 1) / 4];
    let stamp = cfg.stamp();
    let path = cfg.out_dir.join("generalize.csv");
    claim_output(&path, cfg.overwrite)?;
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    w.write_record(["version", "config_hash", "n0", "n1", "loss", "shape_ok"])
        .map_err(|e| csv_error(&path, e))?;
    for c in &cells {
        w.write_record([
            stamp.version.clone(),
            stamp.config_hash.clone(),
            c.n0.to_string(),
            c.n1.to_string(),
            c.loss.to_string(),
            c.shape_ok.to_string(),
        ])
        .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let summary = GeneralizeSummary {
        stamp,
        step,
        encoder_independent,
        max_kl,
        n0_axis,
        n1_axis,
        cells,
        contour_levels: cfg.contour_levels.clone(),
        contours,
        training_cell_loss,
        loss_p25,
    };
    write_json(&cfg.out_dir.join("generalize.json"), &summary, cfg.overwrite)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrawSummary {
    pub svg: PathBuf,
    pub sidecar: PathBuf,
    pub drawn_edges: usize,
}

/// Lays out `net`, writes `<stem>.svg` and its `<stem>.svg.json` sidecar under `out_dir`.
pub fn draw_network(cfg: &RunConfig, net: &MlpWeights<f64>, stem: &str) -> Result<DrawSummary> {
    let graph = NeuronGraph::from_network(net)?;
    let layout = run_layout(&graph, &cfg.layout)?;
    let stamp = cfg.stamp();
    let svg = cfg.out_dir.join(format!("{stem}.svg"));
    let sidecar = cfg.out_dir.join(format!("{stem}.svg.json"));
    claim_output(&svg, cfg.overwrite)?;
    render_svg(&layout.planar(), &graph, &svg, &cfg.render, Some(&stamp.comment()))?;
    let side = DrawingSidecar {
        version: stamp.version,
        config_hash: stamp.config_hash,
        layout: cfg.layout.clone(),
        render: cfg.render.clone(),
        restarts: layout.restarts,
        final_energy: *layout.energies.last().unwrap_or(&f64::NAN),
        positions: layout.planar(),
        nodes: graph.nodes.clone(),
    };
    write_json(&sidecar, &side, cfg.overwrite)?;
    Ok(DrawSummary {
        svg,
        sidecar,
        drawn_edges: crate::layout::visible_edges(&graph, &cfg.render).count(),
    })
}

/// Reads a weights JSON file, reporting the byte offset of parse errors.
pub fn read_weights(path: &Path) -> Result<MlpWeights<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let s: SerdeWeights = serde_json::from_str(&text).map_err(|e| parse_error(&text, &e))?;
    MlpWeights::from_serde(&s)
}

pub fn write_weights(path: &Path, net: &MlpWeights<f64>, policy: OverwritePolicy) -> Result<()> {
    write_json(path, &net.to_serde(), policy)
}

pub fn cmd_draw(cfg: &RunConfig, weights: &Path) -> Result<DrawSummary> {
    let net = read_weights(weights)?;
    let stem = weights.file_stem().and_then(|s| s.to_str()).unwrap_or("network");
    draw_network(cfg, &net, stem)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub stamp: Stamp,
    pub baseline_loss: f64,
    pub baseline_params: OrderParams,
    pub baseline_label: AlgorithmLabel,
    pub hypernet_step: Option<u64>,
    pub hypernet_best_loss: Option<f64>,
    pub hypernet_best_beta: Option<f64>,
    pub drawings: Vec<PathBuf>,
}

/// Trains the target network directly and draws it next to the best
/// hypernetwork-generated network of the latest checkpoint.
pub fn cmd_baseline(cfg: &RunConfig) -> Result<BaselineSummary> {
    let run = train_baseline_adam(&cfg.baseline)?;
    let spec = cfg.spec();
    let batch = eval_batch(spec.inputs(), cfg.eval_samples)?;
    let baseline_loss = evaluate(&run.weights, &batch)?;
    let th = thresholds_for(cfg)?;
    let baseline_params = OrderParams::of(&run.weights, None)?;
    let baseline_label = classify(&baseline_params, Some(&th))?;
    write_weights(&cfg.out_dir.join("baseline_weights.json"), &run.weights, cfg.overwrite)?;
    let mut drawings = vec![draw_network(cfg, &run.weights, "baseline")?.svg];
    let mut hyper = None;
    if let Ok((step, ck)) = latest_checkpoint(cfg, None) {
        let layout = ck.config.layout()?;
        let mut best: Option<(f64, f64, MlpWeights<f64>)> = None;
        for beta in cfg.betas()? {
            for &seed in &cfg.seeds {
                let (net, _) = generate_network(&layout, &ck.hhw, &spec, beta, seed, GenerationMode::WithEncoder)?;
                let loss = evaluate(&net, &batch)?;
                if best.as_ref().is_none_or(|b| loss < b.0) {
                    best = Some((loss, beta, net));
                }
            }
        }
        if let Some((loss, beta, net)) = best {
            write_weights(&cfg.out_dir.join("hypernet_weights.json"), &net, cfg.overwrite)?;
            drawings.push(draw_network(cfg, &net, "hypernet")?.svg);
            hyper = Some((step, loss, beta));
        }
    }
    let summary = BaselineSummary {
        stamp: cfg.stamp(),
        baseline_loss,
        baseline_params,
        baseline_label,
        hypernet_step: hyper.map(|h| h.0),
        hypernet_best_loss: hyper.map(|h| h.1),
        hypernet_best_beta: hyper.map(|h| h.2),
        drawings,
    };
    write_json(&cfg.out_dir.join("baseline_summary.json"), &summary, cfg.overwrite)?;
    Ok(summary)
}
