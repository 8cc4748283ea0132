use std::fs;
use std::path::Path;

use hypergen::constructors::{build_pudding, ConstructorConfig};
use hypergen::experiments::{
    cmd_baseline, cmd_calibrate, cmd_draw, cmd_generalize, cmd_phases, cmd_sweep, cmd_train, thresholds_for,
    write_weights, OverwritePolicy, ResultsTable, RunConfig, Scale, SCHEMA_VERSION,
};
use hypergen::hypernet::GenerationMode;
use hypergen::network::{MlpSpec, MlpWeights};
use hypergen::trainer::VERSION;
use hypergen::Error;

const TINY: &str = r#"{
    "train": {"inputs": 3, "hidden": 6, "steps": 40, "checkpoint_every": 20, "batch_size": 64},
    "beta_steps": 4,
    "seeds": [0, 1, 2],
    "eval_samples": 500,
    "generalize_samples": 200,
    "baseline": {"steps": 200},
    "calibration": {"samples_per_class": 10, "fit_samples": 500},
    "heldout_per_class": 10,
    "layout": {"iterations": 300}
}"#;

fn tiny(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::from_json(TINY, Scale::Desk).unwrap();
    cfg.out_dir = dir.to_path_buf();
    cfg
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(Result::unwrap)
        .collect()
}

#[test]
fn train_resume_and_refuse() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    let first = cmd_train(&cfg).unwrap();
    assert_eq!(first.resumed_from, None);
    assert_eq!(first.checkpoints, vec![0, 20, 40]);
    assert_eq!(first.final_step, 40);
    assert!(first.final_loss_beta_min.is_finite());

    cfg.train.steps = 60;
    let second = cmd_train(&cfg).unwrap();
    assert_eq!(second.resumed_from, Some(40));
    assert_eq!(second.checkpoints, vec![60]);
    assert_eq!(csv_rows(&dir.path().join("train_log.csv")).len(), 60);

    let again = cmd_train(&cfg).unwrap();
    assert_eq!(again.checkpoints, Vec::<u64>::new());
    assert_eq!(again.final_step, 60);

    cfg.train.seed = 99;
    assert!(matches!(cmd_train(&cfg), Err(Error::Config(_))));
}

#[test]
fn resumed_training_matches_a_single_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let whole = tiny(a.path());
    cmd_train(&whole).unwrap();
    let mut split = tiny(b.path());
    split.train.steps = 20;
    cmd_train(&split).unwrap();
    split.train.steps = 40;
    cmd_train(&split).unwrap();
    let read = |d: &Path| fs::read(d.join("checkpoints/step_00000040/hhw.f64le")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    assert_eq!(
        fs::read_to_string(a.path().join("train_log.csv")).unwrap(),
        fs::read_to_string(b.path().join("train_log.csv")).unwrap()
    );
}

#[test]
fn sweep_and_ablation_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    cmd_train(&cfg).unwrap();
    let modes = [GenerationMode::WithEncoder, GenerationMode::DecoderOnly];
    let sweep = cmd_sweep(&cfg, None, &modes, "sweep").unwrap();
    assert_eq!(sweep.step, 40);
    assert_eq!(sweep.rows, 2 * 4 * 3);
    let rows = ResultsTable::read(&sweep.table).unwrap();
    assert_eq!(rows.len(), 24);
    assert!(rows
        .iter()
        .all(|r| r.schema == SCHEMA_VERSION && r.version == VERSION && r.config_hash == cfg.hash()));
    assert!(rows
        .iter()
        .all(|r| (r.n0, r.n1) == (3, 6) && r.loss.is_finite() && r.kl >= 0.0));
    let labels = ["convexity", "pudding", "double_sided"];
    assert!(
        rows.iter().all(|r| labels.contains(&r.label.as_str())),
        "{:?}",
        rows[0].label
    );
    assert!(dir.path().join("sweep_scatter.json").exists());

    let ablate = cmd_sweep(&cfg, None, &[GenerationMode::DecoderOnly], "ablate").unwrap();
    let rows = ResultsTable::read(&ablate.table).unwrap();
    assert_eq!(rows.len(), 12);
    assert!(rows.iter().all(|r| r.mode == GenerationMode::DecoderOnly.name()));

    let early = dir.path().join("checkpoints/step_00000020");
    assert_eq!(cmd_sweep(&cfg, Some(&early), &modes, "early").unwrap().step, 20);
}

#[test]
fn overwrite_policies() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cmd_train(&cfg).unwrap();
    let modes = [GenerationMode::DecoderOnly];
    let first = fs::read(cmd_sweep(&cfg, None, &modes, "s").unwrap().table).unwrap();
    cmd_sweep(&cfg, None, &modes, "s").unwrap();
    assert_eq!(fs::read(dir.path().join("s.1.csv")).unwrap(), first);
    assert_eq!(fs::read(dir.path().join("s.csv")).unwrap(), first);
    cfg.overwrite = OverwritePolicy::Refuse;
    assert!(matches!(cmd_sweep(&cfg, None, &modes, "s"), Err(Error::Io { .. })));
    assert!(!dir.path().join("s.2.csv").exists());
}

#[test]
fn phase_grid_artifacts_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    assert!(matches!(cmd_phases(&cfg), Err(Error::Io { .. } | Error::Config(_))));
    cmd_train(&cfg).unwrap();
    let summary = cmd_phases(&cfg).unwrap();
    assert_eq!(summary.steps, vec![0, 20, 40]);
    assert_eq!(summary.cells, 12);
    let rows = csv_rows(&dir.path().join("phases.csv"));
    assert_eq!(rows.len(), 12);
    let svg = fs::read_to_string(dir.path().join("phases.svg")).unwrap();
    assert_eq!(svg.matches("<rect").count(), rows.len());
    for r in &rows {
        let color = &r[10];
        assert!(["#ff0000", "#00ff00", "#0000ff"].contains(&color));
    }
    assert!(svg.contains(&cfg.hash()));
}

#[test]
fn generalization_grid_is_complete() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    cmd_train(&cfg).unwrap();
    let s = cmd_generalize(&cfg, None).unwrap();
    assert_eq!(s.n0_axis, (1..=6).collect::<Vec<_>>());
    assert_eq!(s.n1_axis, (1..=12).collect::<Vec<_>>());
    assert_eq!(s.cells.len(), 72);
    assert!(s.cells.iter().all(|c| c.shape_ok && c.loss.is_finite()));
    assert_eq!(s.contour_levels, vec![0.07, 0.15]);
    assert_eq!(s.contours.len(), 2);
    assert!(s.training_cell_loss.is_finite());
    let rows = csv_rows(&dir.path().join("generalize.csv"));
    assert_eq!(rows.len(), 72);
    assert!(rows.iter().all(|r| &r[0] == VERSION && r[1] == cfg.hash()));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("generalize.json")).unwrap()).unwrap();
    assert_eq!(json["contour_levels"], serde_json::json!([0.07, 0.15]));
}

#[test]
fn draw_is_byte_identical_and_skips_dead_units() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let pudding = build_pudding::<f64>(&ConstructorConfig::new(16, 48)).unwrap();
    let weights = dir.path().join("pudding.json");
    write_weights(&weights, &pudding, OverwritePolicy::Refuse).unwrap();
    let first = cmd_draw(&cfg, &weights).unwrap();
    let svg = fs::read_to_string(&first.svg).unwrap();
    // 16 per-input edges plus 16 into the pass-through unit
    assert_eq!(first.drawn_edges, 32);
    assert_eq!(svg.matches("<line").count(), 32);
    let second = cmd_draw(&cfg, &weights).unwrap();
    assert_eq!(second.svg, first.svg);
    assert_eq!(
        fs::read(dir.path().join("pudding.1.svg")).unwrap(),
        fs::read(&second.svg).unwrap()
    );

    let zero = dir.path().join("zero.json");
    write_weights(&zero, &MlpWeights::zeros(&MlpSpec::l1(3, 5)), OverwritePolicy::Refuse).unwrap();
    let drawn = cmd_draw(&cfg, &zero).unwrap();
    assert_eq!(drawn.drawn_edges, 0);
    assert_eq!(fs::read_to_string(drawn.svg).unwrap().matches("<line").count(), 0);
}

#[test]
fn malformed_weights_report_offset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let path = dir.path().join("bad.json");
    fs::write(&path, "{\"layers\": [\n  {\"weight\": nope}\n]}").unwrap();
    match cmd_draw(&cfg, &path) {
        Err(Error::Parse { line, offset, .. }) => {
            assert_eq!(line, 2);
            assert!(offset > 12);
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        cmd_draw(&cfg, &dir.path().join("missing.json")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn calibration_artifact_is_reused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let art = cmd_calibrate(&cfg).unwrap();
    assert_eq!(art.calibration_accuracy, 1.0);
    assert_eq!(thresholds_for(&cfg).unwrap(), art.thresholds);
    let text = fs::read_to_string(dir.path().join("thresholds.json")).unwrap();
    assert!(text.contains(&cfg.hash()));
}

#[test]
fn baseline_compares_against_latest_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let alone = cmd_baseline(&cfg).unwrap();
    assert!(alone.hypernet_best_loss.is_none());
    assert_eq!(alone.drawings.len(), 1);
    cmd_train(&cfg).unwrap();
    let paired = cmd_baseline(&cfg).unwrap();
    assert_eq!(paired.hypernet_step, Some(40));
    assert!(paired.hypernet_best_loss.unwrap().is_finite());
    assert_eq!(paired.baseline_loss, alone.baseline_loss);
    assert_eq!(paired.drawings.len(), 2);
    for f in [
        "baseline_weights.json",
        "baseline.svg",
        "baseline.svg.json",
        "hypernet.svg",
        "baseline_summary.json",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn config_file_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    fs::write(&path, "{\"beta_min\": 2.0, \"beta_max\": 1.0}").unwrap();
    assert!(matches!(RunConfig::load(&path, Scale::Desk), Err(Error::Config(_))));
    fs::write(&path, "[1, 2]").unwrap();
    assert!(matches!(RunConfig::load(&path, Scale::Desk), Err(Error::Config(_))));
    fs::write(&path, "{\"seeds\": [1 2]}").unwrap();
    assert!(matches!(RunConfig::load(&path, Scale::Desk), Err(Error::Parse { .. })));
}
