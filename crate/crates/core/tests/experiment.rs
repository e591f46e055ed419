use std::fs;

use skillmix::experiment::{compare, parse_config, run_experiment, sweep, ExperimentConfig, RunRecord, RunStatus};
use skillmix::model::ModelKind;
use skillmix::report::{emit_plot_data, read_long_csv, CURVE_HEADER, EVAL_METRICS, HISTORY_METRICS, SWEEP_HEADER};

fn small(root: &std::path::Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.seed = 7;
    c.world.num_tasks = 6;
    c.world.num_true_skills = 3;
    c.world.input_dim = 4;
    c.world.examples_per_task = 24;
    c.world.dev_per_task = 8;
    c.world.eval_per_task = 8;
    c.world.num_heldout = 2;
    c.model.num_skills = 3;
    c.model.hidden_dim = 4;
    c.train.steps = Some(40);
    c.train.eval_every = 10;
    c.adapt.k_shot = 8;
    c.adapt.steps = 12;
    c.adapt.z_only_steps = 4;
    c.adapt.resamples = 2;
    c.output_dir = root.to_path_buf();
    c
}

#[test]
fn run_directory_has_required_files() {
    let tmp = tempfile::tempdir().unwrap();
    let rec = run_experiment(&small(tmp.path())).unwrap();
    assert!(rec.failure.is_none());
    for f in [
        "config.json",
        "history.csv",
        "evals.csv",
        "allocation_layer_0.json",
        "allocation_layer_0.csv",
        "allocation_layer_1.json",
        "summary.json",
        "timing.json",
        "skills.bin",
        "skills.json",
        "hierarchy.json",
        "hierarchy.txt",
    ] {
        assert!(rec.dir.join(f).is_file(), "missing {f}");
    }
    assert_eq!(rec.history.len(), 40);
    assert_eq!(rec.summary.layers.len(), 2);
    assert!(rec.summary.layers[0].recovery.is_some());
    assert_eq!(rec.summary.few_shot.len(), 2);
    assert!(rec.summary.few_shot.iter().all(|f| f.post_loss.len() == 2));
    assert!(rec.summary.steps_to_threshold.is_none() || rec.summary.threshold.is_some());
}

#[test]
fn rerun_from_persisted_config_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = run_experiment(&small(a.path())).unwrap();
    let mut again = parse_config(&first.dir.join("config.json")).unwrap();
    again.output_dir = b.path().to_path_buf();
    let second = run_experiment(&again).unwrap();
    assert_eq!(first.dir.file_name(), second.dir.file_name());
    for f in ["summary.json", "history.csv", "skills.bin", "allocation_layer_0.json"] {
        assert_eq!(
            fs::read(first.dir.join(f)).unwrap(),
            fs::read(second.dir.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn loaded_record_matches_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let rec = run_experiment(&small(tmp.path())).unwrap();
    let back = RunRecord::load(&rec.dir).unwrap();
    assert_eq!(back.config, rec.config);
    assert_eq!(back.summary, rec.summary);
    assert_eq!(back.history, rec.history);
    assert_eq!(back.evals, rec.evals);
}

#[test]
fn compare_runs_every_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let out = compare(&small(tmp.path()), &ModelKind::ALL).unwrap();
    assert_eq!(out.records.len(), ModelKind::ALL.len());
    for rec in &out.records {
        assert!(rec.failure.is_none(), "{:?}", rec.failure);
        assert_eq!(rec.summary.status, RunStatus::Ok);
        assert!(rec.summary.mean_few_shot_loss.unwrap().is_finite());
    }
    let hyper = out.records.iter().find(|r| r.summary.model_kind == ModelKind::Hypernet).unwrap();
    assert!(hyper.summary.layers.is_empty());
    let expert = out.records.iter().find(|r| r.summary.model_kind == ModelKind::Expert).unwrap();
    assert_eq!(expert.summary.layers[0].recovery.as_ref().unwrap().cell_accuracy, 1.0);
    let table = fs::read_to_string(&out.table).unwrap();
    assert_eq!(table.lines().count(), 1 + ModelKind::ALL.len());
}

#[test]
fn sweep_covers_the_grid_and_plots_parse() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(tmp.path());
    cfg.sweep.parallelism = 2;
    let out = sweep(&cfg, Some(&[2, 4])).unwrap();
    let sizes: Vec<usize> = out.records.iter().map(|r| r.summary.num_skills).collect();
    assert_eq!(sizes, vec![2, 4]);
    let rows = read_long_csv(&SWEEP_HEADER, &fs::read_to_string(&out.table).unwrap()).unwrap();
    assert!(rows.iter().any(|r| r.metric == "usage" && r.key == 4));

    let plots = emit_plot_data(&out.records[..1], &tmp.path().join("plots")).unwrap();
    let curves = read_long_csv(&CURVE_HEADER, &fs::read_to_string(&plots.curves).unwrap()).unwrap();
    assert_eq!(curves.len(), out.records[0].history.len() * HISTORY_METRICS.len());
    let evals = read_long_csv(&CURVE_HEADER, &fs::read_to_string(&plots.eval_curves).unwrap()).unwrap();
    assert_eq!(evals.len(), out.records[0].evals.len() * EVAL_METRICS.len());
}

#[test]
fn run_failure_leaves_a_marker() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(tmp.path());
    cfg.train.lr_phi = 1e300;
    cfg.train.lr_z = 1e300;
    let rec = run_experiment(&cfg).unwrap();
    let failure = rec.failure.expect("training diverges");
    assert_eq!(failure.stage, "train");
    assert_eq!(rec.summary.status, RunStatus::Failed);
    let marker: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(rec.dir.join("failure.json")).unwrap()).unwrap();
    assert_eq!(marker["status"], "failed");
    assert!(rec.dir.join("summary.json").is_file());
    assert!(rec.dir.join("config.json").is_file());
}
