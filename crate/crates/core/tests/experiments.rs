use std::path::PathBuf;

use cellseg_core::analysis::*;
use cellseg_core::data::DatasetConfig;
use cellseg_core::runconfig::{resolve_output, OUTPUT_ROOT_ENV};
use cellseg_core::training::UnrollSchedule;
use cellseg_core::*;

fn tiny_arch() -> ArchConfig {
    ArchConfig { cell_size: 6, hidden_size: 8, ..ArchConfig::default() }
}

fn tiny_run() -> RunConfig {
    let mut run = RunConfig {
        seed: 3,
        output_dir: PathBuf::from("unused"),
        dataset: DatasetConfig::synthetic(16, 8, 2, 1),
        arch: tiny_arch(),
        schedule: UnrollSchedule { target_steps: 4, mini_unroll: 2, ..UnrollSchedule::default() },
        ..RunConfig::default()
    };
    run.train.batch = 2;
    run.train.steps = 3;
    run.resolved()
}

fn tiny_opts() -> ExperimentOptions {
    ExperimentOptions { steps: 6, record_every: 2, snapshot_steps: vec![0, 4], ..ExperimentOptions::default() }
}

fn csv_rows(path: &std::path::Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

#[test]
fn unknown_experiment_lists_valid_names() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_experiment("nope", &ExperimentInputs::default(), &tiny_opts(), dir.path()).unwrap_err();
    let msg = err.to_string();
    for name in EXPERIMENTS {
        assert!(msg.contains(name), "{msg}");
    }
}

#[test]
fn evolution_on_random_weights_emits_configured_rows() {
    let dir = tempfile::tempdir().unwrap();
    let arch = tiny_arch();
    let model = Automaton::new(arch.clone(), init_params::<f32>(&arch, 5).unwrap()).unwrap();
    let (_, eval) = DatasetConfig::synthetic(16, 1, 3, 2).load().unwrap();
    let inputs = ExperimentInputs { model: Some(model), eval, ..ExperimentInputs::default() };
    let rep = run_experiment("evolution", &inputs, &tiny_opts(), dir.path()).unwrap();
    let csv = dir.path().join("evolution_run.csv");
    assert_eq!(csv_rows(&csv).len(), 4, "steps 0, 2, 4, 6");
    for step in [0, 4] {
        assert!(dir.path().join(format!("evolution_run_{step}.png")).exists());
    }
    assert!(rep.files.contains(&csv));
    assert_eq!(rep.summary["records"], 4);
}

#[test]
fn image_change_reports_every_swap() {
    let dir = tempfile::tempdir().unwrap();
    let arch = tiny_arch();
    let model = Automaton::new(arch.clone(), init_params::<f32>(&arch, 5).unwrap()).unwrap();
    let (_, eval) = DatasetConfig::synthetic(16, 1, 2, 2).load().unwrap();
    let inputs = ExperimentInputs { model: Some(model), eval, ..ExperimentInputs::default() };
    let opts = ExperimentOptions { change_period: 3, changes: 4, ..tiny_opts() };
    let rep = run_experiment("image_change", &inputs, &opts, dir.path()).unwrap();
    assert_eq!(rep.summary["changes"], 4);
    assert_eq!(csv_rows(&dir.path().join("image_change_run.csv")).len(), 15);
}

#[test]
fn regime_reads_training_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let metrics = dir.path().join("metrics.csv");
    let mut text = String::from("step,loss,mean_gate,lr\n");
    for s in 1..=400 {
        let g = if s <= 200 { 0.5 } else { 0.2 };
        text.push_str(&format!("{s},0.1,{g},0.001\n"));
    }
    std::fs::write(&metrics, text).unwrap();
    let inputs = ExperimentInputs { metrics: Some(metrics), ..ExperimentInputs::default() };
    let rep = run_experiment("regime", &inputs, &tiny_opts(), dir.path()).unwrap();
    let step = rep.summary["change"]["step"].as_u64().unwrap();
    assert!((196..=204).contains(&step), "{step}");
}

#[test]
fn random_filter_ablation_keeps_frozen_kernels() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = ExperimentInputs { run: Some(tiny_run()), ..ExperimentInputs::default() };
    let rep = run_experiment("ablate_random_filters", &inputs, &tiny_opts(), dir.path()).unwrap();
    let v = &rep.summary["variants"];
    assert_eq!(v[0]["frozen_unchanged"], serde_json::Value::Null);
    assert_eq!(v[1]["frozen_unchanged"], true);
    assert_eq!(v[1]["train_steps"], 3);
}

#[test]
fn state_size_sweep_emits_one_row_per_size() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = ExperimentInputs { run: Some(tiny_run()), ..ExperimentInputs::default() };
    let opts = ExperimentOptions { train_steps: Some(2), ..tiny_opts() };
    run_experiment("sweep_state_size", &inputs, &opts, dir.path()).unwrap();
    let rows = csv_rows(&dir.path().join("sweep_state_size_run.csv"));
    let labels: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    assert_eq!(labels, ["d16", "d32", "d48"]);
}

#[test]
fn highres_compare_trains_three_configurations() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = ExperimentInputs { run: Some(tiny_run()), ..ExperimentInputs::default() };
    let opts = ExperimentOptions { train_steps: Some(2), ..tiny_opts() };
    let rep = run_experiment("highres_compare", &inputs, &opts, dir.path()).unwrap();
    let v = rep.summary["variants"].as_array().unwrap();
    let res: Vec<u64> = v.iter().map(|r| r["resolution"].as_u64().unwrap()).collect();
    assert_eq!(res, [16, 32, 32]);
    assert!(rep.summary["speedup_iii_over_ii"].as_f64().unwrap() > 0.0);
}

#[test]
fn run_config_lists_every_bad_key() {
    let text = r#"{"seed": 1, "bogus": 2, "arch": {"cell_size": 8, "widht": 3}, "train": {"lr": 0.1}}"#;
    let msg = RunConfig::from_json(text).unwrap_err().to_string();
    for key in ["`bogus`", "`arch.widht`", "`output_dir`", "`train.steps`"] {
        assert!(msg.contains(key), "{key} missing from: {msg}");
    }
    let msg = RunConfig::from_json(r#"{"output_dir": "x", "train": {"steps": "ten"}}"#)
        .unwrap_err()
        .to_string();
    assert!(msg.contains("train.steps"), "{msg}");
}

#[test]
fn run_config_round_trips_fully_specified() {
    let cfg = RunConfig::from_json(r#"{"output_dir": "out", "train": {"steps": 5}}"#).unwrap();
    assert_eq!(cfg.train.steps, 5);
    assert_eq!(cfg.train.pool_size, Some(4 * cfg.train.batch));
    assert!(cfg.schedule.loss_onset.is_some());
    let text = cfg.to_json();
    let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(!text.contains("null"), "every default explicit: {text}");
    assert!(doc["arch"]["norm_kind"].is_string());
    assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
}

#[test]
fn run_config_dataset_keys_follow_kind() {
    let ok = r#"{"output_dir": "o", "train": {"steps": 1}, "dataset": {"kind": "pets", "root": "/data"}}"#;
    assert!(matches!(RunConfig::from_json(ok).unwrap().dataset, DatasetConfig::Pets { .. }));
    let bad = r#"{"output_dir": "o", "train": {"steps": 1}, "dataset": {"kind": "pets", "root": "/d", "seed": 1}}"#;
    assert!(RunConfig::from_json(bad).unwrap_err().to_string().contains("dataset.seed"));
}

#[test]
fn output_root_applies_to_relative_paths() {
    // The only test in this binary touching the variable.
    std::env::set_var(OUTPUT_ROOT_ENV, "/tmp/root");
    assert_eq!(resolve_output(&PathBuf::from("a/b")), PathBuf::from("/tmp/root/a/b"));
    assert_eq!(resolve_output(&PathBuf::from("/abs")), PathBuf::from("/abs"));
    std::env::remove_var(OUTPUT_ROOT_ENV);
    assert_eq!(resolve_output(&PathBuf::from("a/b")), PathBuf::from("a/b"));
}
