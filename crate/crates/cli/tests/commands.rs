use std::fs;
use std::path::Path;

use mlpscale::data::Split;
use mlpscale::model::count_forward_flops;
use mlpscale::scaling::read_runs_csv;
use mlpscale_cli::config::SweepSpec;
use mlpscale_cli::dispatch;
use mlpscale_cli::run::load_dataset;
use mlpscale_cli::sweep::{cell_run_id, run_sweep};
use serde_json::Value;

fn run(args: &[&str]) -> i32 {
    dispatch(std::iter::once("mlpscale").chain(args.iter().copied()))
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

const SWEEP: &str = r#"{
    "models": ["B-1/Wi-8", "B-1/Wi-16"],
    "fractions": [0.5, 1.0],
    "epochs": [1, 2],
    "dataset": {"kind": "synth", "n": 200, "test_n": 50, "height": 4, "width": 4},
    "train": {"batch_size": 32, "optimizer": {"kind": "lion", "lr": 0.001}},
    "downstream": {
        "dataset": {"kind": "synth", "n": 100, "test_n": 50, "height": 4, "width": 4, "num_classes": 5, "seed": 11},
        "probe": {"epochs": 2, "batch_size": 32, "optimizer": {"kind": "lion", "lr": 0.001}}
    }
}"#;

#[test]
fn sweep_records_every_cell_once() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SweepSpec::from_json_str(SWEEP).unwrap();
    let first = run_sweep(&spec, dir.path()).unwrap();
    assert_eq!(first.records_written, 8);
    assert_eq!(first.cells_skipped, 0);
    assert!(first.failures.is_empty());

    let runs = read_runs_csv(&first.runs_csv).unwrap();
    assert_eq!(runs.len(), 8);
    let mut ids: Vec<&str> = runs.iter().map(|r| r.run_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), 8, "run ids must be unique");
    for model in &spec.models {
        for &f in &spec.fractions {
            for &t in &spec.epochs {
                let id = cell_run_id(&spec, model, f, t);
                assert!(ids.contains(&id.as_str()), "missing cell {id}");
                assert!(dir.path().join("checkpoints").join(format!("{id}.ckpt")).exists());
            }
        }
    }
    for r in &runs {
        let model = spec
            .models
            .iter()
            .find(|m| m.width == r.width)
            .unwrap()
            .build(4, 4, 3, 10);
        assert_eq!(r.flops_fwd, count_forward_flops(&model));
        assert_eq!(r.compute_flops, r.flops_fwd as u128 * 3 * r.dataset_size as u128 * r.epochs as u128);
        assert!(matches!(r.dataset_size, 100 | 200));
        let up = r.upstream_err.unwrap();
        let probe = r.probe_err.unwrap();
        assert!((0.0..=1.0).contains(&up) && (0.0..=1.0).contains(&probe));
        assert!(r.finetune_err.is_none());
    }

    let csv_before = fs::read(&first.runs_csv).unwrap();
    let second = run_sweep(&spec, dir.path()).unwrap();
    assert_eq!(second.records_written, 0);
    assert_eq!(second.cells_skipped, 8);
    assert_eq!(fs::read(&first.runs_csv).unwrap(), csv_before);

    let echoed = fs::read_to_string(dir.path().join("effective_config.json")).unwrap();
    assert_eq!(SweepSpec::from_json_str(&echoed).unwrap(), spec);
}

#[test]
fn interrupted_sweep_fills_only_missing_cells() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SweepSpec::from_json_str(SWEEP).unwrap();
    let full = run_sweep(&spec, dir.path()).unwrap();
    let text = fs::read_to_string(&full.runs_csv).unwrap();
    // Drop the last three records, as if the sweep died mid-way.
    let kept: Vec<&str> = text.lines().take(1 + 5).collect();
    fs::write(&full.runs_csv, kept.join("\n") + "\n").unwrap();
    let resumed = run_sweep(&spec, dir.path()).unwrap();
    assert_eq!(resumed.cells_skipped, 5);
    assert_eq!(resumed.records_written, 3);
    let mut before: Vec<String> = text.lines().map(String::from).collect();
    let mut after: Vec<String> = fs::read_to_string(&full.runs_csv).unwrap().lines().map(String::from).collect();
    before.sort();
    after.sort();
    assert_eq!(before, after, "resumed cells reproduce the original records");
}

#[test]
fn half_subsample_keeps_five_percent_per_class() {
    let spec: mlpscale_cli::config::DatasetSpec =
        serde_json::from_str(r#"{"kind":"synth","n":1000,"test_n":100,"height":4,"width":4,"seed":1}"#).unwrap();
    let (train, _) = load_dataset(&spec, 0).unwrap();
    assert_eq!(train.split, Split::Train);
    assert_eq!(train.class_counts(), vec![100; 10]);
    let half = train.subsample_proportional(0.5, 3).unwrap();
    assert_eq!(half.class_counts(), vec![50; 10]);
    for c in half.class_counts() {
        assert_eq!(c * 20, train.len());
    }
}

#[test]
fn sweep_then_fit_then_visualize_through_dispatch() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("sweep.json");
    fs::write(&config, SWEEP).unwrap();
    let out = dir.path().join("sweep");
    assert_eq!(run(&["sweep", "--config", path(&config), "--out", path(&out)]), 0);

    let runs = out.join("runs.csv");
    assert_eq!(run(&["fit-scaling", "--runs", path(&runs), "--error", "probe_err"]), 0);
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("scaling_fit.json")).unwrap()).unwrap();
    assert_eq!(report["field"], "probe");
    assert_eq!(report["runs"], 8);
    let fit = &report["power_law"];
    for key in ["a", "b", "e_inf", "rss", "c_min", "c_max"] {
        assert!(fit[key].is_number(), "power law lacks {key}");
    }
    // A degenerate fit of this tiny grid carries no exponent.
    assert_eq!(fit["alpha"].is_null(), fit["degenerate"] == true);
    let svg = fs::read_to_string(out.join("scaling.svg")).unwrap();
    assert!(svg.starts_with("<?xml") || svg.starts_with("<svg"));
    assert!(svg.contains("class=\"fit\""));

    let spec = SweepSpec::from_json_str(SWEEP).unwrap();
    let narrow = cell_run_id(&spec, &spec.models[0], 1.0, 2);
    let ckpt = out.join("checkpoints").join(format!("{narrow}.ckpt"));
    let pgm = dir.path().join("filters.pgm");
    assert_eq!(
        run(&["visualize", "--checkpoint", path(&ckpt), "--grid", "5", "--out", path(&pgm)]),
        0
    );
    let bytes = fs::read(&pgm).unwrap();
    // Width-8 embeddings hold only 8 filters; the remaining tiles stay black.
    let header = b"P5\n20 20\n255\n";
    assert!(bytes.starts_with(header));
    let raster = &bytes[header.len()..];
    assert_eq!(raster.len(), 400);
    assert!(raster[2 * 80..].iter().all(|&p| p == 0));
}

#[test]
fn visualize_full_grid_from_a_training_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    fs::write(
        &config,
        r#"{"model":"B-1/Wi-32","dataset":{"kind":"synth","n":100,"test_n":20,"height":4,"width":4},
            "epochs":1,"batch_size":25}"#,
    )
    .unwrap();
    let out = dir.path().join("run");
    assert_eq!(run(&["train", "--config", path(&config), "--out", path(&out)]), 0);
    for f in ["effective_config.json", "metrics.csv", "checkpoint.ckpt", "summary.json"] {
        assert!(out.join(f).exists(), "train output lacks {f}");
    }
    let pgm = out.join("filters.pgm");
    assert_eq!(run(&["visualize", "--checkpoint", path(&out.join("checkpoint.ckpt")), "--grid", "5"]), 0);
    let bytes = fs::read(&pgm).unwrap();
    // 5 x 5 tiles of 4 x 4 pixels.
    let header = b"P5\n20 20\n255\n";
    assert!(bytes.starts_with(header));
    assert_eq!(bytes.len(), header.len() + 400);
}

/// Metrics without the wall-clock column.
fn metrics_without_timing(dir: &Path) -> Vec<Vec<String>> {
    let mut reader = csv::Reader::from_path(dir.join("metrics.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    let seconds = headers.iter().position(|h| h == "seconds").expect("seconds column");
    reader
        .records()
        .map(|r| {
            r.unwrap()
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != seconds)
                .map(|(_, v)| v.to_string())
                .collect()
        })
        .collect()
}

#[test]
fn effective_config_reproduces_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    fs::write(
        &config,
        r#"{"model":"B-2/Wi-16","dataset":{"kind":"synth","n":120,"test_n":30,"height":4,"width":4},
            "epochs":2,"batch_size":16,"seed":5}"#,
    )
    .unwrap();
    let first = dir.path().join("first");
    assert_eq!(run(&["train", "--config", path(&config), "--out", path(&first)]), 0);
    let second = dir.path().join("second");
    let echoed = first.join("effective_config.json");
    assert_eq!(run(&["train", "--config", path(&echoed), "--out", path(&second)]), 0);
    assert_eq!(
        fs::read(&echoed).unwrap(),
        fs::read(second.join("effective_config.json")).unwrap()
    );
    assert_eq!(metrics_without_timing(&first), metrics_without_timing(&second));
    assert_eq!(metrics_without_timing(&first).len(), 2);
}

#[test]
fn params_command_and_usage_errors() {
    assert_eq!(run(&["params", "B-12/Wi-768"]), 0);
    assert_eq!(run(&["params", "B-12/Wi-x"]), 1);
    assert_ne!(run(&["frobnicate"]), 0);
    assert_ne!(run(&["train", "--bogus"]), 0);
    assert_ne!(run(&[]), 0);
    assert_eq!(run(&["--help"]), 0);
}

#[test]
fn mode_mismatch_and_missing_inputs_fail() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    fs::write(&config, r#"{"model":"B-1/Wi-8","dataset":"synth","mode":"probe"}"#).unwrap();
    assert_eq!(run(&["train", "--config", path(&config)]), 1);
    assert_eq!(run(&["train", "--config", path(&dir.path().join("absent.json"))]), 1);
    assert_eq!(run(&["fit-scaling", "--runs", path(&dir.path().join("absent.csv"))]), 1);
}
