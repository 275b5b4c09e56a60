use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mosaic_cli::commands::GRID_IMAGES;
use mosaic_cli::ppm::{read_ppm, split_grid, SampleGrid};
use mosaic_core::dataset::{is_consistent, read_dataset, ImageSample};
use tempfile::TempDir;

fn mosaic(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mosaic"))
        .args(args)
        .current_dir(dir)
        .env("MOSAIC_OUT", dir.join("out"))
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.json");
    fs::write(
        &path,
        r#"{
            "dataset": {"n": 128, "seed": 3},
            "diffusion": {"T": 20, "beta_end": 0.3},
            "model": {"kind": "cnn"},
            "train": {"epochs": 3, "checkpoint_every": 2},
            "eval": {"samples_per_run": 50, "runs": 2, "seed": 1}
        }"#,
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn help_lists_config_keys() {
    let dir = TempDir::new().unwrap();
    let out = mosaic(dir.path(), &["--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    for key in [
        "dataset.n = 2048",
        "train.max_lr = 0.001",
        "eval.samples_per_run = 10000",
        "MOSAIC_OUT",
    ] {
        assert!(text.contains(key), "{key}");
    }
}

#[test]
fn gen_data_writes_default_dataset_deterministically() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&mosaic(dir.path(), &["gen-data"])), 0);
    let data = dir.path().join("out/dataset.mosd");
    let first = fs::read(&data).unwrap();
    assert_eq!(first.len(), 16 + 2048 * 48 * 4);
    assert_eq!(code(&mosaic(dir.path(), &["gen-data"])), 0);
    assert_eq!(fs::read(&data).unwrap(), first);

    let images = read_dataset(&data).unwrap();
    let grid = SampleGrid::auto(images[..GRID_IMAGES].to_vec());
    let raster = read_ppm(dir.path().join("out/dataset_preview.ppm")).unwrap();
    let decoded: Vec<ImageSample> = split_grid(&raster, &grid).unwrap();
    assert!(decoded.iter().all(is_consistent));
    assert_eq!(&decoded[..], &images[..GRID_IMAGES]);

    let resolved = fs::read_to_string(dir.path().join("out/config.resolved.json")).unwrap();
    assert!(resolved.contains("\"epochs\": 5000"));
}

#[test]
fn train_then_eval() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    assert_eq!(code(&mosaic(dir.path(), &["-c", &cfg, "gen-data"])), 0);
    let out = mosaic(dir.path(), &["-c", &cfg, "train"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("out/cnn");
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 3 * 2);
    for f in [
        "final.mosc",
        "ema.mosc",
        "checkpoint_e00002.mosc",
        "config.resolved.json",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let ckpt = run.join("final.mosc");
    let ckpt = ckpt.to_str().unwrap();
    let out = mosaic(
        dir.path(),
        &["-c", &cfg, "eval", "--checkpoint", ckpt, "--compare", ckpt],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(dir.path().join("out/eval/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    assert!(summary.lines().last().unwrap().starts_with("gap,cnn-cnn,0,"));
    assert!(dir.path().join("out/eval/cnn_final.ppm").exists());

    let out = mosaic(
        dir.path(),
        &["-c", &cfg, "eval", "--checkpoint", ckpt, "--min-consistency", "1.5"],
    );
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("consistency"));
}

#[test]
fn train_without_dataset_exits_two() {
    let dir = TempDir::new().unwrap();
    let out = mosaic(dir.path(), &["train", "--kind", "cnn_top1_attn"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen-data"));
}

#[test]
fn missing_inputs_and_bad_usage_exit_two() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&mosaic(dir.path(), &["eval", "--checkpoint", "missing.mosc"])), 2);
    assert_eq!(code(&mosaic(dir.path(), &["train", "--kind", "mlp"])), 2);
    assert_eq!(code(&mosaic(dir.path(), &["frobnicate"])), 2);
    fs::write(dir.path().join("typo.json"), r#"{"train": {"epoch": 3}}"#).unwrap();
    let out = mosaic(dir.path(), &["-c", "typo.json", "baseline"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));
}

#[test]
fn baseline_matches_enumeration() {
    let dir = TempDir::new().unwrap();
    let out = mosaic(dir.path(), &["baseline", "--runs", "20"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(dir.path().join("out/baseline_summary.csv")).unwrap();
    assert!(summary.contains("exact_consistent,48\nexact_total,1296\n"));
    let per_run = fs::read_to_string(dir.path().join("out/baseline.csv")).unwrap();
    assert_eq!(per_run.lines().count(), 21);
}

#[test]
fn grad_check_passes() {
    let dir = TempDir::new().unwrap();
    let out = mosaic(
        dir.path(),
        &[
            "grad-check",
            "--op-instances",
            "5",
            "--identity-instances",
            "100",
            "--distributions",
            "3",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let csv = fs::read_to_string(dir.path().join("out/verification.csv")).unwrap();
    assert!(csv.starts_with("check,instances,max_rel_err,pass\n"));
    assert!(csv.contains("cancellation_residual,100,"));
}

#[test]
fn analytic_sampling_writes_reports() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    assert_eq!(
        code(&mosaic(dir.path(), &["-c", &cfg, "analytic-sample", "--mode", "top1"])),
        2
    );
    assert_eq!(code(&mosaic(dir.path(), &["-c", &cfg, "gen-data"])), 0);
    let out = mosaic(dir.path(), &["-c", &cfg, "analytic-sample", "--mode", "local"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("out/analytic_local.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(dir.path().join("out/analytic_local.ppm").exists());
}
