use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use pneumoseg::dataset::{decode_mask, rle_decode, RleMask, Split};
use pneumoseg::postprocess::{pooled_iou, GridSearchResult, PostprocessParams};
use pneumoseg::trainer::{load_checkpoint, read_epoch_log, Predictor};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pneumoseg"));
    c.env_remove("PNEUMOSEG_OUTPUT").env("RUST_LOG", "warn");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// A trained-and-tuned run shared by the read-only tests.
fn trained() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-trained");
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        ok(&dir, &["--output", "out", "prepare", "--synthetic", "16", "--seed", "0", "--resolution", "64"]);
        ok(
            &dir,
            &[
                "--output", "out", "train", "--resolution", "64", "--max-epochs", "6", "--batch-size", "4",
                "--lr-max", "1e-2", "--lr-min", "1e-4",
            ],
        );
        ok(&dir, &["--output", "out", "tune"]);
        dir
    })
}

fn manifest_rows(path: &Path) -> Vec<(String, String)> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap()).map(|x| (x[0].to_string(), x[1].to_string())).collect()
}

#[test]
fn prepare_synthetic_sixteen_splits_thirteen_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["--output", "o", "prepare", "--synthetic", "16", "--seed", "0", "--resolution", "32"]);
    let rows = manifest_rows(&dir.path().join("o/manifest.csv"));
    assert_eq!(rows.len(), 16);
    assert_eq!(rows.iter().filter(|(_, s)| s == "train").count(), 13);
    assert_eq!(rows.iter().filter(|(_, s)| s == "val").count(), 3);
    assert!(String::from_utf8_lossy(&out.stdout).contains("13 train / 3 val"));
    assert!(dir.path().join("o/run.json").is_file());
}

#[test]
fn prepare_on_empty_dir_fails_with_user_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("data/images")).unwrap();
    std::fs::create_dir_all(dir.path().join("data/masks")).unwrap();
    let out = run(dir.path(), &["--output", "o", "prepare"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no samples found"));
}

#[test]
fn output_root_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin()
        .current_dir(dir.path())
        .env("PNEUMOSEG_OUTPUT", "from-env")
        .args(["prepare", "--synthetic", "4", "--resolution", "32"])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(dir.path().join("from-env/manifest.csv").is_file());
}

#[test]
fn config_file_drives_defaults_and_records_run() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.toml"),
        "output_dir = \"cfg-out\"\n[data]\nroot = \"d\"\nsplit_seed = 3\n[synthetic]\nresolution = 32\n",
    )
    .unwrap();
    ok(dir.path(), &["--config", "run.toml", "prepare", "--synthetic", "5"]);
    assert!(dir.path().join("d/images").is_dir());
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("cfg-out/run.json")).unwrap()).unwrap();
    assert_eq!(run["prepare"]["config"]["data"]["split_seed"], 3);
    assert_eq!(run["prepare"]["config"]["synthetic"]["n"], 5);
    assert_eq!(run["prepare"]["config"]["train"]["batch_size"], 8);
}

#[test]
fn bad_config_key_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[train]\nepochz = 3\n").unwrap();
    assert_eq!(run(dir.path(), &["--config", "bad.toml", "prepare"]).status.code(), Some(1));
}

#[test]
fn train_writes_log_curves_and_checkpoints() {
    let dir = trained();
    let records = read_epoch_log(&dir.join("out/epoch_log.jsonl")).unwrap();
    assert_eq!(records.len(), 6);
    assert!(dir.join("out/curves.png").is_file());
    assert!(dir.join("out/checkpoints/best.ckpt").is_file());
    assert!(dir.join("out/checkpoints/last.ckpt").is_file());
}

#[test]
fn early_stop_arithmetic_holds() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--output", "o", "prepare", "--synthetic", "8", "--resolution", "32"]);
    ok(
        dir.path(),
        &["--output", "o", "train", "--resolution", "32", "--max-epochs", "3", "--patience", "1", "--lr-max", "1e-9", "--lr-min", "1e-10"],
    );
    let records = read_epoch_log(&dir.path().join("o/epoch_log.jsonl")).unwrap();
    assert!(records[0].improved);
    // Patience 1: training ends right after the first epoch without improvement.
    let first_stall = records.iter().position(|r| !r.improved);
    match first_stall {
        Some(i) => assert_eq!(records.len(), i + 1),
        None => assert_eq!(records.len(), 3),
    }
}

#[test]
fn resume_continues_epoch_numbering() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--output", "o", "prepare", "--synthetic", "8", "--resolution", "32"]);
    let train = ["--output", "o", "train", "--resolution", "32", "--batch-size", "4", "--patience", "50"];
    ok(dir.path(), &[&train[..], &["--max-epochs", "2"]].concat());
    ok(dir.path(), &[&train[..], &["--max-epochs", "4", "--resume"]].concat());
    let epochs: Vec<usize> = read_epoch_log(&dir.path().join("o/epoch_log.jsonl"))
        .unwrap()
        .iter()
        .map(|r| r.epoch)
        .collect();
    assert_eq!(epochs, vec![1, 2, 3, 4]);
}

#[test]
fn tune_result_is_self_consistent() {
    let dir = trained();
    let result = GridSearchResult::load(&dir.join("out/postprocess.json")).unwrap();
    assert_eq!(result.surface.len(), result.bt_grid.len() * result.rt_grid.len());
    let best_cell = result
        .surface
        .iter()
        .map(|c| c.iou)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(result.best_iou, best_cell);

    // Recompute the IoU at the stored best parameters from scratch.
    let model = load_checkpoint(&dir.join("out/checkpoints/best.ckpt")).unwrap().model;
    let manifest = pneumoseg::dataset::Manifest::read_csv(
        &dir.join("out/manifest.csv"),
        &dir.join("data/images"),
        &dir.join("data/masks"),
    )
    .unwrap();
    let pipe = pneumoseg::augment::build_pipeline(pneumoseg::augment::Mode::Val, 64, None).unwrap();
    let pairs: Vec<_> = manifest
        .split(Split::Val)
        .iter()
        .map(|s| {
            let (img, mask) = s.load().unwrap();
            let (small, _) = pneumoseg::augment::apply_paired(&pipe, &img, &mask, 0).unwrap();
            (model.predict(&[small]).unwrap().remove(0), mask)
        })
        .collect();
    let recomputed = pooled_iou(&pairs, &result.best).unwrap();
    assert!((recomputed - result.best_iou).abs() < 1e-12, "{recomputed} vs {}", result.best_iou);
}

#[test]
fn tune_without_checkpoint_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--output", "o", "prepare", "--synthetic", "4", "--resolution", "32"]);
    let out = run(dir.path(), &["--output", "o", "tune"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("best.ckpt"));
}

#[test]
fn evaluate_writes_metrics_confusion_and_k_overlays() {
    let dir = trained();
    ok(
        dir,
        &[
            "--output", "eval-k", "evaluate", "--split", "all", "--overlays", "5", "--checkpoint",
            "out/checkpoints/best.ckpt", "--params", "out/postprocess.json",
        ],
    );
    let overlays: Vec<_> = std::fs::read_dir(dir.join("eval-k/overlays")).unwrap().collect();
    assert_eq!(overlays.len(), 5);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("eval-k/metrics.json")).unwrap()).unwrap();
    assert_eq!(report["n_images"], 16);
    let c = &report["counts"];
    let total = ["tp", "fp", "fn", "tn"]
        .iter()
        .map(|k| c[k].as_u64().unwrap())
        .sum::<u64>();
    assert_eq!(total, 16 * 64 * 64);
    assert!(dir.join("eval-k/confusion.png").is_file());
}

#[test]
fn evaluate_without_params_falls_back() {
    let dir = trained();
    let out = ok(
        dir,
        &["--output", "eval-fb", "evaluate", "--checkpoint", "out/checkpoints/best.ckpt", "--params", "missing.json"],
    );
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("BT 0.5, RT 0"), "{stderr}");
}

fn predict_dir(dir: &Path, name: &str, files: &[&str]) -> PathBuf {
    let input = dir.join(name);
    std::fs::create_dir_all(&input).unwrap();
    for f in files {
        std::fs::copy(dir.join("data/images").join(f), input.join(f)).unwrap();
    }
    input
}

#[test]
fn predict_masks_match_their_rle() {
    let dir = trained();
    let input = predict_dir(dir, "in3", &["synth_00001.png", "synth_00004.png", "synth_00009.png"]);
    ok(
        dir,
        &["--output", "out", "predict", input.to_str().unwrap(), "--out", "pred3", "--rle"],
    );
    let mut stems: Vec<String> = std::fs::read_dir(dir.join("pred3/masks"))
        .unwrap()
        .map(|e| e.unwrap().path().file_stem().unwrap().to_string_lossy().into_owned())
        .collect();
    stems.sort();
    assert_eq!(stems, vec!["synth_00001", "synth_00004", "synth_00009"]);

    let mut reader = csv::Reader::from_path(dir.join("pred3/rle.csv")).unwrap();
    let mut rows = 0;
    for row in reader.records() {
        let row = row.unwrap();
        let (w, h): (usize, usize) = (row[1].parse().unwrap(), row[2].parse().unwrap());
        let decoded = rle_decode(&RleMask::parse(&row[3], w, h).unwrap()).unwrap();
        let png = image::open(dir.join("pred3/masks").join(format!("{}.png", &row[0]))).unwrap();
        let gray = png.to_luma8();
        assert!(gray.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
        assert_eq!(decode_mask(&png).unwrap(), decoded);
        rows += 1;
    }
    assert_eq!(rows, 3);
}

#[test]
fn all_background_prediction_gives_empty_rle() {
    let dir = trained();
    let input = predict_dir(dir, "in-bg", &["synth_00002.png"]);
    let mut result = GridSearchResult::load(&dir.join("out/postprocess.json")).unwrap();
    result.best = PostprocessParams {
        binarization_threshold: 1.0,
        ..result.best
    };
    result.save(&dir.join("never.json")).unwrap();
    ok(
        dir,
        &["--output", "out", "predict", input.to_str().unwrap(), "--out", "pred-bg", "--rle", "--params", "never.json"],
    );
    let text = std::fs::read_to_string(dir.join("pred-bg/rle.csv")).unwrap();
    assert_eq!(text.lines().nth(1).unwrap(), "synth_00002,64,64,");
    let gray = image::open(dir.join("pred-bg/masks/synth_00002.png")).unwrap().to_luma8();
    assert!(gray.pixels().all(|p| p.0[0] == 0));
}

#[test]
fn unreadable_input_is_reported_and_others_still_written() {
    let dir = trained();
    let input = predict_dir(dir, "in-bad", &["synth_00003.png"]);
    std::fs::write(input.join("broken.png"), b"not an image").unwrap();
    let out = run(dir, &["--output", "out", "predict", input.to_str().unwrap(), "--out", "pred-bad"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken.png"));
    assert!(dir.join("pred-bad/masks/synth_00003.png").is_file());
    assert!(!dir.join("pred-bad/masks/broken.png").exists());
}
