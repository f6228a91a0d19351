//! End-to-end tests of the binary: each test drives the real executable
//! with a scratch directory and inspects its artifacts, exit codes, and
//! output. Training tests use a small-scene config so they stay fast.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicU64, Ordering};

static DIR_COUNTER: AtomicU64 = AtomicU64::new(0);

fn tmpdir(tag: &str) -> PathBuf {
    let n = DIR_COUNTER.fetch_add(1, Ordering::Relaxed);
    let dir =
        std::env::temp_dir().join(format!("ellipsedet-cli-{tag}-{}-{n}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ellipsedet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "command failed ({:?}):\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Small scenes and a narrow net so gen+train tests run in seconds.
const SMALL_CONFIG: &str = r#"
[dataset]
count = 6
seed = 11

[dataset.ranges]
image_w = 64
image_h = 48
thorax_a = [13.0, 16.0]
center_frac = [0.45, 0.55]
min_center_separation = 6.0
margin = 2.0
noise = [0.01, 0.03]
shadow_count_max = 1

[train]
epochs = 2
batch_size = 3
learning_rate = 0.001
eval_every = 0

[train.net]
stem_channels = [2, 2, 4, 4]
stem_dilations = [1, 1, 2, 4]
head_channels = 4
"#;

fn write_small_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, SMALL_CONFIG).unwrap();
    path
}

fn gen_small_dataset(dir: &Path, config: &Path) -> PathBuf {
    let data = dir.join("data");
    let out = run(&["--config", config.to_str().unwrap(), "gen", "--out", data.to_str().unwrap()]);
    assert_success(&out);
    data
}

#[test]
fn gen_is_byte_identical_across_runs() {
    let dir = tmpdir("gen");
    let config = write_small_config(&dir);
    let d1 = gen_small_dataset(&dir.join("a"), &config);
    let d2 = gen_small_dataset(&dir.join("b"), &config);
    for split in ["train", "test"] {
        for entry in fs::read_dir(d1.join(split)).unwrap() {
            let name = entry.unwrap().file_name();
            let b1 = fs::read(d1.join(split).join(&name)).unwrap();
            let b2 = fs::read(d2.join(split).join(&name)).unwrap();
            assert_eq!(b1, b2, "{split}/{name:?} differs");
        }
    }
    let manifest = fs::read_to_string(d1.join("manifest.json")).unwrap();
    assert!(manifest.contains("config_hash"));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn train_writes_run_artifacts_and_is_reproducible() {
    let dir = tmpdir("train");
    let config = write_small_config(&dir);
    let data = gen_small_dataset(&dir, &config);

    let train_once = |run_dir: &Path| {
        let out = run(&[
            "--config",
            config.to_str().unwrap(),
            "train",
            "--dataset",
            data.to_str().unwrap(),
            "--run",
            run_dir.to_str().unwrap(),
        ]);
        assert_success(&out);
    };
    let r1 = dir.join("run1");
    let r2 = dir.join("run2");
    train_once(&r1);
    train_once(&r2);

    for artifact in
        ["config.toml", "run.log", "checkpoints/latest.json", "checkpoints/final.json", "reports/history.csv"]
    {
        assert!(r1.join(artifact).exists(), "{artifact} missing");
    }
    // Same seed, same data: bit-identical checkpoints.
    let c1 = fs::read(r1.join("checkpoints/final.json")).unwrap();
    let c2 = fs::read(r2.join("checkpoints/final.json")).unwrap();
    assert_eq!(c1, c2);

    let history = fs::read_to_string(r1.join("reports/history.csv")).unwrap();
    let mut lines = history.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("epoch,total,heatmap,size,offset"));
    assert!(header.ends_with("dice_thorax,dice_heart,dice_all,p_avg,mean_axis_error_deg"));
    assert_eq!(lines.clone().count(), 2);
    // eval_every 0: only the last epoch carries validation columns.
    let rows: Vec<&str> = lines.collect();
    assert!(rows[0].ends_with(",,,,,"));
    assert!(!rows[1].ends_with(",,,,,"));

    let resolved = fs::read_to_string(r1.join("config.toml")).unwrap();
    assert!(resolved.contains("epochs = 2"));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn train_flag_overrides_beat_the_config_file() {
    let dir = tmpdir("override");
    let config = write_small_config(&dir);
    let data = gen_small_dataset(&dir, &config);
    let run_dir = dir.join("run");
    let out = run(&[
        "--config",
        config.to_str().unwrap(),
        "train",
        "--dataset",
        data.to_str().unwrap(),
        "--run",
        run_dir.to_str().unwrap(),
        "--epochs",
        "1",
        "--lambda-iou",
        "0",
        "--only-iou",
    ]);
    assert_success(&out);
    let resolved = fs::read_to_string(run_dir.join("config.toml")).unwrap();
    assert!(resolved.contains("epochs = 1"));
    assert!(resolved.contains("lambda_iou = 0.0"));
    assert!(resolved.contains("lambda_e = 0.0"));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn eval_oracle_round_trip_scores_near_one() {
    let dir = tmpdir("oracle");
    let config = write_small_config(&dir);
    let data = gen_small_dataset(&dir, &config);
    let run_dir = dir.join("run");
    let out = run(&[
        "--config",
        config.to_str().unwrap(),
        "eval",
        "--split",
        data.join("test").to_str().unwrap(),
        "--oracle",
        "--run",
        run_dir.to_str().unwrap(),
    ]);
    assert_success(&out);
    let text = stdout(&out);
    assert!(text.contains("Dice_T  Dice_C  Dice_all  P_avg"), "missing header:\n{text}");

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("reports/eval.json")).unwrap())
            .unwrap();
    // Encode/decode of the ground truth is the pipeline-integrity canary.
    assert!(report["aggregate_dice_all"].as_f64().unwrap() >= 0.999);
    assert!(report["aggregate_p_avg"].as_f64().unwrap() >= 0.999);
    assert_eq!(report["misses"].as_u64().unwrap(), 0);

    // Aggregate equals the mean of per-scene values.
    let rows = report["per_scene"].as_array().unwrap();
    let mean: f64 =
        rows.iter().map(|r| r["dice_all"].as_f64().unwrap()).sum::<f64>() / rows.len() as f64;
    assert!((mean - report["aggregate_dice_all"].as_f64().unwrap()).abs() < 1e-9);
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn eval_runs_on_a_trained_checkpoint() {
    let dir = tmpdir("evalckpt");
    let config = write_small_config(&dir);
    let data = gen_small_dataset(&dir, &config);
    let run_dir = dir.join("run");
    let out = run(&[
        "--config",
        config.to_str().unwrap(),
        "train",
        "--dataset",
        data.to_str().unwrap(),
        "--run",
        run_dir.to_str().unwrap(),
        "--epochs",
        "1",
    ]);
    assert_success(&out);
    let out = run(&[
        "--config",
        config.to_str().unwrap(),
        "eval",
        "--split",
        data.join("test").to_str().unwrap(),
        "--checkpoint",
        run_dir.join("checkpoints/final.json").to_str().unwrap(),
        "--run",
        run_dir.to_str().unwrap(),
    ]);
    assert_success(&out);
    assert!(run_dir.join("reports/eval.json").exists());
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn fit_from_target_init_converges_at_step_zero() {
    let out = run(&["fit", "--target", "0,0,8,5,0.4", "--init", "0,0,8,5,0.4"]);
    assert_success(&out);
    let text = stdout(&out);
    assert!(text.contains("steps_run 0"), "{text}");
    assert!(text.contains("final_dice 1.000000"), "{text}");
}

#[test]
fn fit_random_init_reaches_high_dice() {
    let dir = tmpdir("fit");
    let json_path = dir.join("fit.json");
    let out = run(&[
        "fit",
        "--target",
        "20,15,10,6,0.5",
        "--init-seed",
        "3",
        "--json",
        json_path.to_str().unwrap(),
    ]);
    assert_success(&out);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&json_path).unwrap()).unwrap();
    assert!(report["final_dice"].as_f64().unwrap() >= 0.99);
    assert!(!report["trace"].as_array().unwrap().is_empty());
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn iou_of_identical_ellipses_is_one_with_zero_loss() {
    let out = run(&["iou", "--e1", "0,0,2,1,0.3", "--e2", "0,0,2,1,0.3"]);
    assert_success(&out);
    let text = stdout(&out);
    assert!(text.contains("rect_iou     1.000000"), "{text}");
    assert!(text.contains("diou_loss    0.000000"), "{text}");
}

#[test]
fn iou_concentric_perpendicular_case_reports_expected_values() {
    // Tight rects 4x2 and 2x4 share a 2x2 core: IoU = 4/12.
    let out = run(&["iou", "--e1", "0,0,2,1,0", "--e2", "0,0,2,1,1.5707963267948966"]);
    assert_success(&out);
    let text = stdout(&out);
    assert!(text.contains("rect_iou     0.333333"), "{text}");
    let rect = 1.0 / 3.0;
    let ellipse_line = text.lines().find(|l| l.starts_with("ellipse_iou")).unwrap();
    let ellipse: f64 = ellipse_line.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(ellipse >= rect, "ellipse IoU {ellipse} below rect IoU");
}

#[test]
fn iou_rejects_invalid_ellipse_with_invariant_message() {
    let out = run(&["iou", "--e1", "0,0,1,2,0", "--e2", "0,0,2,1,0"]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    let text = stderr(&out);
    assert!(text.contains("data error"), "{text}");
}

#[test]
fn malformed_flags_exit_with_usage_code() {
    let out = run(&["iou", "--e1", "0,0,2,1", "--e2", "0,0,2,1,0"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_config_key_is_a_data_error() {
    let dir = tmpdir("badcfg");
    let config = dir.join("config.toml");
    fs::write(&config, "[train]\nlerning_rate = 0.1\n").unwrap();
    let out = run(&["--config", config.to_str().unwrap(), "fit", "--target", "0,0,2,1,0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("lerning_rate"));
    fs::remove_dir_all(&dir).unwrap();
}

/// Parses a P6 pixel map into (width, height, RGB bytes).
fn read_ppm(path: &Path) -> (usize, usize, Vec<u8>) {
    let raw = fs::read(path).unwrap();
    let header = String::from_utf8_lossy(&raw[..32]).into_owned();
    let mut tokens = header.split_whitespace();
    assert_eq!(tokens.next().unwrap(), "P6");
    let w: usize = tokens.next().unwrap().parse().unwrap();
    let h: usize = tokens.next().unwrap().parse().unwrap();
    let body_at = raw.len() - w * h * 3;
    (w, h, raw[body_at..].to_vec())
}

fn pixels_of_color(w: usize, data: &[u8], color: [u8; 3]) -> Vec<(usize, usize)> {
    data.chunks(3)
        .enumerate()
        .filter(|(_, px)| *px == color)
        .map(|(i, _)| (i % w, i / w))
        .collect()
}

#[test]
fn overlay_draws_gt_only_when_no_predictions_given() {
    let dir = tmpdir("overlaygt");
    let config = write_small_config(&dir);
    let data = gen_small_dataset(&dir, &config);
    let out_path = dir.join("o.ppm");
    let out = run(&[
        "overlay",
        "--split",
        data.join("test").to_str().unwrap(),
        "--index",
        "0",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_success(&out);
    let (w, _, px) = read_ppm(&out_path);
    assert!(!pixels_of_color(w, &px, [255, 0, 0]).is_empty(), "no red gt pixels");
    assert!(pixels_of_color(w, &px, [0, 255, 255]).is_empty());
    assert!(pixels_of_color(w, &px, [0, 255, 0]).is_empty());
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn overlay_of_gt_onto_itself_coincides_within_one_pixel() {
    let dir = tmpdir("overlayself");
    let config = write_small_config(&dir);
    let data = gen_small_dataset(&dir, &config);

    // Read the gt ellipses back out of the annotations to pass as preds.
    let ann: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(data.join("test/annotations.json")).unwrap(),
    )
    .unwrap();
    let objects = ann[0]["objects"].as_array().unwrap();
    let fmt = |o: &serde_json::Value| {
        format!(
            "{}:{},{},{},{},{}",
            o["class"], o["cx"], o["cy"], o["a"], o["b"], o["theta"]
        )
    };
    let pred0 = fmt(&objects[0]);
    let pred1 = fmt(&objects[1]);

    let out_path = dir.join("o.ppm");
    let out = run(&[
        "overlay",
        "--split",
        data.join("test").to_str().unwrap(),
        "--index",
        "0",
        "--pred",
        &pred0,
        "--pred",
        &pred1,
        "--out",
        out_path.to_str().unwrap(),
        "--svg",
        dir.join("o.svg").to_str().unwrap(),
    ]);
    assert_success(&out);

    let (w, _, px) = read_ppm(&out_path);
    let red = pixels_of_color(w, &px, [255, 0, 0]);
    let mut pred: Vec<(usize, usize)> = pixels_of_color(w, &px, [0, 255, 255]);
    pred.extend(pixels_of_color(w, &px, [0, 255, 0]));
    assert!(!pred.is_empty());
    // Predictions redraw the same curves, so any surviving red pixel must
    // be adjacent to a prediction pixel.
    for (rx, ry) in red {
        let near = pred.iter().any(|&(gx, gy)| {
            (rx as isize - gx as isize).abs() <= 1 && (ry as isize - gy as isize).abs() <= 1
        });
        assert!(near, "red pixel ({rx},{ry}) stranded");
    }
    assert!(fs::read_to_string(dir.join("o.svg")).unwrap().contains("<ellipse"));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn overlay_output_is_byte_identical_across_runs() {
    let dir = tmpdir("overlaydet");
    let config = write_small_config(&dir);
    let data = gen_small_dataset(&dir, &config);
    let (p1, p2) = (dir.join("a.ppm"), dir.join("b.ppm"));
    for p in [&p1, &p2] {
        let out = run(&[
            "overlay",
            "--split",
            data.join("test").to_str().unwrap(),
            "--out",
            p.to_str().unwrap(),
        ]);
        assert_success(&out);
    }
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    fs::remove_dir_all(&dir).unwrap();
}
