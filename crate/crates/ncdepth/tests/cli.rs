//! End-to-end tests of the `ncdepth` binary: subcommand contracts, exit
//! codes, and byte-determinism of produced artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ncdepth::data::{load_depth_png, save_depth_png};
use ncdepth::network::{build_model, save_checkpoint, ModelSpec, Variant};
use ncdepth::tensor::Tensor4;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ncdepth"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn ncdepth")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path
}

fn smoke_config(out_dir: &Path) -> String {
    format!(
        r#"{{
  "variant": "hms",
  "epochs": 1,
  "batch_size": 2,
  "seed": 3,
  "dataset": {{"synthetic": {{"n_train": 4, "size": 16, "density": 0.3, "gt_coverage": 0.5}}}},
  "output_dir": "{}"
}}"#,
        out_dir.display()
    )
}

#[test]
fn train_smoke_run_exits_zero_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let cfg = write_config(dir.path(), &smoke_config(&out_dir));
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));

    let history = fs::read_to_string(out_dir.join("history.csv")).unwrap();
    let mut lines = history.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,mean_data_loss,mean_total_loss,mean_output_conf,seconds"
    );
    let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(fields.len(), 5);
    for f in &fields[1..] {
        f.parse::<f64>().unwrap();
    }
    assert!(out_dir.join("model_final.ncm").exists());
    assert!(out_dir.join("model_best.ncm").exists());
}

#[test]
fn train_is_byte_deterministic_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut checkpoints = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let cfg_dir = dir.path().join(format!("cfg_{name}"));
        fs::create_dir_all(&cfg_dir).unwrap();
        let cfg = write_config(&cfg_dir, &smoke_config(&out_dir));
        let out = run(&["train", "--config", cfg.to_str().unwrap()]);
        assert!(out.status.success(), "stderr: {}", stderr(&out));
        checkpoints.push(fs::read(out_dir.join("model_final.ncm")).unwrap());
    }
    assert_eq!(checkpoints[0], checkpoints[1]);
}

#[test]
fn malformed_config_is_a_config_error_with_position() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "{\n  \"epochs\": oops\n}");
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("line") && err.contains("column"), "{err}");

    // unknown keys are rejected, not ignored
    let cfg2 = write_config(
        dir.path(),
        r#"{"epochs": 1, "mystery": 1,
            "dataset": {"synthetic": {"n_train": 1, "size": 16, "density": 0.5, "gt_coverage": 0.5}},
            "output_dir": "o"}"#,
    );
    let out2 = run(&["train", "--config", cfg2.to_str().unwrap()]);
    assert_eq!(out2.status.code(), Some(1));
    assert!(stderr(&out2).contains("mystery"), "{}", stderr(&out2));
}

#[test]
fn missing_dataset_directory_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!(
            r#"{{"epochs": 1,
                "dataset": {{"directory": {{"path": "{}/not_there"}}}},
                "output_dir": "{}/out"}}"#,
            dir.path().display(),
            dir.path().display()
        ),
    );
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
}

#[test]
fn summary_prints_the_documented_parameter_totals() {
    for (variant, total) in [
        ("one-scale-16", "25585"),
        ("one-scale-4", "1981"),
        ("hms", "549"),
        ("sf-std", "549"),
    ] {
        let out = run(&["summary", "--variant", variant]);
        assert!(out.status.success());
        let text = stdout(&out);
        assert!(
            text.contains(&format!("total parameters: {total}")),
            "{variant}: {text}"
        );
    }
    let bad = run(&["summary", "--variant", "nope"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn synth_materializes_a_deterministic_dataset_tree() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &Path| {
        vec![
            "synth".to_string(),
            "--out".into(),
            out.to_str().unwrap().into(),
            "--seed".into(),
            "5".into(),
            "--n-train".into(),
            "3".into(),
            "--n-test".into(),
            "2".into(),
            "--size".into(),
            "16".into(),
            "--density".into(),
            "0.3".into(),
            "--gt-coverage".into(),
            "0.5".into(),
        ]
    };
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let res = bin().args(args(out)).output().unwrap();
        assert!(res.status.success(), "stderr: {}", stderr(&res));
    }
    for split in ["train", "test"] {
        let n = if split == "train" { 3 } else { 2 };
        for i in 0..n {
            let rel = format!("{split}/sparse/{i:05}.png");
            let a = fs::read(out_a.join(&rel)).unwrap();
            let b = fs::read(out_b.join(&rel)).unwrap();
            assert_eq!(a, b, "{rel} differs between identical runs");
            assert!(out_a.join(format!("{split}/gt/{i:05}.png")).exists());
        }
    }
}

#[test]
fn gradcheck_passes_on_a_fresh_multi_scale_model() {
    let out = run(&["gradcheck", "--variant", "hms", "--seed", "1"]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("worst relative error"), "{text}");
    assert!(text.contains("passed"), "{text}");
}

fn fresh_checkpoint(dir: &Path, variant: Variant) -> PathBuf {
    let model = build_model(ModelSpec {
        variant,
        epsilon: 1e-8,
        seed: 11,
    })
    .unwrap();
    let path = dir.join("model.ncm");
    save_checkpoint(&model, &path).unwrap();
    path
}

#[test]
fn eval_on_a_dense_constant_scene_reports_zero_error() {
    // a normalized-convolution stack is exact on a constant fully
    // confident scene (up to epsilon), so a fresh checkpoint must score
    // MAE ~ 0 when the input already equals the ground truth
    let dir = tempfile::tempdir().unwrap();
    let ckpt = fresh_checkpoint(dir.path(), Variant::Hms);
    let data = dir.path().join("data");
    fs::create_dir_all(data.join("test/sparse")).unwrap();
    fs::create_dir_all(data.join("test/gt")).unwrap();
    let scene = Tensor4::full(1, 1, 32, 32, 10.0).unwrap();
    for i in 0..2 {
        save_depth_png(&scene, &data.join(format!("test/sparse/{i:05}.png"))).unwrap();
        save_depth_png(&scene, &data.join(format!("test/gt/{i:05}.png"))).unwrap();
    }
    let report_path = dir.path().join("report.json");
    let args = [
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--split",
        "test",
        "--out",
        report_path.to_str().unwrap(),
    ];
    let out = run(&args);
    assert!(out.status.success(), "stderr: {}", stderr(&out));

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["schema"], "ncdepth-eval/1");
    assert_eq!(report["variant"], "hms");
    assert_eq!(report["param_count"], 549);
    assert_eq!(report["n_samples"], 2);
    let metrics = &report["metrics"];
    for key in ["mae", "rmse", "mre", "delta1", "delta2", "delta3", "n_valid"] {
        assert!(metrics.get(key).is_some(), "missing metrics.{key}");
    }
    assert!(metrics["mae"].as_f64().unwrap() < 1e-6);
    assert_eq!(metrics["delta1"].as_f64().unwrap(), 1.0);

    // byte-for-byte reproducible
    let first = fs::read(&report_path).unwrap();
    let out2 = run(&args);
    assert!(out2.status.success());
    assert_eq!(first, fs::read(&report_path).unwrap());

    // wrong path class: missing data dir is a data error
    let bad = run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        dir.path().join("nope").to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn infer_round_trips_and_saturates_confidence_away_from_borders() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = fresh_checkpoint(dir.path(), Variant::Hms);
    // fully dense input
    let scene = Tensor4::from_fn(1, 1, 64, 64, |_, _, i, j| {
        20.0 + 0.25 * i as f64 + 0.125 * j as f64
    })
    .unwrap();
    let sparse_path = dir.path().join("sparse.png");
    save_depth_png(&scene, &sparse_path).unwrap();

    let d_path = dir.path().join("dense.png");
    let c_path = dir.path().join("conf.png");
    let args = [
        "infer",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--in",
        sparse_path.to_str().unwrap(),
        "--out-depth",
        d_path.to_str().unwrap(),
        "--out-conf",
        c_path.to_str().unwrap(),
    ];
    let out = run(&args);
    assert!(out.status.success(), "stderr: {}", stderr(&out));

    // outputs parse back through the library loaders
    let (depth, mask) = load_depth_png(&d_path).unwrap();
    assert_eq!(depth.shape(), (1, 1, 64, 64));
    assert!(mask.values().iter().all(|&c| c == 1.0));
    let conf_img = match image::open(&c_path).unwrap() {
        image::DynamicImage::ImageLuma8(g) => g,
        other => panic!("confidence png has color {:?}", other.color()),
    };

    // dense input: every pixel whose window never leaves the image sits at
    // the full-confidence fixed point, so its exported confidence
    // saturates; zero-confidence padding genuinely lowers the border band
    let mut interior = 0usize;
    let mut saturated = 0usize;
    for y in 0..64u32 {
        for x in 0..64u32 {
            let d = y.min(x).min(63 - y).min(63 - x);
            if d >= 7 {
                interior += 1;
                if conf_img.get_pixel(x, y).0[0] >= 250 {
                    saturated += 1;
                }
            }
        }
    }
    assert!(interior >= 2500);
    assert!(
        saturated * 100 >= interior * 99,
        "{saturated}/{interior} interior pixels saturated"
    );

    // deterministic artifacts
    let (d1, c1) = (fs::read(&d_path).unwrap(), fs::read(&c_path).unwrap());
    assert!(run(&args).status.success());
    assert_eq!(d1, fs::read(&d_path).unwrap());
    assert_eq!(c1, fs::read(&c_path).unwrap());

    // non-multiple-of-4 inputs are padded internally and cropped back
    let odd = Tensor4::full(1, 1, 30, 22, 12.0).unwrap();
    let odd_path = dir.path().join("odd.png");
    save_depth_png(&odd, &odd_path).unwrap();
    let out = run(&[
        "infer",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--in",
        odd_path.to_str().unwrap(),
        "--out-depth",
        d_path.to_str().unwrap(),
        "--out-conf",
        c_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let (odd_out, _) = load_depth_png(&d_path).unwrap();
    assert_eq!(odd_out.shape(), (1, 1, 30, 22));

    // format violations are data errors
    let bad = run(&[
        "infer",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--in",
        c_path.to_str().unwrap(), // 8-bit png is not a depth map
        "--out-depth",
        d_path.to_str().unwrap(),
        "--out-conf",
        c_path.to_str().unwrap(),
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn help_is_available_and_unknown_flags_are_errors() {
    for sub in ["train", "eval", "infer", "gradcheck", "synth", "summary"] {
        let out = run(&[sub, "--help"]);
        assert!(out.status.success(), "{sub} --help failed");
        assert!(stdout(&out).contains("--"), "{sub} help lists no flags");
    }
    let out = run(&["summary", "--variant", "hms", "--frobnicate"]);
    assert!(!out.status.success());
    let out = run(&["transmogrify"]);
    assert!(!out.status.success());
}
