use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gblend::assets::{
    list_images, load_frame_params, load_model, read_rgb, synth_dataset, write_json, write_png,
    FrameParamsFile, FrameRecord, SynthConfig,
};
use gblend::model::{ExpressionCoeffs, GaussianSet, PoseParams, RigidTransform};
use gblend::trainer::render_frame;
use gblend::Image;
use serde_json::Value;

fn gblend(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gblend"))
        .args(args)
        .env_remove("GBLEND_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = gblend(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code and the diagnostic, which must be exactly one line.
fn fails(args: &[&str]) -> (i32, String) {
    let out = gblend(args);
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(
        err.lines().count(),
        1,
        "diagnostic is not one line: {err:?}"
    );
    assert!(!err.contains("panicked"), "{err}");
    (out.status.code().unwrap(), err)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_synth(dir: &Path, frames: usize) -> PathBuf {
    let d = dir.join("data");
    ok(&[
        "synth",
        "--out-dir",
        p(&d),
        "--gaussians",
        "120",
        "--mouth-gaussians",
        "12",
        "--frames",
        &frames.to_string(),
        "--width",
        "48",
        "--height",
        "48",
        "--seed",
        "3",
    ]);
    d
}

#[test]
fn synth_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let d = small_synth(dir.path(), 4);
    let config = SynthConfig {
        gaussians: 120,
        mouth_gaussians: 12,
        frames: 4,
        width: 48,
        height: 48,
        seed: 3,
        ..SynthConfig::default()
    };
    let lib = dir.path().join("lib");
    synth_dataset(&config, &lib).unwrap();
    for f in [
        "frames.json",
        "gt_model.gbav",
        "init.gbav",
        "init.json",
        "images/00000.png",
        "masks/00003.png",
    ] {
        assert_eq!(
            std::fs::read(d.join(f)).unwrap(),
            std::fs::read(lib.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn render_out_of_range_names_the_bound() {
    let dir = tempfile::tempdir().unwrap();
    let d = small_synth(dir.path(), 3);
    let out = dir.path().join("r.png");
    let (code, err) = fails(&[
        "render",
        "--model",
        p(&d.join("gt_model.gbav")),
        "--frames",
        p(&d),
        "--frame-index",
        "3",
        "--out",
        p(&out),
    ]);
    assert_eq!(code, 1);
    assert!(err.contains("3 frames") && err.contains("0..=2"), "{err}");
    assert!(!out.exists());
}

#[test]
fn render_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = small_synth(dir.path(), 3);
    let model = d.join("gt_model.gbav");
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
    for out in [&a, &b] {
        ok(&[
            "render",
            "--model",
            p(&model),
            "--frames",
            p(&d.join("frames.json")),
            "--frame-index",
            "1",
            "--out",
            p(out),
        ]);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn neutral_expression_and_identity_pose_render_the_neutral_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = small_synth(dir.path(), 2);
    let model = load_model(d.join("gt_model.gbav")).unwrap();
    let mut params = load_frame_params(&d).unwrap();
    let joints = params.joints;
    let frame = FrameRecord {
        index: 0,
        expression: vec![0.0; params.expressions],
        joints: vec![RigidTransform::identity().to_rows(); joints],
        camera: params.frames[0].camera,
    };
    params.frames = vec![frame.clone()];
    let frames_path = dir.path().join("neutral.json");
    write_json(&frames_path, &params).unwrap();
    let out = dir.path().join("n.png");
    ok(&[
        "render",
        "--model",
        p(&d.join("gt_model.gbav")),
        "--frames",
        p(&frames_path),
        "--out",
        p(&out),
        "--background",
        "0.2,0.3,0.4",
    ]);

    // Oracle: the same model with its blendshapes removed, at any expression.
    let mut neutral_only = model.clone();
    for delta in &mut neutral_only.deltas {
        *delta = GaussianSet::zeros(model.neutral.len(), model.sh_degree());
    }
    let psi = ExpressionCoeffs(vec![0.7; params.expressions]);
    let expect = render_frame(
        &neutral_only,
        &psi,
        &PoseParams::identity(joints),
        &frame.camera(),
        [0.2, 0.3, 0.4],
    )
    .unwrap();
    assert_eq!(read_rgb(&out).unwrap().to_u8(), expect.rgb.to_u8());
}

#[test]
fn render_resizes_and_writes_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let d = small_synth(dir.path(), 1);
    let (out, alpha) = (dir.path().join("o/r.png"), dir.path().join("o/a.png"));
    ok(&[
        "render",
        "--model",
        p(&d.join("gt_model.gbav")),
        "--frames",
        p(&d),
        "--out",
        p(&out),
        "--alpha-out",
        p(&alpha),
        "--width",
        "24",
    ]);
    let img = read_rgb(&out).unwrap();
    assert_eq!((img.width(), img.height()), (24, 24));
    assert!(alpha.is_file());
}

#[test]
fn animate_writes_every_frame_and_a_consistent_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = small_synth(dir.path(), 10);
    let (anim, report) = (dir.path().join("anim"), dir.path().join("report.json"));
    ok(&[
        "animate",
        "--model",
        p(&d.join("gt_model.gbav")),
        "--frames",
        p(&d),
        "--out-dir",
        p(&anim),
        "--report",
        p(&report),
    ]);
    assert_eq!(list_images(&anim).unwrap().len(), 10);
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["frames"], 10);
    let (fps, elapsed) = (r["fps"].as_f64().unwrap(), r["elapsed_s"].as_f64().unwrap());
    assert!(
        (fps - 10.0 / elapsed).abs() <= 0.01 * fps,
        "fps {fps}, elapsed {elapsed}"
    );
}

#[test]
fn animate_rejects_an_empty_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let d = small_synth(dir.path(), 1);
    let mut params = load_frame_params(&d).unwrap();
    params.frames.clear();
    let empty = dir.path().join("empty.json");
    write_json(&empty, &params).unwrap();
    let (code, err) = fails(&[
        "animate",
        "--model",
        p(&d.join("gt_model.gbav")),
        "--frames",
        p(&empty),
        "--out-dir",
        p(&dir.path().join("x")),
    ]);
    assert_eq!(code, 1);
    assert!(err.contains("no frames"), "{err}");
}

#[test]
fn mismatched_model_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = small_synth(dir.path(), 1);
    let mut params: FrameParamsFile = load_frame_params(&d).unwrap();
    params.expressions += 1;
    for f in &mut params.frames {
        f.expression.push(0.0);
    }
    let path = dir.path().join("f.json");
    write_json(&path, &params).unwrap();
    let (code, _) = fails(&[
        "render",
        "--model",
        p(&d.join("gt_model.gbav")),
        "--frames",
        p(&path),
        "--out",
        p(&dir.path().join("r.png")),
    ]);
    assert_eq!(code, 1);
}

fn train(d: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec![
        "train",
        "--data-dir",
        p(d),
        "--out",
        p(out),
        "--iters",
        "12",
        "--seed",
        "5",
        "--progress-every",
        "0",
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

fn log_without_timing(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_ms");
            v
        })
        .collect()
}

#[test]
fn training_is_deterministic_and_logs_documented_columns() {
    let dir = tempfile::tempdir().unwrap();
    let d = small_synth(dir.path(), 6);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train(&d, &a, &[]);
    train(&d, &b, &["--threads", "1"]);
    for f in ["model.gbav", "summary.json", "checkpoints/000012.gbck"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(
        log_without_timing(&a.join("log.jsonl")),
        log_without_timing(&b.join("log.jsonl"))
    );

    let text = std::fs::read_to_string(a.join("log.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 12);
    for (i, line) in text.lines().enumerate() {
        let v: Value = serde_json::from_str(line).unwrap();
        let columns = ["iter", "loss", "l_rgb", "l_alpha", "l_reg", "wall_ms"];
        assert_eq!(v.as_object().unwrap().len(), columns.len());
        let at: Vec<usize> = columns
            .iter()
            .map(|c| line.find(&format!("\"{c}\":")).unwrap())
            .collect();
        assert!(at.windows(2).all(|w| w[0] < w[1]), "{line}");
        assert_eq!(v["iter"], i as u64 + 1);
    }
    let s: Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["iterations"], 12);
    assert!(s["heldout_psnr_db"].as_f64().unwrap() > 0.0);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = small_synth(dir.path(), 6);
    let (full, part) = (dir.path().join("full"), dir.path().join("part"));
    train(&d, &full, &[]);
    train(&d, &part, &["--iters", "5", "--checkpoint-every", "5"]);
    let ckpt = part.join("checkpoints/000005.gbck");
    train(&d, &part, &["--resume", p(&ckpt)]);
    assert_eq!(
        std::fs::read(full.join("model.gbav")).unwrap(),
        std::fs::read(part.join("model.gbav")).unwrap()
    );
    assert_eq!(
        log_without_timing(&full.join("log.jsonl")),
        log_without_timing(&part.join("log.jsonl"))
    );
}

#[test]
fn config_file_supplies_flags_and_command_line_wins() {
    let dir = tempfile::tempdir().unwrap();
    let d = small_synth(dir.path(), 4);
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"iters": 3, "progress_every": 0, "lr_sh": 0.002}"#).unwrap();
    let out = dir.path().join("t");
    ok(&[
        "--config",
        p(&cfg),
        "train",
        "--data-dir",
        p(&d),
        "--out",
        p(&out),
    ]);
    assert_eq!(
        std::fs::read_to_string(out.join("log.jsonl"))
            .unwrap()
            .lines()
            .count(),
        3
    );
    ok(&[
        "train",
        "--config",
        p(&cfg),
        "--data-dir",
        p(&d),
        "--out",
        p(&out),
        "--iters",
        "2",
    ]);
    assert_eq!(
        std::fs::read_to_string(out.join("log.jsonl"))
            .unwrap()
            .lines()
            .count(),
        2
    );

    std::fs::write(&cfg, r#"{"iters": 3, "learning_rate": 1}"#).unwrap();
    let (code, err) = fails(&[
        "--config",
        p(&cfg),
        "train",
        "--data-dir",
        p(&d),
        "--out",
        p(&out),
    ]);
    assert_eq!(code, 1);
    assert!(err.contains("learning_rate"), "{err}");
}

#[test]
fn usage_errors_exit_one_with_one_line() {
    for args in [
        &["train", "--data-dir", "x", "--out", "y", "--bogus"][..],
        &["render", "--model", "m"],
        &["frobnicate"],
        &["metrics", "stability", "--video-dir", "/nonexistent/dir"],
        &[
            "render",
            "--model",
            "m",
            "--frames",
            "f",
            "--out",
            "o",
            "--background",
            "1,2",
        ],
        &["--threads", "0", "synth", "--out-dir", "z"],
    ] {
        let (code, _) = fails(args);
        assert_eq!(code, 1, "{args:?}");
    }
    let out = gblend(&["--help"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("train"));
}

#[test]
fn threads_fall_back_to_the_environment() {
    let out = Command::new(env!("CARGO_BIN_EXE_gblend"))
        .args(["synth", "--out-dir", "/nonexistent/never"])
        .env("GBLEND_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--threads"));
}

fn write_dir(dir: &Path, frames: &[Image]) {
    std::fs::create_dir_all(dir).unwrap();
    for (i, f) in frames.iter().enumerate() {
        write_png(dir.join(format!("{i:05}.png")), f).unwrap();
    }
}

fn gradient(shift: usize) -> Image {
    let data = (0..32 * 32)
        .flat_map(|i| {
            let (x, y) = ((i % 32 + shift) as f64, (i / 32) as f64);
            [x / 40.0, y / 32.0, ((x * 0.4).sin() * 0.5 + 0.5)]
        })
        .collect();
    Image::from_vec(32, 32, 3, data).unwrap()
}

#[test]
fn metrics_report_caps_and_jitter() {
    let dir = tempfile::tempdir().unwrap();
    let still = dir.path().join("still");
    write_dir(&still, &vec![gradient(0); 5]);
    let text = ok(&[
        "metrics",
        "stability",
        "--video-dir",
        p(&still),
        "--json",
        p(&dir.path().join("s.json")),
    ]);
    assert!(text.contains("ITF 100.0000 dB"), "{text}");
    let s: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("s.json")).unwrap()).unwrap();
    assert_eq!(s["itf_db"], 100.0);

    let text = ok(&[
        "metrics",
        "quality",
        "--render-dir",
        p(&still),
        "--target-dir",
        p(&still),
    ]);
    assert!(
        text.contains("PSNR 100.0000 dB") && text.contains("SSIM 1.000000"),
        "{text}"
    );

    let shaky = dir.path().join("shaky");
    write_dir(&shaky, &[0, 2, 1, 3, 0].map(gradient));
    let q = |d: &Path| -> f64 {
        let json = dir.path().join("q.json");
        ok(&[
            "metrics",
            "stability",
            "--video-dir",
            p(d),
            "--json",
            p(&json),
        ]);
        let v: Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
        v["itf_db"].as_f64().unwrap()
    };
    assert!(q(&shaky) < q(&still));
}

#[test]
fn evaluate_scores_the_ground_truth_highly() {
    let dir = tempfile::tempdir().unwrap();
    let d = small_synth(dir.path(), 5);
    let json = dir.path().join("e.json");
    ok(&[
        "evaluate",
        "--model",
        p(&d.join("gt_model.gbav")),
        "--data-dir",
        p(&d),
        "--holdout",
        "0",
        "--json",
        p(&json),
    ]);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["frames"], 5);
    // Targets are 8-bit quantizations of these same renders.
    assert!(v["mean_psnr_db"].as_f64().unwrap() > 45.0, "{v}");
}
