//! End-to-end CLI tests driving the actual binary.

use std::path::Path;
use std::process::{Command, Output};

fn locus(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_locus"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

const TINY: &[&str] = &[
    "--set",
    "model.input_size=32",
    "--set",
    "data.image_size=32",
    "--set",
    "data.sprite.image_size=32",
    "--set",
    "model.k=5",
    "--set",
    "model.base_channels=4",
    "--set",
    "model.decoder_start_channels=8",
    "--set",
    "model.decoder_min_channels=4",
    "--set",
    "loss.lossnet_channels=[2,3,4,4,4]",
    "--set",
    "data.n_train=6",
    "--set",
    "data.n_val=2",
    "--set",
    "data.n_test=4",
];

fn tiny_args(rest: &[&str]) -> Vec<&str> {
    let mut v = TINY.to_vec();
    v.extend_from_slice(rest);
    v
}

#[test]
fn synth_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out = locus(&tiny_args(&["synth-data", "--out", "a"]), dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = locus(&tiny_args(&["synth-data", "--out", "b"]), dir.path());
    assert!(out.status.success());
    for name in ["000000.png", "000011.png", "landmarks.csv", "descriptor.json"] {
        let a = std::fs::read(dir.path().join("a").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identically-seeded runs");
    }
    assert!(dir.path().join("a/config.json").exists());
}

#[test]
fn invalid_config_is_user_error_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = locus(
        &["--json", "synth-data", "--out", "x", "--set", "data.sprite.n_parts=0"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_str(line).expect("stderr is JSON");
    assert_eq!(v["exit_code"], 1);
    assert!(v["error"].as_str().unwrap().contains("part"));
}

#[test]
fn unknown_config_key_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = locus(
        &["synth-data", "--out", "x", "--set", "train.not_a_field=3"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_checkpoint_is_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = locus(
        &tiny_args(&["eval", "--ckpt", "nope.ckpt", "--protocol", "probe", "--out", "e"]),
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_eval_swap_round_trip() {
    let dir = tempfile::tempdir().unwrap();

    let out = locus(
        &tiny_args(&[
            "--set",
            "train.max_steps=6",
            "--set",
            "train.batch_size=2",
            "--set",
            "train.checkpoint_every=3",
            "train",
            "--out",
            "run",
        ]),
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    assert!(run.join("config.json").exists());
    assert!(run.join("metrics.csv").exists());
    assert!(run.join("checkpoints/final.ckpt").exists());
    assert!(run.join("figures/reconstructions.png").exists());
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,loss,lr,grad_norm"));
    assert_eq!(metrics.lines().count(), 7, "header + 6 steps");

    // resume after raising max_steps continues from the checkpoint
    let out = locus(
        &tiny_args(&[
            "--set",
            "train.max_steps=8",
            "--set",
            "train.batch_size=2",
            "train",
            "--out",
            "run",
            "--resume",
        ]),
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let ckpt = run.join("checkpoints/final.ckpt");
    let out = locus(
        &tiny_args(&[
            "eval",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--protocol",
            "probe",
            "--out",
            "evalout",
        ]),
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("evalout/reports/probe.json").exists());
    assert!(dir.path().join("evalout/reports/pck_curve.csv").exists());
    assert!(dir.path().join("evalout/figures/overlay_00.png").exists());

    let out = locus(
        &tiny_args(&[
            "eval",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--protocol",
            "sweep",
            "--ns",
            "1,3,6",
            "--out",
            "sweepout",
        ]),
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sweep = std::fs::read_to_string(dir.path().join("sweepout/reports/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 4);
    assert!(sweep.lines().last().unwrap().ends_with("N/A"), "n == pool row reports N/A");

    // swap grid layout: (styles+1) x (geoms+1) tiles
    let data = dir.path().join("data");
    let out = locus(&tiny_args(&["synth-data", "--out", "data"]), dir.path());
    assert!(out.status.success());
    let style = dir.path().join("style");
    let geom = dir.path().join("geom");
    std::fs::create_dir_all(&style).unwrap();
    std::fs::create_dir_all(&geom).unwrap();
    for i in 0..3 {
        std::fs::copy(
            data.join(format!("{i:06}.png")),
            style.join(format!("{i}.png")),
        )
        .unwrap();
    }
    for i in 3..7 {
        std::fs::copy(
            data.join(format!("{i:06}.png")),
            geom.join(format!("{i}.png")),
        )
        .unwrap();
    }
    let out = locus(
        &[
            "swap",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--style",
            style.to_str().unwrap(),
            "--geom",
            geom.to_str().unwrap(),
            "--out",
            "swapout",
            "--strip",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let grid = image::open(dir.path().join("swapout/swap_grid.png")).unwrap();
    // 4 rows x 5 cols of 32px tiles with 2px separators
    assert_eq!(grid.width(), 5 * 32 + 6 * 2);
    assert_eq!(grid.height(), 4 * 32 + 5 * 2);
    assert!(dir.path().join("swapout/quadruplets.png").exists());
}

#[test]
fn fc_ablation_path_trains() {
    let dir = tempfile::tempdir().unwrap();
    let out = locus(
        &tiny_args(&[
            "--set",
            "bottleneck.kind=fc",
            "--set",
            "bottleneck.d=20",
            "--set",
            "train.max_steps=3",
            "--set",
            "train.batch_size=2",
            "--set",
            "loss.kind=l2",
            "train",
            "--out",
            "fcrun",
        ]),
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("fcrun/checkpoints/final.ckpt").exists());
}
