use std::path::Path;
use std::process::{Command, Output};

fn peye(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_peye"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = peye(args);
    assert!(
        out.status.success(),
        "peye {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Tiny dataset: 3 subjects x 2 poses, 16x8 maps, 32x16 images.
fn synth(dir: &Path) {
    let d = dir.to_str().unwrap();
    ok(&[
        "synth",
        "--out-dir",
        d,
        "--subjects",
        "3",
        "--poses",
        "2",
        "--test-subjects",
        "1",
        "--seed",
        "4",
        "--image-height",
        "32",
        "--image-width",
        "16",
        "--pm-rows",
        "16",
        "--pm-cols",
        "8",
    ]);
}

const TINY: [&str; 20] = [
    "--epochs",
    "2",
    "--decay_epochs",
    "1",
    "--batch_size",
    "2",
    "--input_height",
    "32",
    "--input_width",
    "16",
    "--depth",
    "2",
    "--base_channels",
    "4",
    "--code_channels",
    "4",
    "--ssim_window",
    "3",
    "--checkpoint_every",
    "0",
];

#[test]
fn ablate_writes_one_run_per_config_and_a_table() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("ablate");
    synth(&data);
    let mut args = vec![
        "ablate",
        "--data",
        data.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
        "--configs",
        "base,pwrs,phy,pwrs-phy",
    ];
    args.extend(TINY);
    ok(&args);
    for name in ["base", "pwrs", "phy", "pwrs-phy"] {
        let run = out.join(name);
        assert!(run.join("config.txt").is_file(), "{name}");
        assert!(run.join("checkpoints/final.safetensors").is_file(), "{name}");
        assert!(run.join("metrics.csv").is_file(), "{name}");
    }
    let table = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[0].starts_with("config,"));
    let names: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(names, ["base", "pwrs", "phy", "pwrs-phy"]);
}

#[test]
fn train_eval_predict_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    synth(&data);
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out-dir",
        run.to_str().unwrap(),
        "--config_name",
        "pwrs-phy",
        "--no-plot",
    ];
    args.extend(TINY);
    ok(&args);
    assert!(run.join("train_log.csv").is_file());
    assert!(run.join("density.txt").is_file());
    assert!(run.join("eval/metrics.csv").is_file());
    assert!(!run.join("eval/pcs_curves.svg").exists());

    let ckpt = run.join("checkpoints/final.safetensors");
    let eval_dir = tmp.path().join("eval");
    ok(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out-dir",
        eval_dir.to_str().unwrap(),
        "--ssim_window",
        "3",
    ]);
    assert!(eval_dir.join("pcs_curves.svg").is_file());

    let image = std::fs::read_dir(data.join("vision"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let pred_dir = tmp.path().join("pred");
    let predict = |physique: &str| {
        peye(&[
            "predict",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--image",
            image.to_str().unwrap(),
            "--physique",
            physique,
            "--out-dir",
            pred_dir.to_str().unwrap(),
        ])
    };
    let good = predict("70,175,1,90,80,95,57,30,55,37");
    assert!(good.status.success(), "{}", String::from_utf8_lossy(&good.stderr));
    let text = std::fs::read_to_string(pred_dir.join("prediction.csv")).unwrap();
    assert_eq!(text.lines().count(), 16);
    assert_eq!(text.lines().next().unwrap().split(',').count(), 8);

    let bad = predict("70,175");
    assert_eq!(bad.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&bad.stderr);
    assert!(stderr.contains("physique vector has 2 entries"), "{stderr}");
    assert_eq!(stderr.trim().lines().count(), 1, "{stderr}");
}

#[test]
fn curves_of_identical_maps_are_all_ones() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("curves");
    synth(&data);
    let maps = data.join("pressure");
    ok(&[
        "curves",
        "--pred",
        maps.to_str().unwrap(),
        "--gt",
        maps.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(out.join("pcs_curves.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "epsilon,pcs_m05,pcs_m10");
    let mut n = 0;
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(&cells[1..], ["1", "1"], "{line}");
        n += 1;
    }
    assert!(n > 0);
    assert!(out.join("pcs_curves.svg").is_file());
}

#[test]
fn usage_and_precondition_exit_codes() {
    assert_eq!(peye(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(peye(&["train", "--out-dir", "x"]).status.code(), Some(2));
    assert_eq!(
        peye(&["ablate", "--data", "d", "--out-dir", "o", "--configs", "nope"])
            .status
            .code(),
        Some(2)
    );
    let tmp = tempfile::tempdir().unwrap();
    let missing = peye(&[
        "train",
        "--data",
        tmp.path().join("absent").to_str().unwrap(),
        "--out-dir",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(missing.status.code(), Some(1));
    let help = peye(&["train", "--help"]);
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8_lossy(&help.stdout);
    for key in [
        "--config_name",
        "--decay_epochs",
        "--use_best_checkpoint",
        "--ssim_window",
    ] {
        assert!(text.contains(key), "{key} missing from help");
    }
}
