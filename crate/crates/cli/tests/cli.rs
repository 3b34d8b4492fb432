//! Black-box tests of the `mct` binary: flag parsing, exit codes, artifact
//! layout of each subcommand.

use std::path::Path;
use std::process::Command;

fn mct() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mct"))
}

fn write_spec(dir: &Path, n: usize) -> std::path::PathBuf {
    let path = dir.join("spec.cfg");
    std::fs::write(
        &path,
        format!("num_samples={n}\nimage_size=32\nnum_classes=3\nmin_objects=1\nmax_objects=2\nmin_size=5\nmax_size=8\nnoise=0.15\nseed=3\n"),
    )
    .unwrap();
    path
}

/// Tiny but valid model config matching the 32px test dataset.
fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("model.cfg");
    std::fs::write(
        &path,
        "num_classes=3\ngrid=4\nembed_dim=16\nlayers=2\nheads=2\nimage_size=32\nmlp_ratio=2\npooling=gwrp\ngwrp_lambda=0.9\nfuse_layers=2\ncct_depth=2\n",
    )
    .unwrap();
    path
}

#[test]
fn unknown_flag_exits_with_usage_error() {
    let out = mct().args(["gen", "--no-such-flag", "x"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_subcommand_exits_with_usage_error() {
    let out = mct().args(["frobnicate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_input_file_exits_with_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = mct()
        .args([
            "gen",
            "--spec",
            dir.path().join("nope.cfg").to_str().unwrap(),
            "--out",
            dir.path().join("out").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn corrupt_dataset_exits_with_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), 4);
    let data = dir.path().join("data");
    assert!(mct()
        .args(["gen", "--spec", spec.to_str().unwrap(), "--out", data.to_str().unwrap()])
        .status()
        .unwrap()
        .success());
    // truncate one tensor file
    let images = data.join("images.mct1");
    let bytes = std::fs::read(&images).unwrap();
    std::fs::write(&images, &bytes[..bytes.len() / 3]).unwrap();
    let out = mct()
        .args([
            "train",
            "--data",
            data.to_str().unwrap(),
            "--epochs",
            "1",
            "--out",
            dir.path().join("ckpt").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bad_config_value_exits_with_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), 4);
    let data = dir.path().join("data");
    assert!(mct()
        .args(["gen", "--spec", spec.to_str().unwrap(), "--out", data.to_str().unwrap()])
        .status()
        .unwrap()
        .success());
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "gwrp_lambda=1.5\n").unwrap();
    let out = mct()
        .args([
            "train",
            "--data",
            data.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--epochs",
            "1",
            "--out",
            dir.path().join("ckpt").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn full_pipeline_produces_expected_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), 8);
    let cfgp = write_config(dir.path());
    let data = dir.path().join("data");
    let ckpt = dir.path().join("ckpt");
    let maps = dir.path().join("maps");
    let report = dir.path().join("report.csv");

    for args in [
        vec!["gen", "--spec", spec.to_str().unwrap(), "--out", data.to_str().unwrap()],
        vec![
            "train",
            "--data",
            data.to_str().unwrap(),
            "--config",
            cfgp.to_str().unwrap(),
            "--epochs",
            "2",
            "--out",
            ckpt.to_str().unwrap(),
        ],
        vec![
            "maps",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--kind",
            "all",
            "--limit",
            "2",
            "--out",
            maps.to_str().unwrap(),
        ],
        vec![
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--report",
            report.to_str().unwrap(),
        ],
    ] {
        let out = mct().args(&args).output().unwrap();
        assert!(
            out.status.success(),
            "{:?} failed: {}",
            args,
            String::from_utf8_lossy(&out.stderr)
        );
    }

    assert!(ckpt.join("manifest.txt").exists());
    assert!(ckpt.join("loss.csv").exists());
    assert!(ckpt.join("class_tokens.mct1").exists());
    for kind in ["attention", "patchcam", "fused", "refined"] {
        assert!(maps.join(format!("maps_{kind}.mct1")).exists());
        assert!(maps.join(format!("s0000_{kind}_c0.pgm")).exists());
        assert!(maps.join(format!("s0001_{kind}_c2.pgm")).exists());
    }
    let report_text = std::fs::read_to_string(&report).unwrap();
    assert!(report_text.starts_with("metric,class,value\n"));
    assert!(report_text.contains("miou,,"));

    // PGM header sanity
    let pgm = std::fs::read(maps.join("s0000_refined_c0.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n4 4\n255\n"));

    // gradcheck subcommand exits zero on a small config
    let out = mct()
        .args([
            "gradcheck",
            "--config",
            cfgp.to_str().unwrap(),
            "--samples",
            "4",
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "gradcheck failed: {}",
        String::from_utf8_lossy(&out.stdout)
    );
}

#[test]
fn ablate_pipeline_emits_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), 8);
    let cfgp = write_config(dir.path());
    let data = dir.path().join("data");
    assert!(mct()
        .args(["gen", "--spec", spec.to_str().unwrap(), "--out", data.to_str().unwrap()])
        .status()
        .unwrap()
        .success());
    let out_dir = dir.path().join("study");
    let out = mct()
        .args([
            "ablate",
            "--study",
            "pipeline",
            "--data",
            data.to_str().unwrap(),
            "--config",
            cfgp.to_str().unwrap(),
            "--epochs",
            "1",
            "--out",
            out_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("pipeline.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,miou");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("attention,"));
    assert!(lines[2].starts_with("attention+affinity,"));
    assert!(lines[3].starts_with("attention+patchcam,"));
    assert!(lines[4].starts_with("attention+patchcam+affinity,"));
}

#[test]
fn ablate_unknown_study_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), 4);
    let data = dir.path().join("data");
    assert!(mct()
        .args(["gen", "--spec", spec.to_str().unwrap(), "--out", data.to_str().unwrap()])
        .status()
        .unwrap()
        .success());
    let out = mct()
        .args([
            "ablate",
            "--study",
            "nope",
            "--data",
            data.to_str().unwrap(),
            "--out",
            dir.path().join("o").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
