//! End-to-end exercises of the binary: exit codes, reproducibility, and the
//! synth → train → eval/predict/erf workflow on a miniature configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_iml"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("iml_cli_{}_{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap().flatten() {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn synth_count_zero_writes_a_valid_empty_dataset() {
    let dir = tmp("empty");
    let out = dir.join("ds");
    let status = bin()
        .args(["synth", "--out"])
        .arg(&out)
        .args(["--count", "0", "--seed", "1"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let index = fs::read_to_string(out.join("index.csv")).unwrap();
    assert_eq!(index, "image,mask,label\n");
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn unknown_flag_exits_one_with_usage() {
    let output = bin().args(["synth", "--frobnicate", "7"]).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.to_lowercase().contains("usage"), "{stderr}");
}

#[test]
fn unknown_subcommand_exits_one() {
    let output = bin().arg("transmogrify").output().unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn seeded_synth_is_byte_reproducible() {
    let dir = tmp("repro");
    let (a, b) = (dir.join("a"), dir.join("b"));
    for out in [&a, &b] {
        let status = bin()
            .args(["synth", "--out"])
            .arg(out)
            .args(["--count", "6", "--size", "32", "--seed", "77"])
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
    }
    assert_eq!(read_tree(&a), read_tree(&b));
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn bad_config_key_exits_two() {
    let dir = tmp("badcfg");
    let cfg = dir.join("run.cfg");
    fs::write(&cfg, "not_a_key=1\n").unwrap();
    let output = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--data", "/nonexistent", "--out"])
        .arg(dir.join("m.ckpt"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("unknown key"), "{stderr}");
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn missing_dataset_exits_two() {
    let dir = tmp("nodata");
    let output = bin()
        .args(["eval", "--ckpt", "/nonexistent.ckpt", "--data", "/nonexistent", "--report"])
        .arg(dir.join("r.json"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let _ = fs::remove_dir_all(&dir);
}

/// The full workflow at miniature scale: synthesize, train briefly with a
/// small config, then evaluate, predict, and export the receptive field.
#[test]
fn workflow_train_eval_predict_erf() {
    let dir = tmp("flow");
    let data = dir.join("train");
    let status = bin()
        .args(["synth", "--out"])
        .arg(&data)
        .args(["--count", "24", "--size", "64", "--fake-ratio", "0.5", "--seed", "11"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));

    let cfg = dir.join("run.cfg");
    fs::write(
        &cfg,
        "epochs=6\nbatch_size=8\nlr_init=0.002\nseed=5\n\
         stage_dims=8,12,16,24\nstage_depths=1,1,1,1\nstate_dim=4\n\
         fpn_dim=16\nppm_out=16\nknn_k=9\n",
    )
    .unwrap();
    let ckpt = dir.join("model.ckpt");
    let output = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--data"])
        .arg(&data)
        .args(["--out"])
        .arg(&ckpt)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", String::from_utf8_lossy(&output.stderr));
    assert!(ckpt.is_file());
    let log = fs::read_to_string(dir.join("model.csv")).unwrap();
    assert!(log.starts_with("epoch,train_loss,val_loss,lr,seconds\n"));
    assert_eq!(log.lines().count(), 7, "{log}");

    // Evaluate on the training set; the report must re-aggregate from its
    // own rows.
    let report_path = dir.join("report.json");
    let output = bin()
        .args(["eval", "--ckpt"])
        .arg(&ckpt)
        .args(["--data"])
        .arg(&data)
        .args(["--report"])
        .arg(&report_path)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", String::from_utf8_lossy(&output.stderr));
    let report = iml_metrics::EvalReport::from_json(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 24);
    let again = iml_metrics::EvalReport::from_rows(report.rows.clone()).unwrap();
    assert_eq!(again.pixel_f1, report.pixel_f1);
    assert_eq!(again.image_f1, report.image_f1);
    assert_eq!(again.image_auc, report.image_auc);

    // Predict a mask for an authentic image: trained even briefly, the
    // model should mark well under half of an authentic image as fake.
    let authentic = data.join("images/img_00000.ppm");
    let index = fs::read_to_string(data.join("index.csv")).unwrap();
    let first_authentic = index
        .lines()
        .skip(1)
        .find(|l| l.ends_with(",0"))
        .map(|l| l.split(',').next().unwrap().to_string())
        .unwrap_or_else(|| "images/img_00000.ppm".into());
    let mask_out = dir.join("pred.pgm");
    let output = bin()
        .args(["predict", "--ckpt"])
        .arg(&ckpt)
        .args(["--image"])
        .arg(data.join(&first_authentic))
        .args(["--out"])
        .arg(&mask_out)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", String::from_utf8_lossy(&output.stderr));
    let bytes = fs::read(&mask_out).unwrap();
    assert!(bytes.starts_with(b"P5\n64 64\n255\n"));
    let raster = &bytes[bytes.len() - 64 * 64..];
    assert!(raster.iter().all(|&b| b == 0 || b == 255));
    let positive = raster.iter().filter(|&&b| b == 255).count();
    assert!(
        positive < 64 * 64 / 2,
        "authentic image predicted {positive}/{} fake pixels",
        64 * 64
    );
    let _ = authentic;

    // Receptive-field export.
    let erf_out = dir.join("erf.pgm");
    let output = bin()
        .args(["erf", "--ckpt"])
        .arg(&ckpt)
        .args(["--probes"])
        .arg(&data)
        .args(["--out"])
        .arg(&erf_out)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", String::from_utf8_lossy(&output.stderr));
    let erf_bytes = fs::read(&erf_out).unwrap();
    assert!(erf_bytes.starts_with(b"P5\n64 64\n255\n"));
    assert!(erf_bytes[erf_bytes.len() - 4096..].iter().any(|&b| b > 0));

    let _ = fs::remove_dir_all(&dir);
}
