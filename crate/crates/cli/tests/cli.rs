use std::path::Path;
use std::process::{Command, Output};

use qsc_core::eval::{AblationConfig, EvalCell, EVAL_CSV_HEADER};
use qsc_core::PerturbationRegime;

fn qsc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qsc")).args(args).env("RUST_LOG", "warn").output().expect("qsc runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn gen(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["gen-data", "--out", dir.to_str().unwrap(), "--demos", "2", "--scenes", "3", "--size", "16", "--seed", "3"];
    args.extend_from_slice(extra);
    if !extra.contains(&"--views") {
        args.extend_from_slice(&["--views", "2"]);
    }
    qsc(&args)
}

fn trained(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    assert_eq!(code(&gen(&data, &[])), 0);
    let ckpt = dir.join("m.ckpt");
    let o = qsc(&["train", "--data", data.to_str().unwrap(), "--steps", "3", "--out", ckpt.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    ckpt
}

#[test]
fn generation_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&gen(&a, &[])), 0);
    assert_eq!(code(&gen(&b, &[])), 0);
    assert_eq!(std::fs::read(a.join("manifest.json")).unwrap(), std::fs::read(b.join("manifest.json")).unwrap());
    assert_eq!(std::fs::read(a.join("blobs/obs_0.bin")).unwrap(), std::fs::read(b.join("blobs/obs_0.bin")).unwrap());
    let o = qsc(&["inspect", "--data", a.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("dataset ok"));
}

#[test]
fn tampered_blob_fails_inspection() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("d");
    assert_eq!(code(&gen(&dir, &[])), 0);
    let blob = dir.join("blobs/obs_1.bin");
    let mut bytes = std::fs::read(&blob).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    std::fs::write(&blob, bytes).unwrap();
    assert_eq!(code(&qsc(&["inspect", "--data", dir.to_str().unwrap()])), 5);
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("m.ckpt");
    assert_eq!(code(&qsc(&["train", "--out", out.to_str().unwrap()])), 2);
    assert_eq!(code(&qsc(&["frobnicate"])), 2);
    let data = tmp.path().join("d");
    assert_eq!(code(&gen(&data, &[])), 0);
    assert_eq!(code(&qsc(&["train", "--data", data.to_str().unwrap(), "--variant", "nope", "--out", out.to_str().unwrap()])), 2);
    assert_eq!(code(&gen(&tmp.path().join("e"), &["--camera", "sideways"])), 2);
}

#[test]
fn single_view_data_cannot_train_the_full_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    assert_eq!(code(&gen(&data, &["--views", "1"])), 0);
    let out = tmp.path().join("m.ckpt");
    assert_eq!(code(&qsc(&["train", "--data", data.to_str().unwrap(), "--steps", "2", "--out", out.to_str().unwrap()])), 3);
    let o = qsc(&["train", "--data", data.to_str().unwrap(), "--variant", "bc", "--steps", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn perspective_suite_reports_every_regime() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = trained(tmp.path());
    let csv = tmp.path().join("eval.csv");
    let o = qsc(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--suite", "perspective", "--episodes", "1", "--max-steps", "4", "--samples", "1", "--out", csv.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], EVAL_CSV_HEADER);
    assert_eq!(lines.len(), 1 + PerturbationRegime::ALL.len());
    for r in PerturbationRegime::ALL {
        assert!(lines.iter().any(|l| l.starts_with(r.name())), "{}", r.name());
    }
}

#[test]
fn corrupt_checkpoint_exits_five() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = trained(tmp.path());
    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&ckpt, bytes).unwrap();
    let csv = tmp.path().join("eval.csv");
    assert_eq!(code(&qsc(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--out", csv.to_str().unwrap()])), 5);
    assert_eq!(code(&qsc(&["eval", "--ckpt", tmp.path().join("absent").to_str().unwrap(), "--out", csv.to_str().unwrap()])), 5);
}

#[test]
fn two_by_two_grid_writes_four_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = AblationConfig::desk_scale();
    cfg.scenes = vec![2, 3];
    cfg.views_per_state = vec![2, 3];
    for (w, h) in [(&mut cfg.demo.image_width, &mut cfg.demo.image_height), (&mut cfg.statics.image_width, &mut cfg.statics.image_height)] {
        *w = 16;
        *h = 16;
    }
    cfg.demo.n_trajectories = 2;
    cfg.train.steps = 2;
    cfg.train.model.image_width = 16;
    cfg.train.model.image_height = 16;
    cfg.suite.cells = vec![EvalCell::nominal()];
    cfg.suite.image_width = 16;
    cfg.suite.image_height = 16;
    cfg.suite.episodes = 1;
    cfg.suite.max_steps = 3;
    cfg.suite.samples = 1;
    let grid = tmp.path().join("grid.json");
    std::fs::write(&grid, serde_json::to_vec(&cfg).unwrap()).unwrap();
    let out = tmp.path().join("out");
    let o = qsc(&["ablate", "--grid", grid.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.ends_with(",ok")), "{text}");
}
