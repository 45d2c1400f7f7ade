use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ssod::data::{DatasetManifest, MANIFEST_FILE};

fn ssod(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssod"))
        .args(args)
        .env_remove("SSOD_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ssod(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_writes_a_reproducible_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let a_s = a.to_str().unwrap();
    ok(&["generate", "--n", "400", "--seed", "4", "--out", a_s]);
    let m = DatasetManifest::load(&a.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.images.len(), 400);
    assert_eq!(m.splits.unlabeled.len(), 400);

    let b = dir.path().join("b");
    let b_s = b.to_str().unwrap();
    ok(&["generate", "--n", "400", "--seed", "4", "--out", b_s, "--labeled-frac", "0.1"]);
    let m = DatasetManifest::load(&b.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.splits.labeled.len(), 40);
    assert_eq!(m.splits.unlabeled.len(), 360);

    ok(&["generate", "--n", "400", "--seed", "4", "--out", a_s]);
    let first = tree(&a);
    ok(&["generate", "--n", "400", "--seed", "4", "--out", a_s]);
    assert_eq!(tree(&a), first);
}

#[test]
fn train_then_eval_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    let ds_s = ds.to_str().unwrap();
    ok(&["generate", "--n", "16", "--n-test", "6", "--seed", "1", "--out", ds_s, "--labeled-frac", "0.25"]);
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let stdout = ok(&[
        "train", "--dataset", ds_s, "--out", run_s, "--iterations", "6", "--burn-in", "3", "--eval-interval", "3",
    ]);
    assert!(!stdout.trim().is_empty());
    assert!(run.join("config.toml").exists());
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(
        header,
        "iteration,l_sup_cls,l_sup_reg,l_unsup_cls,l_unsup_reg,total,mAP,AP50,AP75,n_pseudo,mean_pseudo_conf"
    );
    assert_eq!(csv.lines().count(), 3);

    let ckpt = run.join("checkpoints").join("teacher_000006.ckpt");
    let ckpt_s = ckpt.to_str().unwrap();
    let r1 = ok(&["eval", "--checkpoint", ckpt_s, "--dataset", ds_s]);
    let r2 = ok(&["eval", "--checkpoint", ckpt_s, "--dataset", ds_s]);
    assert_eq!(r1, r2);
    let v: serde_json::Value = serde_json::from_str(&r1).unwrap();
    for k in ["mAP", "AP50", "AP75"] {
        assert!(v.get(k).is_some(), "{k} missing from {r1}");
    }

    let only = ok(&["eval", "--checkpoint", ckpt_s, "--dataset", ds_s, "--iou", "0.5"]);
    let v: serde_json::Value = serde_json::from_str(&only).unwrap();
    assert!(v.get("AP50").is_some());
    assert!(v.get("AP75").is_none());
}

#[test]
fn sweeps_get_one_directory_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    let ds_s = ds.to_str().unwrap();
    ok(&["generate", "--n", "8", "--n-test", "2", "--out", ds_s, "--labeled-frac", "0.5"]);
    let run = dir.path().join("sweep");
    ok(&[
        "train", "--dataset", ds_s, "--out", run.to_str().unwrap(), "--iterations", "2", "--burn-in", "1",
        "--lambda", "0.5|2",
    ]);
    for v in ["lambda_0.5", "lambda_2"] {
        assert!(run.join(v).join("metrics.csv").exists(), "{v}");
    }
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let out = ssod(&["eval", "--checkpoint", missing.to_str().unwrap(), "--dataset", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error: io:"), "{err}");

    let out = ssod(&["train", "--out", dir.path().join("r").to_str().unwrap(), "--sigma", "1.5", "--dataset", "x"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error: config:") && err.trim_end().lines().count() == 1, "{err}");
}
