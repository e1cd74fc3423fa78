use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn xmd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xmd"))
        .args(args)
        .env("XMD_THREADS", "1")
        .output()
        .expect("run xmd")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: [&str; 8] = [
    "--set",
    "scenario.superpixels=48",
    "--set",
    "train.batch_size=48",
    "--set",
    "train.epochs=1",
    "--set",
    "train.steps_per_epoch=5",
];

fn with_small<'a>(head: &[&'a str], out: &'a str) -> Vec<&'a str> {
    let mut v = head.to_vec();
    v.extend_from_slice(&SMALL);
    v.extend_from_slice(&["--set", "eval.per_class=10", "--out", out]);
    v
}

#[test]
fn gradcheck_passes() {
    let o = xmd(&["gradcheck", "--seeds", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("checked 24 instances"), "{text}");
    assert!(!text.contains("FAIL"));
}

#[test]
fn gradcheck_single_variant() {
    let o = xmd(&["gradcheck", "--variant", "st", "--seeds", "3"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("checked 9 instances"), "{text}");
    assert!(text.lines().any(|l| l.starts_with("st,9,")));
}

#[test]
fn corrupted_gradient_fails() {
    let o = xmd(&["gradcheck", "--seeds", "1", "--corrupt", "1e-3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let files = ["config.txt", "features.xmd", "point_features.xmd", "labels.txt", "point_groups.txt", "diagnostics.txt"];
    let mut runs = Vec::new();
    for _ in 0..2 {
        let o = xmd(&["synth", "--seed", "7", "--set", "scenario.superpixels=64", "--out", dir]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        runs.push(files.map(|f| fs::read(tmp.path().join(f)).unwrap()));
    }
    for (f, (a, b)) in files.iter().zip(runs[0].iter().zip(&runs[1])) {
        assert!(a == b, "{f} differs");
    }
    let labels = fs::read_to_string(tmp.path().join("labels.txt")).unwrap();
    assert_eq!(labels.split_whitespace().count(), 64);
}

#[test]
fn bad_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.conf");
    fs::write(&path, "train.temperature = -1\n").unwrap();
    let o = xmd(&["synth", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

fn csv_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(str::to_owned)
        .collect()
}

#[test]
fn compare_writes_one_row_per_cell_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let args = with_small(&["compare", "--seeds", "2", "--k-percent", "5", "--balance", "conventional"], out);
    let o = xmd(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&tmp.path().join("compare.csv"));
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r.contains(",ok,")), "{rows:?}");
}

#[test]
fn sweep_alpha_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let args = with_small(&["sweep", "--grid", "alpha", "--seeds", "1"], out);
    let o = xmd(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&tmp.path().join("sweep.csv"));
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.starts_with("alpha_min,")), "{rows:?}");
}

#[test]
fn train_then_probe_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let args = with_small(&["train", "--variant", "st", "--k-percent", "5", "--balance", "paper"], run.to_str().unwrap());
    let o = xmd(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let history = fs::read_to_string(run.join("loss_history.csv")).unwrap();
    assert!(history.starts_with("# schema=1 config_hash="));
    assert_eq!(history.lines().count(), 2 + 5);
    assert!(run.join("checkpoint/manifest.txt").exists());
    let trained = fs::read_to_string(run.join("probe.json")).unwrap();

    let again = tmp.path().join("again");
    let ck = run.join("checkpoint");
    let o = xmd(&[
        "probe",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--set",
        "eval.per_class=10",
        "--out",
        again.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let reloaded = fs::read_to_string(again.join("probe.json")).unwrap();
    assert_eq!(trained, reloaded);
}

#[test]
fn point_granularity_trains() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let mut args = with_small(&["train", "--granularity", "point"], out);
    args.extend_from_slice(&["--set", "scenario.pair_cap=100", "--set", "train.batch_size=0"]);
    let o = xmd(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}
