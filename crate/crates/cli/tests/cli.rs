use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
    "epochs": 2,
    "decay_epoch": 1,
    "warmup_fraction": 0.25,
    "seed": 1,
    "data": {"seed": 5, "shift": "moderate", "source_train": 3, "target_train": 3, "target_test": 2}
}"#;

fn fgrr(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fgrr"));
    cmd.args(args).env_remove("FGRR_SEED");
    if let Some(s) = seed {
        cmd.env("FGRR_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("tiny.json");
    fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

fn report_json(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn gen_data_train_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let o = fgrr(
        &["gen-data", "--out", data.to_str().unwrap(), "--seed", "5", "--shift", "severe", "--source-train", "3", "--target-train", "3", "--target-test", "2"],
        None,
    );
    assert!(o.status.success(), "{o:?}");
    assert!(data.join("target_test").is_dir());

    let cfg = write_config(tmp.path());
    let run = tmp.path().join("run");
    let o = fgrr(&["train", "--config", &cfg, "--out", run.to_str().unwrap(), "--data", data.to_str().unwrap()], Some("9"));
    assert!(o.status.success(), "{o:?}");
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("epoch")).count(), 2);
    for f in ["metrics.csv", "report.json", "loss.png", "map.png", "checkpoint.json"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let report = report_json(&run);
    assert_eq!(report["config"]["seed"], 9);
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "epoch,learning_rate,det,nc,cda,ior,total,target_map");
    assert_eq!(csv.lines().count(), 3);

    let o = fgrr(&["eval", "--checkpoint", run.join("checkpoint.json").to_str().unwrap(), "--data", data.to_str().unwrap()], None);
    assert!(o.status.success(), "{o:?}");
    let final_map = report["final_map"].as_f64().unwrap();
    assert!(stdout(&o).contains(&format!("{final_map:.4}")), "{}", stdout(&o));
}

#[test]
fn seed_override_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let runs: Vec<_> = ["a", "b", "c"].iter().map(|n| tmp.path().join(n)).collect();
    for (dir, seed) in runs.iter().zip([Some("4"), Some("4"), None]) {
        assert!(fgrr(&["train", "--config", &cfg, "--out", dir.to_str().unwrap()], seed).status.success());
    }
    let csv = |d: &Path| fs::read(d.join("metrics.csv")).unwrap();
    assert_eq!(csv(&runs[0]), csv(&runs[1]));
    assert_eq!(report_json(&runs[2])["config"]["seed"], 1);
    assert!(!fgrr(&["train", "--config", &cfg, "--out", runs[0].to_str().unwrap()], Some("x")).status.success());
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("abl.csv");
    let o = fgrr(&["ablate", "--config", &cfg, "--variants", "no_ior,full", "--seeds", "2", "--out", out.to_str().unwrap()], None);
    assert!(o.status.success(), "{o:?}");
    let csv = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,seed_0,seed_1,median");
    assert!(lines[1].starts_with("no_ior,") && lines[2].starts_with("full,"));
    assert_eq!(lines.len(), 3);

    let o = fgrr(&["ablate", "--config", &cfg, "--variants", "full,bogus", "--seeds", "1", "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_inputs_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fgrr(&["gen-data", "--out", tmp.path().to_str().unwrap(), "--shift", "extreme"], None);
    assert!(!o.status.success());
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"epochs": 0}"#).unwrap();
    let o = fgrr(&["train", "--config", bad.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochs"));
}

#[test]
fn selfcheck_passes() {
    let o = fgrr(&["selfcheck"], None);
    assert!(o.status.success(), "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("PASS")).count(), 5);
}
