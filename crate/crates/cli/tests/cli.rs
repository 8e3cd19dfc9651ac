use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
seeds = [0]
out_dir = "unused"

[dataset.source]
kind = "blobs"
classes = 4
dim = 8
train_per_class = 40
test_per_class = 10

[teacher]
arch = { kind = "mlp", input_dim = 8, hidden = [16, 16] }
schedule = { epochs = 4, milestones = [], initial_lr = 0.02 }

[granularity]
dim_ak = 2
dim_dk = 8

[self_analyze]
schedule = { epochs = 3, milestones = [2], initial_lr = 0.02 }

[student]
arch = { kind = "mlp", input_dim = 8, hidden = [8, 8] }

[distill]
schedule = { epochs = 4, milestones = [3], initial_lr = 0.02 }

[evaluate]
cka_samples = 30
"#;

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("exp.toml");
    fs::write(&p, text).unwrap();
    p
}

fn mgkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgkd")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn run_writes_every_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("runs");
    let o = mgkd(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["teacher/seed_4/teacher.ckpt", "self_analyze/seed_4/t_sa.ckpt", "distill/se_hkd/seed_4/student_stripped.ckpt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let summary = json(&out.join("distill/se_hkd/seed_4/summary.json"));
    assert!(summary["early_loss_stability"].as_f64().unwrap() >= 0.0);
    assert_eq!(summary["seeds"], serde_json::json!([4]));
    let report = json(&out.join("evaluate/seed_4/report.json"));
    assert_eq!(report["config_hash"], summary["config_hash"]);
    assert_eq!(report["heads"].as_array().unwrap().len(), 3);
    let noise = fs::read_to_string(out.join("evaluate/seed_4/noise_student.csv")).unwrap();
    assert_eq!(noise.lines().count(), 17);

    // GWD from the same self-analyzed teacher lands beside the SE run
    let o = mgkd(&["distill", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "4", "--scheme", "gwd"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let gwd = json(&out.join("distill/gwd_hkd/seed_4/summary.json"));
    assert!(gwd["loss_decomposition"].get("lh_nk").is_some());
    assert!(gwd["loss_decomposition"].get("l_en").is_none());

    let student = out.join("distill/gwd_hkd/seed_4/student.ckpt");
    let o = mgkd(&["noise", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "4", "--checkpoint", student.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("noise/seed_4/noise_curve.csv").exists());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let c = cfg.to_str().unwrap();
    let out = tmp.path().join("runs");
    let o = out.to_str().unwrap();

    let r = mgkd(&["distill", "--config", c, "--out", o, "--hook", "crd"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(stderr(&r).contains("null, hkd"), "{}", stderr(&r));

    let r = mgkd(&["distill", "--config", c, "--out", o, "--scheme", "mix"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(stderr(&r).contains("gwd"), "{}", stderr(&r));

    let r = mgkd(&["distill", "--config", c, "--out", o]);
    assert_eq!(r.status.code(), Some(3), "{}", stderr(&r));

    let r = mgkd(&["evaluate", "--config", c, "--out", o, "--teacher", "nope.ckpt", "--student", "nope.ckpt"]);
    assert_eq!(r.status.code(), Some(3));

    let r = mgkd(&["self-analyze", "--config", "missing.toml"]);
    assert_eq!(r.status.code(), Some(3));

    // validation happens before anything is written
    let bad = write_config(tmp.path(), &TINY.replace("dim_ak = 2", "dim_ak = 4"));
    let r = mgkd(&["run", "--config", bad.to_str().unwrap(), "--out", o]);
    assert_eq!(r.status.code(), Some(2));
    assert!(stderr(&r).contains("dim_ak"), "{}", stderr(&r));
    assert!(!out.exists());

    let wild = write_config(tmp.path(), &TINY.replace("initial_lr = 0.02 }\n\n[granularity]", "initial_lr = 1e8 }\n\n[granularity]"));
    let r = mgkd(&["train-teacher", "--config", wild.to_str().unwrap(), "--out", o]);
    assert_eq!(r.status.code(), Some(4), "{}", stderr(&r));
}

#[test]
fn sweep_reports_rejected_points() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!("{TINY}\n[sweep]\naxis = \"dims\"\ndim_ak = [2, 5]\ndim_dk = [6]\nseeds = [1]\n");
    let cfg = write_config(tmp.path(), &text);
    let out = tmp.path().join("runs");
    let r = mgkd(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(r.status.success(), "{}", stderr(&r));
    assert!(stderr(&r).contains("rejected"));
    let csv = fs::read_to_string(out.join("sweep/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    let summary = json(&out.join("sweep/summary.json"));
    assert_eq!(summary["rejected"].as_array().unwrap().len(), 1);
}
