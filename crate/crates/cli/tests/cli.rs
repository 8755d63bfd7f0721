use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_leakmem");

fn default_config() -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json");
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn short_config(dir: &Path, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut cfg = default_config();
    cfg["train"]["steps"] = 30.into();
    cfg["train"]["batch_size"] = 4.into();
    cfg["train"]["eval_every"] = 10.into();
    cfg["train"]["heldout_pairs"] = 8.into();
    cfg["eval"]["probe_samples"] = 700.into();
    cfg["eval"]["pairs"] = 40.into();
    edit(&mut cfg);
    let path = dir.join("config.in.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn run(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env_remove("LEAKMEM_SEED");
    if let Some(s) = seed {
        cmd.env("LEAKMEM_SEED", s);
    }
    cmd.output().unwrap()
}

fn train(config: &Path, out: &Path, seed: Option<&str>) -> Output {
    run(
        &["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()],
        seed,
    )
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn trained(dir: &Path, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let cfg = short_config(dir, edit);
    let out = dir.join("run");
    let o = train(&cfg, &out, None);
    assert!(o.status.success(), "{}", stderr(&o));
    out.join("model.ckpt")
}

#[test]
fn train_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path(), |_| {});
    let run = ckpt.parent().unwrap();
    for f in ["metrics.jsonl", "alignment.jsonl", "config.json", "model.ckpt"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 30);
    let first: Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for key in ["step", "L_rec", "L_adv", "L_dis", "L_dmem", "L_align", "total"] {
        assert!(first.get(key).is_some(), "{key}");
    }
}

#[test]
fn rerun_with_same_seed_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path(), |_| {});
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train(&cfg, &a, None).status.success());
    assert!(train(&cfg, &b, None).status.success());
    for f in ["metrics.jsonl", "alignment.jsonl", "config.json", "model.ckpt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_variable_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path(), |_| {});
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train(&cfg, &a, None).status.success());
    assert!(train(&cfg, &b, Some("99")).status.success());
    let snap: Value = serde_json::from_str(&fs::read_to_string(b.join("config.json")).unwrap()).unwrap();
    assert_eq!(snap["train"]["seed"], 99);
    assert_ne!(
        fs::read(a.join("metrics.jsonl")).unwrap(),
        fs::read(b.join("metrics.jsonl")).unwrap()
    );
    let bad = train(&cfg, &dir.path().join("c"), Some("abc"));
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn missing_field_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path(), |c| {
        c["train"].as_object_mut().unwrap().remove("batch_size");
    });
    let o = train(&cfg, &dir.path().join("r"), None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("batch_size"), "{}", stderr(&o));
}

#[test]
fn invalid_value_exits_2_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path(), |c| c["train"]["weights"]["dis"] = (-1.0).into());
    let o = train(&cfg, &dir.path().join("r"), None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.weights.dis"), "{}", stderr(&o));
}

#[test]
fn probe_writes_five_row_csvs_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path(), |_| {});
    let run = ckpt.parent().unwrap();
    for setting in ["self", "cross"] {
        let args = ["probe", "--ckpt", ckpt.to_str().unwrap(), "--setting", setting];
        let first = run_ok(&args);
        let csv = fs::read_to_string(run.join(format!("probe_{setting}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 6, "{csv}");
        assert!(csv.lines().skip(1).all(|l| l.starts_with(setting)));
        let json: Value =
            serde_json::from_str(&fs::read_to_string(run.join(format!("probe_{setting}.json"))).unwrap())
                .unwrap();
        assert_eq!(json["scales"].as_array().unwrap().len(), 5);
        let second = run_ok(&args);
        assert_eq!(first.stdout, second.stdout);
        assert_eq!(csv, fs::read_to_string(run.join(format!("probe_{setting}.csv"))).unwrap());
    }
}

fn run_ok(args: &[&str]) -> Output {
    let o = run(args, None);
    assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    o
}

#[test]
fn truncated_checkpoint_exits_4_with_byte_counts() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path(), |_| {});
    let bytes = fs::read(&ckpt).unwrap();
    let cut = dir.path().join("cut.ckpt");
    fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
    let o = run(&["probe", "--ckpt", cut.to_str().unwrap(), "--setting", "self"], None);
    assert_eq!(o.status.code(), Some(4));
    let msg = stderr(&o);
    assert!(msg.contains("expected") && msg.contains("found"), "{msg}");
}

#[test]
fn version_mismatch_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path(), |_| {});
    let bytes = fs::read(&ckpt).unwrap();
    let h = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header = std::str::from_utf8(&bytes[16..16 + h]).unwrap();
    let patched = header.replacen("\"format_version\":1", "\"format_version\":2", 1);
    let mut out = bytes[..8].to_vec();
    out.extend_from_slice(&(patched.len() as u64).to_le_bytes());
    out.extend_from_slice(patched.as_bytes());
    out.extend_from_slice(&bytes[16 + h..]);
    let bad = dir.path().join("v2.ckpt");
    fs::write(&bad, out).unwrap();
    let o = run(&["eval", "--ckpt", bad.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn memory_inspect_needs_the_detail_indicator() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path(), |c| c["train"]["flags"]["edi_on"] = false.into());
    let o = run(&["memory-inspect", "--ckpt", ckpt.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("detail indicator"), "{}", stderr(&o));
}

#[test]
fn memory_inspect_reports_bank_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path(), |_| {});
    let o = run_ok(&["memory-inspect", "--ckpt", ckpt.to_str().unwrap()]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["driven"]["slot_norms"].as_array().unwrap().len(), 64);
    assert!(v["driven"]["min_norm"].as_f64().unwrap() >= 1e-6);
    assert!(v["motion_source"]["min_norm"].as_f64().unwrap() >= 1e-6);
    assert!(v["usage_entropy_driven"].as_f64().unwrap() <= v["max_entropy"].as_f64().unwrap() + 1e-12);
}

#[test]
fn eval_reports_every_metric() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path(), |_| {});
    let o = run_ok(&["eval", "--ckpt", ckpt.to_str().unwrap()]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    for key in [
        "motion_leakage_r2",
        "rec_error_self",
        "rec_error_cross",
        "dominant_scale",
        "alignment_kl",
        "retrieval_fidelity",
    ] {
        assert!(v.get(key).is_some(), "{key}");
    }
}

#[test]
fn gradcheck_passes_and_is_json() {
    let o = run_ok(&["gradcheck"]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["passed"], true);
    assert!(v["results"].as_array().unwrap().iter().all(|r| r["probes"] == 100));
}

#[test]
fn undersized_probe_budget_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path(), |c| c["eval"]["probe_samples"] = 100.into());
    let o = train(&cfg, &dir.path().join("r"), None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("eval.probe_samples"), "{}", stderr(&o));
}

#[test]
fn unknown_setting_is_rejected() {
    let o = run(&["probe", "--ckpt", "x.ckpt", "--setting", "sideways"], None);
    assert!(!o.status.success());
}
