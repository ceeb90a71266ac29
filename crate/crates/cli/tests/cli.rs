use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_llatte-lab"));
    c.env("LLATTE_LAB_THREADS", "2");
    c
}

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.json")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn llatte-lab")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn error_line(o: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&o.stderr);
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "expected one stderr line, got {stderr}");
    serde_json::from_str(lines[0]).expect("error line is JSON")
}

fn dir_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

fn write_config(dir: &Path, patch: impl FnOnce(&mut Value)) -> PathBuf {
    let mut v: Value = serde_json::from_str(&fs::read_to_string(tiny_config()).unwrap()).unwrap();
    patch(&mut v);
    let p = dir.join("cfg.json");
    fs::write(&p, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    p
}

#[test]
fn unknown_key_exits_3_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), |v| {
        v["train"]["lr_scheduel"] = Value::from("cosine");
    });
    let out = tmp.path().join("out");
    let o = run(&["generate", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    let err = error_line(&o);
    assert_eq!(err["code"], 3);
    assert!(err["message"].as_str().unwrap().contains("lr_scheduel"), "{err}");
    assert!(!out.exists(), "nothing is written on a parse error");
}

#[test]
fn missing_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&[
        "generate",
        "--config",
        s(&tmp.path().join("nope.json")),
        "--out",
        s(&tmp.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["error"], "missing_file");
}

#[test]
fn invariant_violation_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), |v| {
        v["experiment"]["seeds"] = serde_json::json!([0, 1]);
    });
    let o = run(&["generate", "--config", s(&cfg), "--out", s(&tmp.path().join("out"))]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(error_line(&o)["error"], "invariant_violation");
}

#[test]
fn generate_train_probe_pipeline_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let data = tmp.path().join("data");
    assert_ok(&run(&["generate", "--config", s(&cfg), "--out", s(&data)]));
    for f in ["config.json", "train.jsonl", "eval.jsonl", "summary.json"] {
        assert!(data.join(f).is_file(), "{f}");
    }

    let train_a = tmp.path().join("train_a");
    let train_b = tmp.path().join("train_b");
    for out in [&train_a, &train_b] {
        assert_ok(&run(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(out)]));
    }
    assert_eq!(dir_files(&train_a), dir_files(&train_b));
    let log = fs::read_to_string(train_a.join("train_log.csv")).unwrap();
    assert!(log.lines().count() >= 3, "{log}");

    let probe = tmp.path().join("probe");
    assert_ok(&run(&[
        "attn-probe",
        "--config",
        s(&cfg),
        "--weights",
        s(&train_a.join("weights.json")),
        "--out",
        s(&probe),
        "--examples",
        "8",
    ]));
    let hourly = fs::read_to_string(probe.join("attention_hourly_layer0.csv")).unwrap();
    assert_eq!(hourly.lines().next(), Some("bucket_hours,total_mass,mean_mass_per_event"));
    let mass = fs::read_to_string(probe.join("attention_mass_layer0.csv")).unwrap();
    assert_eq!(mass.lines().next(), Some("k,recent_mass,topk_mass"));
    let summary: Value = serde_json::from_str(&fs::read_to_string(probe.join("probe_summary.json")).unwrap()).unwrap();
    assert!(summary[0]["max_row_sum_error"].as_f64().unwrap() < 1e-6);

    let o = run(&[
        "attn-probe",
        "--config",
        s(&cfg),
        "--weights",
        s(&tmp.path().join("absent.json")),
        "--out",
        s(&tmp.path().join("p2")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seq_length_scale_rows_and_rerun_from_echo() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("scale");
    assert_ok(&run(&[
        "scale",
        "--config",
        s(&tiny_config()),
        "--axis",
        "seq-length",
        "--out",
        s(&out),
        "--jobs",
        "2",
    ]));
    let runs = fs::read_to_string(out.join("runs.csv")).unwrap();
    let mut lines = runs.lines();
    assert_eq!(
        lines.next(),
        Some("config_id,seed,L,d,T,content,c_seq,c_full,ne_ctr,ne_cvr,delta_ne_pct,error")
    );
    let mut cells: Vec<(String, String)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[4].to_string(), f[1].to_string())
        })
        .collect();
    assert_eq!(cells.len(), 9, "{runs}");
    cells.sort();
    cells.dedup();
    assert_eq!(cells.len(), 9, "one row per (T, seed)");

    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 4);
    let fit: Value = serde_json::from_str(&fs::read_to_string(out.join("fit.json")).unwrap()).unwrap();
    assert_eq!(fit["axis"], "seq_length");
    assert!(fit.get("alpha").is_some());
    assert!(out.join("curves.csv").is_file());
    assert!(out.join("table.txt").is_file());

    let again = tmp.path().join("again");
    assert_ok(&run(&[
        "scale",
        "--config",
        s(&out.join("config.json")),
        "--out",
        s(&again),
        "--jobs",
        "1",
    ]));
    assert_eq!(dir_files(&out), dir_files(&again));
}

#[test]
fn multistage_writes_report_and_log() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ms");
    let o = run(&["multistage", "--config", s(&tiny_config()), "--out", s(&out)]);
    assert_ok(&o);
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    for key in ["ne_up", "ne_down", "ne_down_baseline", "tau_pct", "seq_flops_up", "seq_flops_down", "flops_ratio"] {
        assert!(report.get(key).is_some(), "{key}");
    }
    let log = fs::read_to_string(out.join("update_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("user_id,trigger_time,event_type"));
    assert!(log.lines().skip(1).all(|l| l.ends_with(",click") || l.ends_with(",conversion")));
}

#[test]
fn bad_arguments_are_parse_errors() {
    let o = run(&["scale", "--bogus"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_line(&o)["error"], "parse_error");
}
