//! End-to-end runs of the `qsieve` binary in temporary directories.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn qsieve(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qsieve"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("run qsieve")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Ten disks of radius R/2 with centres 2R apart: the R-sparse chain.
fn rsparse_config(r: f64, n: usize) -> String {
    let disks: Vec<String> = (0..n)
        .map(|k| {
            let cx = (2.0 * k as f64 - (n as f64 - 1.0)) * r;
            format!(r#"{{"cx":{cx},"cy":0,"r":{}}}"#, r / 2.0)
        })
        .collect();
    format!(
        r#"{{"omega":{{"grid":{{"L":3,"h":0.01}},"disks":[{}]}},"radii":[{r}],"p":1,"alphas":[]}}"#,
        disks.join(",")
    )
}

#[test]
fn bounds_table_for_the_sparse_chain() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("b.json"), rsparse_config(0.1, 10)).unwrap();
    let out = qsieve(dir.path(), &["bounds", "--config", "b.json", "--out", "res"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("res/bounds.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "method,R,value,certificate");
    let doc = json(&dir.path().join("res/bounds.json"));
    let rows = doc["rows"].as_array().unwrap();
    let value = |m: &str| {
        rows.iter()
            .find(|r| r["method"] == m)
            .unwrap_or_else(|| panic!("no {m} row"))["value"]
            .as_f64()
            .unwrap()
    };
    let q = PI * 0.01;
    let rfk = 2.0 * (1.0 - (-q / 8.0).exp()) / (1.0 - (-q).exp());
    let fk = 1.0 - (-10.0 * q / 8.0).exp();
    assert!((value("RFK") - rfk).abs() < 1e-9, "{}", value("RFK"));
    assert!((value("FaberKrahn") - fk).abs() < 1e-9);
    assert!(value("RFK") < 0.5);
    for r in rows {
        for key in ["method", "value", "certificate", "params"] {
            assert!(r.get(key).is_some(), "row lacks {key}");
        }
    }
}

#[test]
fn nyquist_sweep_on_a_disk() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("n.json"),
        r#"{"omega":{"grid":{"L":3,"h":0.02},"disks":[{"cx":0,"cy":0,"r":1}]},"radii":[0.25,0.5,2.0]}"#,
    )
    .unwrap();
    let out = qsieve(dir.path(), &["nyquist", "--config", "n.json"]);
    assert!(out.status.success());
    let csv = fs::read_to_string(dir.path().join("nyquist.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "R,nu,argmax_x,argmax_y,error_bar");
    for line in lines {
        let v: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        let want = PI * v[0].min(1.0).powi(2);
        assert!((v[1] - want).abs() < 1e-9, "{line}");
    }
}

#[test]
fn locop_spectrum_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let r = (1.0 / PI).sqrt();
    fs::write(
        dir.path().join("l.json"),
        format!(r#"{{"omega":{{"grid":{{"L":3,"h":0.02}},"disks":[{{"cx":0,"cy":0,"r":{r}}}]}},"M":12}}"#),
    )
    .unwrap();
    let out = qsieve(dir.path(), &["locop", "--config", "l.json"]);
    assert!(out.status.success());
    let doc = json(&dir.path().join("locop.json"));
    let l1 = doc["lambda1"].as_f64().unwrap();
    assert!((l1 - (1.0 - (-1.0f64).exp())).abs() < 1e-4);
    let csv = fs::read_to_string(dir.path().join("spectrum.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
}

#[test]
fn fields_then_recover_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("f.json"),
        r#"{"grid":{"L":4,"h":0.1},"gamma":{"lambda":[1]},"rho":{"random":{"m":3,"rank":1,"positive":true}},"f":[1,[0,1]]}"#,
    )
    .unwrap();
    let out = qsieve(dir.path(), &["fields", "--config", "f.json", "--seed", "7"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["hs_norm.csv", "husimi.csv", "cohen.csv", "field.bin", "fields.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let nodes = 80 * 80;
    let len = fs::metadata(dir.path().join("field.bin")).unwrap().len() as usize;
    assert_eq!(len, nodes * (8 + 16 * 3));
    let summary = json(&dir.path().join("fields.json"));
    assert!(summary["moyal_defect"].as_f64().unwrap() < 1e-8);

    // small Ω: certified, exact data, converges
    fs::write(
        dir.path().join("p.json"),
        r#"{"variant":"missing","gamma":{"lambda":[1]},"omega":{"grid":{"L":4,"h":0.1},"disks":[{"cx":0.5,"cy":0,"r":0.3}]},"epsilon":0,"observed":"field.bin"}"#,
    )
    .unwrap();
    let out = qsieve(dir.path(), &["recover", "--config", "p.json", "--out", "ok", "--strict"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rep = json(&dir.path().join("ok/report.json"));
    assert_eq!(rep["report"]["certified"], true);
    assert_eq!(rep["report"]["converged"], true);

    // large Ω: certificate fails, strict mode exits 4
    fs::write(
        dir.path().join("q.json"),
        r#"{"variant":"logan","gamma":{"lambda":[1]},"omega":{"grid":{"L":4,"h":0.1},"disks":[{"cx":0,"cy":0,"r":1.5}]},"epsilon":0,"observed":"field.bin"}"#,
    )
    .unwrap();
    let out = qsieve(dir.path(), &["recover", "--config", "q.json", "--out", "bad", "--strict"]);
    assert_eq!(out.status.code(), Some(4));
    let out = qsieve(dir.path(), &["recover", "--config", "q.json", "--out", "bad"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn output_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("f.json"),
        r#"{"grid":{"L":3,"h":0.1},"gamma":{"lambda":[1,1],"normalize":true},"rho":{"random":{"m":4,"rank":2}}}"#,
    )
    .unwrap();
    for o in ["a", "b"] {
        assert!(qsieve(dir.path(), &["fields", "--config", "f.json", "--out", o]).status.success());
    }
    for f in ["hs_norm.csv", "field.bin", "fields.json"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between runs");
    }
}

#[test]
fn errors_are_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = qsieve(dir.path(), &["bounds"]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "invalid_config");

    fs::write(dir.path().join("w.json"), r#"{"omega":{"grid":{"L":2,"h":0.1},"disks":[{"cx":1.9,"cy":0,"r":0.5}]}}"#)
        .unwrap();
    let out = qsieve(dir.path(), &["nyquist", "--config", "w.json"]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "out_of_window");

    fs::write(dir.path().join("t.json"), r#"{"omega":{"disks":[{"cx":0,"cy":0,"r":0.5}]},"M":500}"#)
        .unwrap();
    let out = qsieve(dir.path(), &["locop", "--config", "t.json", "--grid-L", "2", "--grid-h", "0.1"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    let out = qsieve(dir.path(), &["reproduce", "--only", "11"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn reproduce_single_criterion() {
    let dir = tempfile::tempdir().unwrap();
    let out = qsieve(dir.path(), &["reproduce", "--only", "1"]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("criterion  1 [closed-form constants]: PASS"), "{stdout}");
    let doc = json(&dir.path().join("acceptance.json"));
    assert_eq!(doc[0]["passed"], true);
}
