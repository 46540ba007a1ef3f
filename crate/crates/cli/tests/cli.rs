use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

fn ridesub(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ridesub"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ridesub(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small_world(dir: &Path) {
    std::fs::write(dir.join("world.json"), r#"{"n_zones":3,"daily_query_volume":1500}"#).unwrap();
    std::fs::write(
        dir.join("train.json"),
        r#"{"epochs":2,"architecture":{"feature_hidden":[8],"head_hidden":4,"monotone_bias_init":-3}}"#,
    )
    .unwrap();
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_world(d);
    let s = ok(d, &["gen", "--config", "world.json", "--out", "obs.jsonl", "--n", "4000", "--policy", "observational"]);
    assert!(s.contains("\"records\":4000"));
    ok(d, &["gen", "--config", "world.json", "--out", "rct.jsonl", "--n", "3000", "--policy", "rct"]);
    ok(d, &["train", "--data", "obs.jsonl", "--out", "m.json", "--train-config", "train.json", "--log", "log.csv"]);
    assert!(std::fs::read_to_string(d.join("log.csv")).unwrap().starts_with("epoch,"));
    ok(d, &["eval", "--checkpoint", "m.json", "--data", "rct.jsonl", "--out", "metrics.json"]);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("metrics.json")).unwrap()).unwrap();
    for k in ["auc", "auuc", "qini"] {
        assert!(m[k].is_number(), "{k} missing");
    }
    ok(d, &["optimize", "--config", "world.json", "--checkpoint", "m.json", "--out", "dict.json"]);
    std::fs::write(d.join("h.json"), r#"{"history_days":7,"horizon_days":2,"bucket_width":6}"#).unwrap();
    let s = ok(
        d,
        &["simulate", "--config", "world.json", "--oracle", "--out-dir", "sim", "--horizon-config", "h.json"],
    );
    assert!(s.contains("subsidy_rate"));
    assert!(d.join("sim/report.json").exists() && d.join("sim/days.csv").exists());
    assert_eq!(std::fs::read_dir(d.join("sim/dictionaries")).unwrap().count(), 2);
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [&["bogus"][..], &["gen", "--nope"], &[]] {
        let out = ridesub(tmp.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    }
}

#[test]
fn config_errors_exit_1_with_one_json_line() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("bad.json"), "{not json").unwrap();
    for args in [
        &["gen", "--config", "bad.json", "--out", "x.jsonl"][..],
        &["simulate", "--oracle", "--out-dir", "s", "--target-rate", "1.5"],
        &["serve", "--dictionary", "missing.json", "--stdio"],
    ] {
        let out = ridesub(d, args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        let last = err.lines().last().unwrap();
        let v: serde_json::Value = serde_json::from_str(last).unwrap();
        assert!(v["error"].is_string() && v["message"].is_string());
    }
}

#[test]
fn environment_supplies_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_world(d);
    let out = Command::new(env!("CARGO_BIN_EXE_ridesub"))
        .current_dir(d)
        .env("RUST_LOG", "warn")
        .env("RIDESUB_WORLD", "world.json")
        .env("RIDESUB_DATA", "env.jsonl")
        .args(["gen", "--n", "100"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(std::fs::read_to_string(d.join("env.jsonl")).unwrap().lines().count(), 101);
}

fn write_dictionary(d: &Path) {
    std::fs::write(d.join("world.json"), r#"{"n_zones":2,"daily_query_volume":800}"#).unwrap();
    ok(d, &["optimize", "--config", "world.json", "--oracle", "--out", "dict.json", "--budget", "50"]);
}

#[test]
fn stdio_server_answers_each_line() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_dictionary(d);
    let mut child = Command::new(env!("CARGO_BIN_EXE_ridesub"))
        .current_dir(d)
        .env("RUST_LOG", "warn")
        .args(["serve", "--dictionary", "dict.json", "--stdio"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"{\"k\":0,\"origin\":0,\"dest\":1,\"time_bucket\":3}\nnot-json\n{\"k\":7,\"origin\":0,\"dest\":1,\"time_bucket\":3}\n{\"admin\":\"reload\"}\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    let lines: Vec<String> = String::from_utf8(out.stdout).unwrap().lines().map(String::from).collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("{\"amount\":") && !lines[0].contains("fallback"));
    assert_eq!(lines[1], r#"{"error":"bad_request"}"#);
    assert_eq!(lines[2], r#"{"amount":0.0,"fallback":true}"#);
    assert!(lines[3].starts_with(r#"{"reloaded":true"#));
}

#[test]
fn tcp_server_keeps_connection_after_bad_request() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_dictionary(d);
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let mut child = Command::new(env!("CARGO_BIN_EXE_ridesub"))
        .current_dir(d)
        .env("RUST_LOG", "warn")
        .args(["serve", "--dictionary", "dict.json", "--listen", &addr])
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(10);
    let stream = loop {
        match TcpStream::connect(&addr) {
            Ok(s) => break s,
            Err(_) if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(50)),
            Err(e) => panic!("server did not start: {e}"),
        }
    };
    let mut w = stream.try_clone().unwrap();
    let mut r = BufReader::new(stream);
    let mut ask = |req: &str| {
        w.write_all(req.as_bytes()).unwrap();
        w.write_all(b"\n").unwrap();
        let mut line = String::new();
        r.read_line(&mut line).unwrap();
        line.trim_end().to_string()
    };
    assert_eq!(ask("garbage"), r#"{"error":"bad_request"}"#);
    assert_eq!(ask(r#"{"k":9,"origin":0,"dest":0,"time_bucket":0}"#), r#"{"amount":0.0,"fallback":true}"#);
    child.kill().unwrap();
    child.wait().unwrap();
}
