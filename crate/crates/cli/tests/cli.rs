use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

const BLOBS: &str = r#"{"dataset": {"kind": "blobs", "classes": 3, "dim": 4, "per_class": 50, "seed": 3},
  "model": {"epochs": 4, "ensemble_size": 2, "hidden": [8]},
  "schedule": {"initial_budget": 9, "step_budget": 6, "rounds": 3}}"#;

fn daes(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_daes")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Metrics records with the wall-clock fields removed.
fn metrics(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|line| {
            let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
            let obj = v.as_object_mut().unwrap();
            obj.remove("train_seconds");
            obj.remove("select_seconds");
            v
        })
        .collect()
}

fn run(config: &Path, seed: &str, out: &Path, extra: &[&str]) {
    let mut args = vec!["run", "--config", config.to_str().unwrap(), "--seed", seed, "--metrics", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let result = daes(&args);
    assert!(result.status.success(), "{}", stderr(&result));
}

#[test]
fn run_is_reproducible_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "blobs.json", BLOBS);
    let (a, b, c) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"), dir.path().join("c.jsonl"));
    run(&config, "4", &a, &[]);
    run(&config, "4", &b, &[]);
    run(&config, "5", &c, &[]);
    let first = metrics(&a);
    assert_eq!(first.len(), 4);
    assert_eq!(first, metrics(&b));
    assert_ne!(first, metrics(&c));
    assert_eq!(first[3]["labeled"], 27);
}

#[test]
fn overrides_and_checkpointed_runs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "blobs.json", BLOBS);
    let plain = dir.path().join("plain.jsonl");
    let ckpt = dir.path().join("ckpt.jsonl");
    let extra = ["--strategy", "coreset", "--ensemble-size", "3", "--rounds", "2", "--retrain-mode", "incremental"];
    run(&config, "1", &plain, &extra);
    let mut with_ckpt = extra.to_vec();
    let state = dir.path().join("state");
    with_ckpt.extend(["--checkpoint", state.to_str().unwrap()]);
    run(&config, "1", &ckpt, &with_ckpt);
    let records = metrics(&plain);
    assert_eq!(records.len(), 3);
    assert!(records.iter().all(|r| r["strategy"] == "coreset"));
    assert_eq!(records, metrics(&ckpt));
    assert!(state.join("engine.json").exists());
    // A finished checkpoint resumes to completion without new rounds.
    run(&config, "1", &ckpt, &with_ckpt);
    assert_eq!(metrics(&ckpt).len(), 3);
}

#[test]
fn missing_seed_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "blobs.json", BLOBS);
    let out = daes(&["run", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--seed"));
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.json", &BLOBS.replace(r#""ensemble_size": 2"#, r#""ensemble_size": 0"#));
    let out = daes(&["run", "--config", bad.to_str().unwrap(), "--seed", "0"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("model.ensemble_size"), "{}", stderr(&out));
    let unknown = write(dir.path(), "unknown.json", &BLOBS.replace(r#""epochs""#, r#""epoch""#));
    let out = daes(&["run", "--config", unknown.to_str().unwrap(), "--seed", "0"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("epoch"), "{}", stderr(&out));
}

#[test]
fn bandit_writes_regret_curves() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("regret.csv");
    let result = daes(&["bandit", "--seeds", "2", "--steps", "20", "--ensemble-size", "5", "--out", out.to_str().unwrap()]);
    assert!(result.status.success(), "{}", stderr(&result));
    let mut reader = csv::Reader::from_path(&out).unwrap();
    assert_eq!(reader.headers().unwrap(), vec!["seed", "t", "regret_exact_ts", "regret_ensemble_5"]);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2 * 20 + 20);
    let means: Vec<&csv::StringRecord> = rows.iter().filter(|r| &r[0] == "mean").collect();
    assert_eq!(means.len(), 20);
    let regret: Vec<f64> = means.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(regret.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn report_summarizes_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "blobs.json", BLOBS);
    let metrics = dir.path().join("m.jsonl");
    run(&config, "0", &metrics, &[]);
    run(&config, "1", &metrics, &[]);
    let summary = dir.path().join("summary.csv");
    let out = daes(&["report", metrics.to_str().unwrap(), "--out", summary.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let mut reader = csv::Reader::from_path(&summary).unwrap();
    assert_eq!(reader.headers().unwrap(), vec!["round", "labeled_fraction", "accuracy_mean", "accuracy_std"]);
    assert_eq!(reader.records().count(), 4);
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn wait_until_up(port: u16) {
    let start = Instant::now();
    while std::net::TcpStream::connect(("127.0.0.1", port)).is_err() {
        assert!(start.elapsed() < Duration::from_secs(20), "server did not start");
        std::thread::sleep(Duration::from_millis(50));
    }
}

#[test]
fn session_commands_drive_a_live_server() {
    let dir = tempfile::tempdir().unwrap();
    let live = write(dir.path(), "live.json", &BLOBS.replacen('{', r#"{"oracle": "live", "#, 1));
    let port = free_port();
    let _server = Server(
        Command::new(env!("CARGO_BIN_EXE_daes"))
            .args(["serve", "--port", &port.to_string()])
            .env("RUST_LOG", "warn")
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );
    wait_until_up(port);
    let server = format!("http://127.0.0.1:{port}");
    let created = daes(&["session", "create", "--config", live.to_str().unwrap(), "--server", &server]);
    assert!(created.status.success(), "{}", stderr(&created));
    let id = String::from_utf8(created.stdout).unwrap().trim().to_owned();
    assert_eq!(id.len(), 32);

    let start = Instant::now();
    let batch = loop {
        let out = daes(&["session", "batch", &id, "--server", &server]);
        let text = String::from_utf8(out.stdout).unwrap();
        if text.starts_with("batch ") {
            break text;
        }
        assert!(start.elapsed() < Duration::from_secs(30), "no batch: {text}");
        std::thread::sleep(Duration::from_millis(50));
    };
    let mut lines = batch.lines();
    let batch_id = lines.next().unwrap().split_whitespace().nth(1).unwrap().to_owned();
    let pairs: Vec<String> = lines.map(|l| format!("{}=0", l.split_whitespace().next().unwrap())).collect();
    assert_eq!(pairs.len(), 6);
    let mut args = vec!["session", "label", id.as_str(), "--batch-id", batch_id.as_str(), "--server", server.as_str()];
    args.extend(pairs.iter().map(String::as_str));
    let labeled = daes(&args);
    assert!(labeled.status.success(), "{}", stderr(&labeled));
    let summary: serde_json::Value = serde_json::from_slice(&labeled.stdout).unwrap();
    assert_eq!(summary["labeled"], 15);

    let stale = daes(&args);
    assert!(!stale.status.success());

    let status = daes(&["session", "status", &id, "--server", &server]);
    let status: serde_json::Value = serde_json::from_slice(&status.stdout).unwrap();
    assert_eq!(status["labeled"], 15);
    let missing = daes(&["session", "status", "nope", "--server", &server]);
    assert!(!missing.status.success());
    assert!(stderr(&missing).contains("404"), "{}", stderr(&missing));
}
