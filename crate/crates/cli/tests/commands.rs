use std::path::Path;
use std::process::{Command, Output};

fn qcert(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qcert")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, value: &serde_json::Value) -> String {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_vec_pretty(value).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn certify_flags_and_config() {
    let out = qcert(&[
        "certify",
        "--f-i",
        "0.9943",
        "--eps",
        "0.0142",
        "--k",
        "1000000000",
        "--eta-s",
        "0.473",
        "--lambda-c",
        "0.526",
        "--x",
        "7",
    ]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let f = v["certified_fidelity"].as_f64().unwrap();
    assert!((0.75..=0.79).contains(&f));

    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        &serde_json::json!({"F_i": 0.9943, "eps": 0.0142, "K": 1000000000u64, "eta_s": 0.473, "lambda_c": 0.526, "x": 7.0}),
    );
    let from_file = qcert(&["certify", "--config", &cfg]);
    assert_eq!(from_file.stdout, out.stdout);
    let overridden = qcert(&["certify", "--config", &cfg, "--lambda-c", "0"]);
    let v: serde_json::Value = serde_json::from_slice(&overridden.stdout).unwrap();
    assert!(v["certified_fidelity"].as_f64().unwrap() < f);

    let missing = qcert(&["certify", "--eps", "0.01"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn simulate_writes_transcript_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "sim.json",
        &serde_json::json!({
            "probe": {"kind": "werner", "visibility": 0.98},
            "params": {"K": 2000, "t_min": 0.5, "x": 7.0},
            "strategy": {"kind": "honest", "channel": {"kind": "uniform_loss", "loss": 0.5}}
        }),
    );
    let transcript = dir.path().join("t.jsonl");
    let summary = dir.path().join("s.csv");
    let run = |seed: &str| {
        qcert(&[
            "simulate",
            "--seed",
            seed,
            "--config",
            &cfg,
            "--transcript",
            transcript.to_str().unwrap(),
            "--summary",
            summary.to_str().unwrap(),
        ])
    };
    let out = run("4");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&transcript).unwrap();
    let mut lines = text.lines();
    let header: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert_eq!(header["seed"], 4);
    assert_eq!(header["N"], 4000);
    assert_eq!(lines.count(), 4001);
    let csv = std::fs::read_to_string(&summary).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "seed,N,K,eta_s_hat,beta_hat,eps_hat,aborted,certified_fidelity,confidence"
    );
    let first = std::fs::read(&transcript).unwrap();
    assert_eq!(run("4").stdout, out.stdout);
    assert_eq!(std::fs::read(&transcript).unwrap(), first);
    assert_eq!(qcert(&["simulate", "--config", &cfg]).status.code(), Some(1));
}

#[test]
fn figure_to_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.csv");
    assert!(qcert(&["figure", "staterr_curve", "--out", path.to_str().unwrap()])
        .status
        .success());
    let text = std::fs::read_to_string(path).unwrap();
    assert!(text.starts_with("R,K,delta,tau,Delta\n"));
    assert!(!qcert(&["figure", "nonexistent"]).status.success());
}

#[test]
fn tomo_demo_reports_fidelity() {
    let out = qcert(&["tomo", "demo", "--trials", "4", "--shots", "20000"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["matrix"].as_array().unwrap().len(), 4);
    assert!(v["F_i"].as_f64().unwrap() > 0.98);
    assert!(v["fidelity_to_truth"].as_f64().unwrap() > 0.98);
}

fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port()
}

fn run_pair(config: &serde_json::Value) -> (Output, Output) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "runner.json", config);
    let addr = format!("127.0.0.1:{}", free_port());
    let alice = Command::new(env!("CARGO_BIN_EXE_qcert"))
        .args(["runner", "alice", "--listen", &addr, "--config", &cfg])
        .stdout(std::process::Stdio::piped())
        .stderr(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let bob = qcert(&["runner", "bob", "--connect", &addr, "--config", &cfg]);
    (alice.wait_with_output().unwrap(), bob)
}

#[test]
fn runner_exit_codes() {
    let mut config = serde_json::json!({
        "session": {"session_id": "cli", "shared_seed": 21, "F_i": 0.99, "K": 3000, "t_min": 1.0, "x": 7.0},
        "probe": {"kind": "werner", "visibility": 1.0}
    });
    let (alice, bob) = run_pair(&config);
    assert_eq!(
        alice.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&alice.stderr)
    );
    assert_eq!(bob.status.code(), Some(0), "{}", String::from_utf8_lossy(&bob.stderr));

    config["strategy"] = serde_json::json!({"kind": "honest", "channel": {"kind": "uniform_loss", "loss": 1.0}});
    let (alice, bob) = run_pair(&config);
    assert_eq!(alice.status.code(), Some(2));
    assert_eq!(bob.status.code(), Some(2));
}
