use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};

fn reconv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reconv")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn free_addr() -> String {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    l.local_addr().unwrap().to_string()
}

fn write_model(dir: &Path, name: &str, net_seed: u64) -> (String, String) {
    let m = dir.join(format!("{name}.toml")).display().to_string();
    let w = dir.join(format!("{name}.bin")).display().to_string();
    let o = reconv(&["demo-model", "--model", &m, "--weights", &w, "--net-seed", &net_seed.to_string()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    (m, w)
}

fn class_line(o: &Output) -> String {
    stdout(o).lines().find(|l| l.starts_with("class ")).unwrap_or_default().to_string()
}

#[test]
fn loopback_demo_prints_a_class() {
    let o = reconv(&["client", "--transport", "loopback", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.starts_with("class "), "{out}");
    assert!(out.contains("ReConv") && out.contains("tArgMax"));
}

#[test]
fn same_seed_same_output() {
    let args = ["client", "--transport", "loopback", "--seed", "11"];
    let (a, b) = (reconv(&args), reconv(&args));
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn tcp_run_matches_loopback() {
    let dir = tempfile::tempdir().unwrap();
    let (m, w) = write_model(dir.path(), "net", 7);
    let addr = free_addr();
    let server = {
        let (m, w, addr) = (m.clone(), w.clone(), addr.clone());
        std::thread::spawn(move || {
            reconv(&["server", "--model", &m, "--weights", &w, "--listen", &addr, "--phe", "counting", "--seed", "5"])
        })
    };
    let client = reconv(&["client", "--model", &m, "--connect", &addr, "--phe", "counting", "--seed", "5"]);
    let server = server.join().unwrap();
    assert_eq!(client.status.code(), Some(0), "{}", String::from_utf8_lossy(&client.stderr));
    assert_eq!(server.status.code(), Some(0), "{}", String::from_utf8_lossy(&server.stderr));
    assert!(!stdout(&server).contains("class "));
    let local = reconv(&["client", "--model", &m, "--weights", &w, "--transport", "loopback", "--phe", "counting", "--seed", "5"]);
    assert_eq!(class_line(&client), class_line(&local));
}

#[test]
fn different_models_abort_the_handshake() {
    let dir = tempfile::tempdir().unwrap();
    let (ma, wa) = write_model(dir.path(), "a", 7);
    let (mb, _) = write_model(dir.path(), "b", 8);
    let addr = free_addr();
    let server = {
        let addr = addr.clone();
        std::thread::spawn(move || reconv(&["server", "--model", &ma, "--weights", &wa, "--listen", &addr, "--phe", "counting"]))
    };
    let client = reconv(&["client", "--model", &mb, "--connect", &addr, "--phe", "counting"]);
    let server = server.join().unwrap();
    assert_eq!(server.status.code(), Some(3));
    assert_ne!(client.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&server.stderr).contains("digest mismatch"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(reconv(&["bench", "--preset", "t3r9"]).status.code(), Some(2));
    assert_eq!(reconv(&["client", "--compare", "ideal"]).status.code(), Some(2));
    assert_eq!(reconv(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn bad_parameters_exit_4() {
    assert_eq!(reconv(&["client", "--transport", "loopback", "--p", "1000"]).status.code(), Some(4));
}

#[test]
fn verify_passes_and_catches_a_fault() {
    let ok = reconv(&["verify", "--phe", "counting", "--compare", "ot", "--seed", "2", "--trials", "2"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    assert!(stdout(&ok).lines().all(|l| !l.starts_with("FAIL")));
    let bad = reconv(&["verify", "--phe", "counting", "--seed", "2", "--inject-fault"]);
    assert_eq!(bad.status.code(), Some(5));
    assert!(stdout(&bad).contains("FAIL blocks match the oracle"));
}

#[test]
fn bench_counts_match() {
    let text = reconv(&["bench", "--preset", "t3r1"]);
    assert_eq!(text.status.code(), Some(0));
    assert!(!stdout(&text).contains("MISMATCH"));
    let csv = reconv(&["bench", "--preset", "t3r1", "--csv"]);
    let out = stdout(&csv);
    assert!(out.starts_with("preset,form,block,kind,source,"));
    assert!(out.lines().any(|l| l.starts_with("t3r1,after-relu,1,ReConv,measured,")));
}
