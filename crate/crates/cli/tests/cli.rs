use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_pscsim");

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn pscsim(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("PSC_SIM_SEED").output().unwrap()
}

fn run_csv(scenario: &Path, until: &str, seed: Option<&str>, out: &Path) -> Output {
    let mut c = Command::new(BIN);
    c.args(["run", scenario.to_str().unwrap(), "--until", until, "--metrics", out.to_str().unwrap()]);
    match seed {
        Some(s) => c.env("PSC_SIM_SEED", s),
        None => c.env_remove("PSC_SIM_SEED"),
    };
    c.output().unwrap()
}

#[test]
fn run_writes_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("m.csv");
    let o = run_csv(&scenarios().join("booster.json"), "1", None, &csv);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t_ns,ps_id,I_set,I_read,V_out,R_load,status_bits,alarm"));
    // 1 ms sampling over 1 s, one supply.
    assert_eq!(lines.count(), 1001);
    assert!(String::from_utf8_lossy(&o.stdout).contains("1 supplies"));
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let sc = dir.path().join("noisy.json");
    std::fs::write(
        &sc,
        r#"{"ps_instances": [{"id": "C1", "class": "corrector", "initial_set": 1.0, "noise_sigma": 0.001}],
            "run": {"seed": 3, "metrics_period_ms": 1}}"#,
    )
    .unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert!(run_csv(&sc, "0.5", None, &a).status.success());
    assert!(run_csv(&sc, "0.5", None, &b).status.success());
    assert!(run_csv(&sc, "0.5", Some("4"), &c).status.success());
    let (a, b, c) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap(), std::fs::read(c).unwrap());
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let sc = dir.path().join("bad.json");
    std::fs::write(&sc, r#"{"ps_instances": [{"id": "X", "class": "warp_drive"}]}"#).unwrap();
    let o = pscsim(&["run", sc.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("warp_drive"));

    let o = pscsim(&["run", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    let o = Command::new(BIN)
        .args(["run", scenarios().join("broken_rx.json").to_str().unwrap(), "--until", "0.1"])
        .env("PSC_SIM_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn connection_refused_exit_3() {
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let o = pscsim(&["get", "X:I-SET", "--port", &port.to_string()]);
    assert_eq!(o.status.code(), Some(3));
}

struct Served(Child, String);

impl Drop for Served {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn serve(scenario: &str) -> Served {
    let mut child = Command::new(BIN)
        .args(["serve", scenarios().join(scenario).to_str().unwrap(), "--port", "0"])
        .env_remove("PSC_SIM_SEED")
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.split_whitespace().nth(2).unwrap().to_string();
    let port = addr.rsplit(':').next().unwrap().to_string();
    Served(child, port)
}

fn client(port: &str, args: &[&str]) -> Output {
    let mut a = args.to_vec();
    a.extend(["--port", port]);
    pscsim(&a)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).trim().to_string()
}

#[test]
fn client_commands_against_server() {
    let s = serve("ring_optics.json");
    let p = s.1.as_str();

    let o = client(p, &["get", "SR-Q01-01:MODE"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o), "\"on\"");

    let o = client(p, &["put", "QF01:I-SET", "50"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = client(p, &["get", "QF01:I-SET"]);
    assert_eq!(stdout(&o).parse::<f64>().unwrap(), 50.0);

    // Rejected writes exit 2 with the error code.
    let o = client(p, &["put", "SR-Q01-01:I-SET", "1e6"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("out_of_range"));
    let o = client(p, &["put", "SR-Q01-01:MODE", "sideways"]);
    assert_eq!(o.status.code(), Some(2));

    let o = client(
        p,
        &["ramp", "--members", "SR-Q02-01,SR-Q02-02", "--targets", "40,41", "--duration", "0.5"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("job"));

    let dir = tempfile::tempdir().unwrap();
    let rf = dir.path().join("ramp.json");
    std::fs::write(&rf, r#"{"members": ["SR-Q03-01"], "targets": [30.0], "duration": 0.3}"#).unwrap();
    let o = client(p, &["ramp", rf.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = client(p, &["cycle", "SR-S01-01"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = client(p, &["get", "SR-S01-01:RAMP-STATE"]);
    assert_eq!(stdout(&o), "\"cycling\"");

    // No feedback in this scenario.
    let o = client(p, &["feedback", "on"]);
    assert_eq!(o.status.code(), Some(2));

    let o = client(p, &["monitor", "SR-Q04-01:I-SET", "--count", "1"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("SR-Q04-01:I-SET"));
}

#[test]
fn feedback_switch() {
    let s = serve("orbit_feedback.json");
    let o = client(&s.1, &["feedback", "off"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = client(&s.1, &["get", "FB:STATUS"]);
    assert_eq!(stdout(&o), "\"disabled\"");
    let o = client(&s.1, &["feedback", "on"]);
    assert!(o.status.success());
    let o = client(&s.1, &["get", "FB:ENABLE"]);
    assert_eq!(stdout(&o), "true");
}

#[test]
fn serve_until_exits() {
    let o = Command::new(BIN)
        .args([
            "serve",
            scenarios().join("broken_rx.json").to_str().unwrap(),
            "--port",
            "0",
            "--pace",
            "max",
            "--until",
            "0.5",
        ])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("stopped at t=0.500"));
}
