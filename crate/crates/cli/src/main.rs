//! `pscsim`: run scenarios, serve them over the network, and talk to a
//! running server.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime error (including
//! a rejected request), 3 connection failure.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use psc_server::{Options, Pace, Server};
use psc_sim::protocol::{Reply, Request};
use psc_sim::scenario::Scenario;
use psc_sim::sim::{ns_to_secs, secs_to_ns};
use psc_sim::world::World;
use serde_json::{json, Value};

const SEED_ENV: &str = "PSC_SIM_SEED";

#[derive(Parser)]
#[command(name = "pscsim", version, about = "Magnet power-supply control simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Conn {
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 7070)]
    port: u16,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario in virtual time as fast as possible.
    Run {
        scenario: PathBuf,
        /// Stop time in seconds; defaults to the scenario's.
        #[arg(long)]
        until: Option<f64>,
        /// Write the metrics CSV here.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Serve a scenario over TCP and WebSocket.
    Serve {
        scenario: PathBuf,
        #[arg(long, default_value_t = 7070)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        /// Virtual:wall time ratio such as 1:1 or 10:1, or "max".
        #[arg(long, default_value = "1:1")]
        pace: String,
        /// Stop after this many virtual seconds; serves until killed otherwise.
        #[arg(long)]
        until: Option<f64>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Read a channel.
    Get {
        name: String,
        #[command(flatten)]
        conn: Conn,
    },
    /// Write a channel. The value is parsed as JSON, or taken as a string.
    Put {
        name: String,
        value: String,
        #[command(flatten)]
        conn: Conn,
    },
    /// Print updates of a channel.
    Monitor {
        name: String,
        /// Stop after this many updates.
        #[arg(long)]
        count: Option<usize>,
        #[command(flatten)]
        conn: Conn,
    },
    /// Standardize a supply or family.
    Cycle {
        device: String,
        #[command(flatten)]
        conn: Conn,
    },
    /// Start a synchronized ramp from a JSON file
    /// ({"members": [...], "targets": [...], "duration": s}) or from flags.
    Ramp {
        #[arg(required_unless_present = "members", conflicts_with_all = ["members", "targets", "duration"])]
        file: Option<PathBuf>,
        /// Comma-separated supply ids.
        #[arg(long, value_delimiter = ',', requires_all = ["targets", "duration"])]
        members: Vec<String>,
        /// Comma-separated target currents, one per member.
        #[arg(long, value_delimiter = ',')]
        targets: Vec<f64>,
        /// Seconds.
        #[arg(long)]
        duration: Option<f64>,
        #[command(flatten)]
        conn: Conn,
    },
    /// Switch the orbit feedback on or off.
    Feedback {
        #[arg(value_parser = ["on", "off"])]
        state: String,
        #[command(flatten)]
        conn: Conn,
    },
}

enum Fail {
    Config(String),
    Runtime(String),
    Connection(String),
}

impl Fail {
    fn code(&self) -> u8 {
        match self {
            Fail::Config(_) => 1,
            Fail::Runtime(_) => 2,
            Fail::Connection(_) => 3,
        }
    }

    fn msg(&self) -> &str {
        match self {
            Fail::Config(m) | Fail::Runtime(m) | Fail::Connection(m) => m,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("pscsim: {}", f.msg());
            ExitCode::from(f.code())
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), Fail> {
    match cmd {
        Cmd::Run { scenario, until, metrics } => run(&scenario, until, metrics),
        Cmd::Serve {
            scenario,
            port,
            bind,
            pace,
            until,
            metrics,
        } => serve(&scenario, port, bind, &pace, until, metrics),
        Cmd::Get { name, conn } => print_reply(request(&conn, Request::get(&name, 1))?),
        Cmd::Put { name, value, conn } => {
            let v = serde_json::from_str(&value).unwrap_or(Value::String(value));
            print_reply(request(&conn, Request::put(&name, v, 1))?)
        }
        Cmd::Monitor { name, count, conn } => monitor(&conn, &name, count),
        Cmd::Cycle { device, conn } => {
            print_reply(request(&conn, Request::put(&format!("{device}:CYCLE-CMD"), json!(true), 1))?)
        }
        Cmd::Ramp {
            file,
            members,
            targets,
            duration,
            conn,
        } => {
            let body = match file {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)
                        .map_err(|e| Fail::Config(format!("{}: {e}", p.display())))?;
                    serde_json::from_str(&text).map_err(|e| Fail::Config(format!("{}: {e}", p.display())))?
                }
                None => json!({"members": members, "targets": targets, "duration": duration}),
            };
            print_reply(request(&conn, Request::put("MACHINE:RAMP", body, 1))?)
        }
        Cmd::Feedback { state, conn } => {
            print_reply(request(&conn, Request::put("FB:ENABLE", json!(state == "on"), 1))?)
        }
    }
}

/// Loads a scenario and builds its world, applying the seed override and
/// the metrics destination.
fn load(path: &Path, metrics: Option<PathBuf>) -> Result<(Scenario, World), Fail> {
    let mut sc = Scenario::load(path).map_err(|e| Fail::Config(e.to_string()))?;
    if let Ok(s) = std::env::var(SEED_ENV) {
        let seed = s
            .trim()
            .parse()
            .map_err(|_| Fail::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        sc.run.seed = Some(seed);
    }
    let mut world = World::from_scenario(&sc).map_err(|e| Fail::Config(e.to_string()))?;
    let out = metrics.or_else(|| sc.run.metrics_path.as_deref().map(|p| sc.resolve_path(p)));
    if let Some(p) = out {
        let f = File::create(&p).map_err(|e| Fail::Config(format!("{}: {e}", p.display())))?;
        world
            .metrics
            .stream_to(Box::new(BufWriter::new(f)))
            .map_err(|e| Fail::Runtime(e.to_string()))?;
    }
    Ok((sc, world))
}

fn check_until(until: f64) -> Result<u64, Fail> {
    if until.is_finite() && until > 0.0 {
        Ok(secs_to_ns(until))
    } else {
        Err(Fail::Config(format!("--until must be positive, got {until}")))
    }
}

fn run(path: &Path, until: Option<f64>, metrics: Option<PathBuf>) -> Result<(), Fail> {
    let (sc, mut world) = load(path, metrics)?;
    let t_end = check_until(until.unwrap_or(sc.run.until))?;
    let wall = std::time::Instant::now();
    world.run_until(t_end).map_err(|e| Fail::Runtime(e.to_string()))?;
    world.metrics.flush().map_err(|e| Fail::Runtime(e.to_string()))?;
    let out = std::io::stdout();
    let mut o = out.lock();
    let _ = writeln!(
        o,
        "ran {} for {:.3} s virtual in {:.2} s wall, {} supplies",
        if sc.name.is_empty() { path.display().to_string() } else { sc.name.clone() },
        ns_to_secs(world.now()),
        wall.elapsed().as_secs_f64(),
        world.ps_count()
    );
    for a in world.alarm_log() {
        let _ = writeln!(o, "alarm t={:.6} {} {}", ns_to_secs(a.t_ns), a.channel, a.severity.as_str());
    }
    for d in world.diagnostics() {
        let _ = writeln!(o, "note {d}");
    }
    let bad = world.check_invariants();
    if !bad.is_empty() {
        return Err(Fail::Runtime(format!("invariant violations: {}", bad.join("; "))));
    }
    Ok(())
}

fn serve(
    path: &Path,
    port: u16,
    bind: String,
    pace: &str,
    until: Option<f64>,
    metrics: Option<PathBuf>,
) -> Result<(), Fail> {
    let pace: Pace = pace.parse().map_err(Fail::Config)?;
    let until = until.map(check_until).transpose()?;
    let (_, world) = load(path, metrics)?;
    let opts = Options {
        bind,
        port,
        pace,
        until,
    };
    let server = Server::start(world, &opts).map_err(|e| Fail::Runtime(format!("cannot listen: {e}")))?;
    println!("listening on {} (tcp and ws://{}/ws)", server.local_addr(), server.local_addr());
    let _ = std::io::stdout().flush();
    let world = server.join();
    println!("stopped at t={:.3} s", ns_to_secs(world.now()));
    Ok(())
}

fn connect(conn: &Conn) -> Result<TcpStream, Fail> {
    let s = TcpStream::connect((conn.host.as_str(), conn.port))
        .map_err(|e| Fail::Connection(format!("{}:{}: {e}", conn.host, conn.port)))?;
    s.set_read_timeout(Some(Duration::from_secs(30)))
        .map_err(|e| Fail::Connection(e.to_string()))?;
    Ok(s)
}

fn send(s: &mut TcpStream, req: &Request) -> Result<(), Fail> {
    let line = serde_json::to_string(req).expect("request serializes");
    writeln!(s, "{line}").map_err(|e| Fail::Connection(e.to_string()))
}

/// Sends one request and waits for its reply.
fn request(conn: &Conn, req: Request) -> Result<Reply, Fail> {
    let mut s = connect(conn)?;
    send(&mut s, &req)?;
    let mut r = BufReader::new(s);
    loop {
        let mut line = String::new();
        let n = r.read_line(&mut line).map_err(|e| Fail::Connection(e.to_string()))?;
        if n == 0 {
            return Err(Fail::Connection("server closed the connection".into()));
        }
        let v: Value = serde_json::from_str(&line).map_err(|e| Fail::Connection(format!("bad reply: {e}")))?;
        if v.get("ev").is_some() {
            continue;
        }
        return serde_json::from_value(v).map_err(|e| Fail::Connection(format!("bad reply: {e}")));
    }
}

fn print_reply(r: Reply) -> Result<(), Fail> {
    if !r.ok {
        return Err(Fail::Runtime(r.error.unwrap_or_else(|| "request failed".into())));
    }
    match r.value {
        Some(v) => println!("{v}"),
        None => println!("ok"),
    }
    Ok(())
}

fn monitor(conn: &Conn, name: &str, count: Option<usize>) -> Result<(), Fail> {
    let mut s = connect(conn)?;
    s.set_read_timeout(None).map_err(|e| Fail::Connection(e.to_string()))?;
    send(&mut s, &Request::monitor(name, 1))?;
    let mut seen = 0;
    for line in BufReader::new(s).lines() {
        let line = line.map_err(|e| Fail::Connection(e.to_string()))?;
        let v: Value = serde_json::from_str(&line).map_err(|e| Fail::Connection(format!("bad message: {e}")))?;
        if v.get("ev").is_none() {
            if v["ok"] == Value::Bool(false) {
                return Err(Fail::Runtime(v["error"].as_str().unwrap_or("monitor failed").to_string()));
            }
            continue;
        }
        println!(
            "{:.6} {} {} {}",
            v["t_ns"].as_u64().map_or(0.0, ns_to_secs),
            v["name"].as_str().unwrap_or(""),
            v["value"],
            v["alarm"].as_str().unwrap_or("")
        );
        seen += 1;
        if count.is_some_and(|c| seen >= c) {
            return Ok(());
        }
    }
    Err(Fail::Connection("server closed the connection".into()))
}
