//! Network front end for the simulator.
//!
//! One port serves two transports carrying the same messages: plain TCP
//! with one JSON object per line, and a WebSocket at `/ws` with one JSON
//! object per text message. A connection whose first bytes are `GET ` is
//! treated as a WebSocket handshake.
//!
//! The world lives on a single simulation thread that advances virtual time
//! at the configured pace and drains client requests between steps.

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, ErrorKind, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender, TryRecvError};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use psc_sim::protocol::{parse_request, Message, Request};
use psc_sim::sim::{Nanos, NS_PER_MS};
use psc_sim::world::{SessionId, World};
use tungstenite::handshake::server::{ErrorResponse, Request as HttpRequest, Response as HttpResponse};
use tungstenite::http::StatusCode;

/// Virtual seconds per wall second, or as fast as possible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pace {
    Ratio(f64),
    Max,
}

impl FromStr for Pace {
    type Err = String;

    /// `"1:1"`, `"10:1"` (virtual:wall), a plain ratio like `"0.5"`, or `"max"`.
    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("max") {
            return Ok(Pace::Max);
        }
        let bad = || format!("bad pace {s:?}; expected V:W, a ratio, or max");
        let r = match s.split_once(':') {
            Some((v, w)) => {
                let v: f64 = v.trim().parse().map_err(|_| bad())?;
                let w: f64 = w.trim().parse().map_err(|_| bad())?;
                v / w
            }
            None => s.parse().map_err(|_| bad())?,
        };
        if r.is_finite() && r > 0.0 {
            Ok(Pace::Ratio(r))
        } else {
            Err(bad())
        }
    }
}

#[derive(Debug, Clone)]
pub struct Options {
    pub bind: String,
    /// 0 picks a free port.
    pub port: u16,
    pub pace: Pace,
    /// Stop the simulation at this virtual time.
    pub until: Option<Nanos>,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            port: 0,
            pace: Pace::Ratio(1.0),
            until: None,
        }
    }
}

enum Cmd {
    Open(SessionId, Sender<String>),
    Request(SessionId, Request),
    Close(SessionId),
}

/// Largest virtual step between two looks at the command queue.
const MAX_CHUNK_NS: Nanos = 10 * NS_PER_MS;

pub struct Server {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    sim: JoinHandle<World>,
    acceptor: JoinHandle<()>,
}

impl Server {
    pub fn start(world: World, opts: &Options) -> io::Result<Server> {
        let listener = TcpListener::bind((opts.bind.as_str(), opts.port))?;
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let stop = Arc::new(AtomicBool::new(false));
        let (tx, rx) = mpsc::channel();
        let sim = {
            let stop = stop.clone();
            let (pace, until) = (opts.pace, opts.until);
            thread::Builder::new()
                .name("sim".into())
                .spawn(move || run_sim(world, rx, pace, until, stop))?
        };
        let acceptor = {
            let stop = stop.clone();
            thread::Builder::new()
                .name("accept".into())
                .spawn(move || accept_loop(listener, tx, stop))?
        };
        Ok(Server {
            addr,
            stop,
            sim,
            acceptor,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    /// True once the simulation has ended.
    pub fn is_finished(&self) -> bool {
        self.sim.is_finished()
    }

    /// Waits for the simulation to end and returns the final world.
    pub fn join(self) -> World {
        let w = self.sim.join().expect("sim thread panicked");
        self.stop.store(true, Ordering::SeqCst);
        let _ = self.acceptor.join();
        w
    }
}

fn run_sim(mut world: World, rx: Receiver<Cmd>, pace: Pace, until: Option<Nanos>, stop: Arc<AtomicBool>) -> World {
    let mut sessions: HashMap<SessionId, Sender<String>> = HashMap::new();
    let start = Instant::now();
    let base = world.now();
    let handle = |world: &mut World, sessions: &mut HashMap<SessionId, Sender<String>>, cmd: Cmd| match cmd {
        Cmd::Open(s, out) => {
            sessions.insert(s, out);
        }
        Cmd::Request(s, r) => world.handle_request(s, r),
        Cmd::Close(s) => {
            sessions.remove(&s);
            world.drop_session(s);
        }
    };
    loop {
        loop {
            match rx.try_recv() {
                Ok(cmd) => handle(&mut world, &mut sessions, cmd),
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => {
                    stop.store(true, Ordering::SeqCst);
                    break;
                }
            }
        }
        flush(&mut world, &mut sessions);
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let now = world.now();
        let mut target = match pace {
            Pace::Ratio(r) => base + (start.elapsed().as_secs_f64() * r * 1e9) as Nanos,
            Pace::Max => now + MAX_CHUNK_NS,
        };
        target = target.min(now + MAX_CHUNK_NS);
        if let Some(u) = until {
            target = target.min(u);
        }
        if target > now {
            if let Err(e) = world.run_until(target) {
                log::error!("simulation stopped: {e}");
                break;
            }
            flush(&mut world, &mut sessions);
        }
        if until.is_some_and(|u| world.now() >= u) {
            break;
        }
        if pace != Pace::Max && target <= now {
            match rx.recv_timeout(Duration::from_millis(1)) {
                Ok(cmd) => handle(&mut world, &mut sessions, cmd),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break,
            }
        }
    }
    flush(&mut world, &mut sessions);
    if let Err(e) = world.metrics.flush() {
        log::error!("metrics: {e}");
    }
    stop.store(true, Ordering::SeqCst);
    world
}

fn flush(world: &mut World, sessions: &mut HashMap<SessionId, Sender<String>>) {
    for (s, m) in world.take_outbox() {
        let gone = match sessions.get(&s) {
            Some(out) => out.send(m.to_line()).is_err(),
            None => false,
        };
        if gone {
            sessions.remove(&s);
            world.drop_session(s);
        }
    }
}

fn accept_loop(listener: TcpListener, tx: Sender<Cmd>, stop: Arc<AtomicBool>) {
    let next = AtomicU64::new(1);
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let id = next.fetch_add(1, Ordering::SeqCst);
                let tx = tx.clone();
                let stop = stop.clone();
                let r = thread::Builder::new()
                    .name(format!("conn-{id}"))
                    .spawn(move || {
                        if let Err(e) = serve_conn(stream, id, tx, stop) {
                            log::debug!("{peer}: {e}");
                        }
                    });
                if let Err(e) = r {
                    log::warn!("cannot serve {peer}: {e}");
                }
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                log::warn!("accept: {e}");
                thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

fn serve_conn(stream: TcpStream, id: SessionId, tx: Sender<Cmd>, stop: Arc<AtomicBool>) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(Duration::from_secs(2)))?;
    let mut head = [0u8; 4];
    let deadline = Instant::now() + Duration::from_secs(2);
    let n = loop {
        let n = stream.peek(&mut head)?;
        if n >= 4 || n == 0 || Instant::now() > deadline {
            break n;
        }
        thread::sleep(Duration::from_millis(1));
    };
    stream.set_read_timeout(None)?;
    if n >= 4 && &head == b"GET " {
        serve_ws(stream, id, tx, stop)
    } else {
        serve_tcp(stream, id, tx, stop)
    }
}

/// Parses one request line and queues it, or answers a malformed line
/// directly.
fn submit_line(line: &str, id: SessionId, tx: &Sender<Cmd>, out: &Sender<String>) -> bool {
    let line = line.trim();
    if line.is_empty() {
        return true;
    }
    match parse_request(line) {
        Ok(r) => tx.send(Cmd::Request(id, r)).is_ok(),
        Err(reply) => out.send(Message::Reply(reply).to_line()).is_ok(),
    }
}

fn serve_tcp(stream: TcpStream, id: SessionId, tx: Sender<Cmd>, stop: Arc<AtomicBool>) -> io::Result<()> {
    let (out_tx, out_rx) = mpsc::channel::<String>();
    if tx.send(Cmd::Open(id, out_tx.clone())).is_err() {
        return Ok(());
    }
    let mut w = stream.try_clone()?;
    let writer = thread::spawn(move || {
        loop {
            match out_rx.recv_timeout(Duration::from_millis(20)) {
                Ok(line) => {
                    if writeln!(w, "{line}").is_err() {
                        break;
                    }
                }
                Err(RecvTimeoutError::Timeout) if stop.load(Ordering::SeqCst) => {
                    while let Ok(line) = out_rx.try_recv() {
                        let _ = writeln!(w, "{line}");
                    }
                    break;
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break,
            }
        }
        let _ = w.shutdown(Shutdown::Both);
    });
    for line in BufReader::new(stream).lines() {
        let Ok(line) = line else { break };
        if !submit_line(&line, id, &tx, &out_tx) {
            break;
        }
    }
    let _ = tx.send(Cmd::Close(id));
    drop(out_tx);
    let _ = writer.join();
    Ok(())
}

fn serve_ws(stream: TcpStream, id: SessionId, tx: Sender<Cmd>, stop: Arc<AtomicBool>) -> io::Result<()> {
    let check = |req: &HttpRequest, resp: HttpResponse| -> Result<HttpResponse, ErrorResponse> {
        if req.uri().path() == "/ws" {
            Ok(resp)
        } else {
            let mut e = ErrorResponse::new(Some("only /ws is served".into()));
            *e.status_mut() = StatusCode::NOT_FOUND;
            Err(e)
        }
    };
    let mut ws = tungstenite::accept_hdr(stream, check).map_err(io::Error::other)?;
    ws.get_mut().set_read_timeout(Some(Duration::from_millis(5)))?;
    let (out_tx, out_rx) = mpsc::channel::<String>();
    if tx.send(Cmd::Open(id, out_tx.clone())).is_err() {
        return Ok(());
    }
    'conn: loop {
        match ws.read() {
            Ok(tungstenite::Message::Text(t)) => {
                for line in t.as_str().lines() {
                    if !submit_line(line, id, &tx, &out_tx) {
                        break 'conn;
                    }
                }
            }
            Ok(tungstenite::Message::Close(_)) => break,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(_) => break,
        }
        loop {
            match out_rx.try_recv() {
                Ok(line) => {
                    if ws.send(tungstenite::Message::text(line)).is_err() {
                        break 'conn;
                    }
                }
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => break 'conn,
            }
        }
        if stop.load(Ordering::SeqCst) {
            // The simulation flushed everything before raising the flag.
            while let Ok(line) = out_rx.try_recv() {
                if ws.send(tungstenite::Message::text(line)).is_err() {
                    break 'conn;
                }
            }
            let _ = ws.close(None);
            let _ = ws.flush();
            break;
        }
    }
    let _ = tx.send(Cmd::Close(id));
    Ok(())
}
