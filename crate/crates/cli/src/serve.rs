//! Slave simulator behind a WebSocket bridge.
//!
//! One thread owns the slave and ticks it in real time; each TCP connection
//! gets its own thread. They talk over channels only. `GET /status` answers
//! with a JSON snapshot; any other request must be a WebSocket upgrade, and
//! only one of those may be open at a time.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use tungstenite::protocol::frame::coding::CloseCode;
use tungstenite::protocol::CloseFrame;

use tersim_core::netchannel::{Channel, ChannelParams};
use tersim_core::phantom::PhantomConfig;
use tersim_core::protocol::{decode, LinkStatus};
use tersim_core::session::{start_pose, Slave, SessionConfig};

use crate::CliError;

pub struct ServeOptions {
    pub host: String,
    pub port: u16,
    pub phantom: PhantomConfig,
    pub channel: ChannelParams,
}

enum ToSlave {
    Connect { id: u64, out: Sender<ToConn>, reply: Sender<bool> },
    Data { id: u64, bytes: Vec<u8> },
    Violation { id: u64, reason: String },
    Disconnect { id: u64 },
    Status { reply: Sender<Value> },
}

enum ToConn {
    Bytes(Vec<u8>),
    Close(CloseCode, String),
}

const RATE_WINDOW_US: u64 = 1_000_000;

struct SlaveActor {
    slave: Slave,
    cfg: SessionConfig,
    params: ChannelParams,
    uplink: Channel,
    downlink: Channel,
    client: Option<(u64, Sender<ToConn>)>,
    started: Instant,
    rate_mark: (u64, u64, u64),
    rates: (f64, f64),
}

impl SlaveActor {
    fn new(phantom: PhantomConfig, params: ChannelParams, cfg: SessionConfig) -> Result<Self, CliError> {
        let ch = |seed| Channel::new(params.with_seed(seed)).map_err(|e| CliError::Input(e.to_string()));
        Ok(SlaveActor {
            slave: Slave::new(start_pose(), cfg, phantom),
            cfg,
            params,
            uplink: ch(1)?,
            downlink: ch(2)?,
            client: None,
            started: Instant::now(),
            rate_mark: (0, 0, 0),
            rates: (0.0, 0.0),
        })
    }

    fn now(&self) -> u64 {
        self.started.elapsed().as_micros() as u64
    }

    fn drop_client(&mut self, code: CloseCode, reason: &str) {
        if let Some((id, out)) = self.client.take() {
            log::info!("closing connection {id}: {reason}");
            let _ = out.send(ToConn::Close(code, reason.to_string()));
        }
        let now = self.now();
        self.slave.reset_link(now);
        let fresh = |seed| Channel::new(self.params.with_seed(seed)).expect("validated at startup");
        self.uplink = fresh(1);
        self.downlink = fresh(2);
    }

    fn tick(&mut self, now: u64) {
        for bytes in self.uplink.poll(now) {
            match self.slave.receive(&bytes, now) {
                Ok(replies) => {
                    for m in replies {
                        let b = self.slave.endpoint.wrap(&m, now);
                        self.downlink.send(b, now);
                    }
                }
                Err(v) => {
                    self.drop_client(CloseCode::Policy, &v.to_string());
                    return;
                }
            }
            if self.slave.link().state == LinkStatus::Closed {
                self.drop_client(CloseCode::Normal, "bye");
                return;
            }
        }
        for m in self.slave.tick(now) {
            let b = self.slave.endpoint.wrap(&m, now);
            self.downlink.send(b, now);
        }
        let due = self.downlink.poll(now);
        if let Some((_, out)) = &self.client {
            for b in due {
                let _ = out.send(ToConn::Bytes(b));
            }
        }
        let (t0, rx0, tx0) = self.rate_mark;
        if now - t0 >= RATE_WINDOW_US {
            let secs = (now - t0) as f64 / 1e6;
            let (rx, tx) = (self.slave.endpoint.rx_bytes, self.slave.endpoint.tx_bytes);
            self.rates = (rx.saturating_sub(rx0) as f64 / secs, tx.saturating_sub(tx0) as f64 / secs);
            self.rate_mark = (now, rx, tx);
        }
    }

    fn status(&self) -> Value {
        let s = &self.slave;
        let p = s.actual_probe.position;
        json!({
            "link": s.link().state,
            "connected": self.client.is_some(),
            "halted": s.halted,
            "frozen": s.frozen_frame.is_some(),
            "in_contact": s.in_contact(),
            "probe_position": [p.x, p.y, p.z],
            "contact_force_n": s.contact_force.norm(),
            "rx_bytes": s.endpoint.rx_bytes,
            "tx_bytes": s.endpoint.tx_bytes,
            "rx_bytes_per_s": self.rates.0,
            "tx_bytes_per_s": self.rates.1,
            "decode_errors": s.endpoint.decode_errors,
            "stale_dropped": s.endpoint.stale_dropped,
            "frames_rendered": s.frames_rendered,
            "channel": self.params,
            "uptime_s": self.now() as f64 / 1e6,
        })
    }

    fn handle(&mut self, msg: ToSlave) {
        match msg {
            ToSlave::Connect { id, out, reply } => {
                let accept = self.client.is_none();
                if accept {
                    let now = self.now();
                    self.slave.reset_link(now);
                    self.client = Some((id, out));
                    log::info!("connection {id} accepted");
                }
                let _ = reply.send(accept);
            }
            ToSlave::Data { id, bytes } => {
                if self.client.as_ref().is_some_and(|c| c.0 == id) {
                    let now = self.now();
                    self.uplink.send(bytes, now);
                }
            }
            ToSlave::Violation { id, reason } => {
                if self.client.as_ref().is_some_and(|c| c.0 == id) {
                    self.drop_client(CloseCode::Policy, &reason);
                }
            }
            ToSlave::Disconnect { id } => {
                if self.client.as_ref().is_some_and(|c| c.0 == id) {
                    self.client = None;
                    self.drop_client(CloseCode::Away, "disconnected");
                }
            }
            ToSlave::Status { reply } => {
                let _ = reply.send(self.status());
            }
        }
    }

    fn run(mut self, rx: Receiver<ToSlave>) {
        let tick = self.cfg.tick_us();
        let mut next = 0;
        loop {
            let now = self.now();
            if now >= next {
                self.tick(now);
                next = (next + tick).max(now.saturating_sub(tick));
            }
            let wait = Duration::from_micros(next.saturating_sub(self.now()));
            match rx.recv_timeout(wait) {
                Ok(m) => self.handle(m),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => return,
            }
        }
    }
}

/// Reads the request head without consuming it, so the WebSocket handshake
/// can still parse it.
fn peek_head(stream: &TcpStream) -> std::io::Result<String> {
    stream.set_read_timeout(Some(Duration::from_secs(2)))?;
    let mut buf = vec![0u8; 8192];
    let deadline = Instant::now() + Duration::from_secs(2);
    loop {
        let n = stream.peek(&mut buf)?;
        let head = String::from_utf8_lossy(&buf[..n]).into_owned();
        if head.contains("\r\n\r\n") || n == buf.len() || Instant::now() > deadline {
            return Ok(head);
        }
        if n == 0 {
            return Err(std::io::ErrorKind::UnexpectedEof.into());
        }
        thread::sleep(Duration::from_millis(2));
    }
}

fn http_reply(mut stream: TcpStream, status: &str, body: &str) {
    // Drain the request so closing the socket does not reset it.
    let mut sink = [0u8; 8192];
    let _ = stream.set_read_timeout(Some(Duration::from_millis(50)));
    let _ = stream.read(&mut sink);
    let _ = write!(
        stream,
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\
         Access-Control-Allow-Origin: *\r\n\r\n{body}",
        body.len()
    );
    let _ = stream.flush();
}

fn is_transient(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io)
        if matches!(io.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut))
}

fn websocket(stream: TcpStream, id: u64, slave: Sender<ToSlave>) {
    let (out_tx, out_rx) = mpsc::channel();
    let (reply_tx, reply_rx) = mpsc::channel();
    if slave.send(ToSlave::Connect { id, out: out_tx, reply: reply_tx }).is_err() {
        return;
    }
    if !reply_rx.recv().unwrap_or(false) {
        http_reply(stream, "409 Conflict", r#"{"error":"another master is connected"}"#);
        return;
    }
    let mut ws = match tungstenite::accept(stream) {
        Ok(ws) => ws,
        Err(e) => {
            log::warn!("connection {id}: handshake failed: {e}");
            let _ = slave.send(ToSlave::Disconnect { id });
            return;
        }
    };
    let _ = ws.get_ref().set_read_timeout(Some(Duration::from_millis(2)));
    let _ = ws.get_ref().set_nodelay(true);
    'conn: loop {
        loop {
            match out_rx.try_recv() {
                Ok(ToConn::Bytes(b)) => {
                    if let Err(e) = ws.send(tungstenite::Message::Binary(b)) {
                        if !is_transient(&e) {
                            break 'conn;
                        }
                    }
                }
                Ok(ToConn::Close(code, reason)) => {
                    let _ = ws.close(Some(CloseFrame { code, reason: reason.into() }));
                    // Let the close handshake finish, briefly.
                    let until = Instant::now() + Duration::from_millis(500);
                    while Instant::now() < until {
                        match ws.read() {
                            Ok(_) => {}
                            Err(e) if is_transient(&e) => {}
                            Err(_) => break,
                        }
                    }
                    return;
                }
                Err(mpsc::TryRecvError::Empty) => break,
                Err(mpsc::TryRecvError::Disconnected) => break 'conn,
            }
        }
        match ws.read() {
            Ok(tungstenite::Message::Binary(b)) => {
                let msg = match decode(&b) {
                    Ok(_) => ToSlave::Data { id, bytes: b },
                    Err(e) => ToSlave::Violation { id, reason: format!("malformed message: {e}") },
                };
                if slave.send(msg).is_err() {
                    break;
                }
            }
            Ok(tungstenite::Message::Text(_)) => {
                let reason = "text frames are not part of the protocol".to_string();
                if slave.send(ToSlave::Violation { id, reason }).is_err() {
                    break;
                }
            }
            Ok(tungstenite::Message::Close(_)) => break,
            Ok(_) => {}
            Err(e) if is_transient(&e) => {
                let _ = ws.flush();
            }
            Err(_) => break,
        }
    }
    let _ = slave.send(ToSlave::Disconnect { id });
}

fn connection(stream: TcpStream, id: u64, slave: Sender<ToSlave>) {
    let head = match peek_head(&stream) {
        Ok(h) => h,
        Err(_) => return,
    };
    let request_line = head.lines().next().unwrap_or_default().to_string();
    let mut parts = request_line.split_whitespace();
    let (method, path) = (parts.next().unwrap_or_default(), parts.next().unwrap_or_default());
    let upgrade = head.lines().any(|l| {
        let l = l.to_ascii_lowercase();
        l.starts_with("upgrade:") && l.contains("websocket")
    });
    if method == "GET" && path.split('?').next() == Some("/status") && !upgrade {
        let (tx, rx) = mpsc::channel();
        let body = match slave.send(ToSlave::Status { reply: tx }).ok().and_then(|_| rx.recv().ok()) {
            Some(v) => v.to_string(),
            None => r#"{"error":"slave stopped"}"#.to_string(),
        };
        http_reply(stream, "200 OK", &body);
    } else if upgrade {
        websocket(stream, id, slave);
    } else {
        http_reply(stream, "404 Not Found", r#"{"error":"try GET /status or a WebSocket upgrade"}"#);
    }
}

pub fn serve(opts: ServeOptions) -> Result<(), CliError> {
    let cfg = SessionConfig::default();
    let actor = SlaveActor::new(opts.phantom, opts.channel, cfg)?;
    let listener = TcpListener::bind((opts.host.as_str(), opts.port))
        .map_err(|e| CliError::Environment(format!("cannot listen on {}:{}: {e}", opts.host, opts.port)))?;
    let addr = listener.local_addr().map_err(|e| CliError::Environment(e.to_string()))?;
    println!("listening on {addr}");
    let _ = std::io::stdout().flush();

    let (tx, rx) = mpsc::channel();
    thread::Builder::new()
        .name("slave".into())
        .spawn(move || actor.run(rx))
        .map_err(|e| CliError::Environment(e.to_string()))?;
    for (id, stream) in (1u64..).zip(listener.incoming()) {
        match stream {
            Ok(s) => {
                let tx = tx.clone();
                let _ = thread::Builder::new().name(format!("conn-{id}")).spawn(move || connection(s, id, tx));
            }
            Err(e) => log::warn!("accept failed: {e}"),
        }
    }
    Ok(())
}
