//! Live fan-out over TCP or WebSocket.
//!
//! A client opens with a one-line JSON handshake (or, over WebSocket, a
//! first text message): `{"role": "subscriber", "topics": ["depth", 4]}` or
//! `{"role": "controller"}`. Subscribers then receive one framed message per
//! write (one binary message over WebSocket); a subscriber that falls more
//! than [`SUBSCRIBER_QUEUE`] messages behind loses the newest ones. At most
//! one controller is accepted; it sends `control_drill` and
//! `control_camera` frames.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use tungstenite::{Message, WebSocket};

use super::*;
use crate::sim::InputUpdate;

pub const SUBSCRIBER_QUEUE: usize = 8;
const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Role {
    /// `None` subscribes to everything.
    Subscriber(Option<BTreeSet<Topic>>),
    Controller,
}

/// Parses a handshake object.
pub fn parse_handshake(text: &str) -> Result<Role, StreamError> {
    let v: Value = serde_json::from_str(text.trim()).map_err(|e| StreamError::Handshake(e.to_string()))?;
    match v.get("role").and_then(Value::as_str) {
        Some("controller") => Ok(Role::Controller),
        Some("subscriber") => {
            let Some(list) = v.get("topics").filter(|t| !t.is_null()) else {
                return Ok(Role::Subscriber(None));
            };
            let list = list
                .as_array()
                .ok_or_else(|| StreamError::Handshake("topics must be a list".into()))?;
            let mut set = BTreeSet::new();
            for t in list {
                let topic = match t {
                    Value::String(s) => Topic::from_name(s),
                    Value::Number(n) => n.as_u64().and_then(|n| u8::try_from(n).ok()).and_then(|n| Topic::from_id(n).ok()),
                    _ => None,
                };
                set.insert(topic.ok_or_else(|| StreamError::Handshake(format!("unknown topic {t}")))?);
            }
            Ok(Role::Subscriber(Some(set)))
        }
        _ => Err(StreamError::Handshake("role must be \"subscriber\" or \"controller\"".into())),
    }
}

struct Subscriber {
    topics: Option<BTreeSet<Topic>>,
    tx: SyncSender<Arc<Vec<u8>>>,
}

struct Shared {
    subscribers: Mutex<Vec<Subscriber>>,
    connections: Mutex<Vec<TcpStream>>,
    controller: AtomicBool,
    shutdown: AtomicBool,
    dropped: AtomicU64,
}

pub struct Server {
    addr: SocketAddr,
    shared: Arc<Shared>,
    controls: Receiver<ControlMessage>,
    accept: Option<JoinHandle<()>>,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs + std::fmt::Display) -> Result<Server, StreamError> {
        let listener = TcpListener::bind(&addr).map_err(|e| StreamError::Bind {
            addr: addr.to_string(),
            message: e.to_string(),
        })?;
        let local = listener.local_addr()?;
        let shared = Arc::new(Shared {
            subscribers: Mutex::new(Vec::new()),
            connections: Mutex::new(Vec::new()),
            controller: AtomicBool::new(false),
            shutdown: AtomicBool::new(false),
            dropped: AtomicU64::new(0),
        });
        let (tx, rx) = mpsc::channel();
        let s = shared.clone();
        let accept = thread::Builder::new()
            .name("drillsim-accept".into())
            .spawn(move || accept_loop(listener, s, tx))?;
        Ok(Server {
            addr: local,
            shared,
            controls: rx,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn subscriber_count(&self) -> usize {
        self.shared.subscribers.lock().unwrap().len()
    }

    pub fn has_controller(&self) -> bool {
        self.shared.controller.load(Ordering::SeqCst)
    }

    /// Messages not delivered to some subscriber because its queue was full.
    pub fn dropped(&self) -> u64 {
        self.shared.dropped.load(Ordering::Relaxed)
    }

    /// Queues `m` for every interested subscriber without blocking.
    pub fn publish(&self, m: &TopicMessage) {
        let mut subs = self.shared.subscribers.lock().unwrap();
        let mut bytes: Option<Arc<Vec<u8>>> = None;
        subs.retain(|s| {
            if s.topics.as_ref().is_some_and(|t| !t.contains(&m.topic)) {
                return true;
            }
            let b = bytes.get_or_insert_with(|| Arc::new(m.encode())).clone();
            match s.tx.try_send(b) {
                Ok(()) => true,
                Err(TrySendError::Full(_)) => {
                    self.shared.dropped.fetch_add(1, Ordering::Relaxed);
                    true
                }
                Err(TrySendError::Disconnected(_)) => false,
            }
        });
    }

    /// Drains pending control messages into one update, later ones winning.
    pub fn poll_controls(&self) -> InputUpdate {
        let mut u = InputUpdate::default();
        while let Ok(c) = self.controls.try_recv() {
            u.merge(&c.to_update());
        }
        u
    }

    /// Waits up to `timeout` for the next control message.
    pub fn wait_control(&self, timeout: Duration) -> Option<ControlMessage> {
        self.controls.recv_timeout(timeout).ok()
    }

    pub fn shutdown(&mut self) {
        if self.shared.shutdown.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        for c in self.shared.connections.lock().unwrap().drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
        self.shared.subscribers.lock().unwrap().clear();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>, controls: Sender<ControlMessage>) {
    for stream in listener.incoming() {
        if shared.shutdown.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = stream else { continue };
        if let Ok(c) = stream.try_clone() {
            shared.connections.lock().unwrap().push(c);
        }
        let s = shared.clone();
        let tx = controls.clone();
        let _ = thread::Builder::new()
            .name("drillsim-client".into())
            .spawn(move || {
                if let Err(e) = handle_client(stream, &s, tx) {
                    log::debug!("client closed: {e}");
                }
            });
    }
}

enum Conn {
    Tcp { reader: BufReader<TcpStream>, writer: TcpStream },
    Ws(Box<WebSocket<TcpStream>>),
}

fn ws_err(e: tungstenite::Error) -> StreamError {
    StreamError::Io(e.to_string())
}

impl Conn {
    fn open(stream: TcpStream) -> Result<Conn, StreamError> {
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT))?;
        let start = Instant::now();
        let mut head = [0u8; 4];
        loop {
            let n = stream.peek(&mut head)?;
            if n == 4 || n == 0 || (n > 0 && !b"GET ".starts_with(&head[..n])) {
                break;
            }
            if start.elapsed() > HANDSHAKE_TIMEOUT {
                return Err(StreamError::Handshake("timed out".into()));
            }
            thread::sleep(Duration::from_millis(2));
        }
        if &head == b"GET " {
            let ws = tungstenite::accept(stream).map_err(|e| StreamError::Handshake(e.to_string()))?;
            Ok(Conn::Ws(Box::new(ws)))
        } else {
            Ok(Conn::Tcp {
                reader: BufReader::new(stream.try_clone()?),
                writer: stream,
            })
        }
    }

    fn stream(&self) -> &TcpStream {
        match self {
            Conn::Tcp { writer, .. } => writer,
            Conn::Ws(ws) => ws.get_ref(),
        }
    }

    fn read_handshake(&mut self) -> Result<String, StreamError> {
        match self {
            Conn::Tcp { reader, .. } => {
                let mut line = String::new();
                reader.read_line(&mut line)?;
                Ok(line)
            }
            Conn::Ws(ws) => loop {
                match ws.read().map_err(ws_err)? {
                    Message::Text(t) => return Ok(t),
                    Message::Binary(b) => return String::from_utf8(b).map_err(|_| StreamError::Handshake("not UTF-8".into())),
                    Message::Close(_) => return Err(StreamError::Handshake("closed".into())),
                    _ => {}
                }
            },
        }
    }

    fn send_text(&mut self, v: Value) -> Result<(), StreamError> {
        let text = v.to_string();
        match self {
            Conn::Tcp { writer, .. } => {
                writer.write_all(text.as_bytes())?;
                writer.write_all(b"\n")?;
                Ok(())
            }
            Conn::Ws(ws) => ws.send(Message::Text(text)).map_err(ws_err),
        }
    }

    fn send_frame(&mut self, bytes: &[u8]) -> Result<(), StreamError> {
        match self {
            Conn::Tcp { writer, .. } => Ok(writer.write_all(bytes)?),
            Conn::Ws(ws) => ws.send(Message::Binary(bytes.to_vec())).map_err(ws_err),
        }
    }

    fn recv_frame(&mut self) -> Result<Option<TopicMessage>, StreamError> {
        match self {
            Conn::Tcp { reader, .. } => read_frame(reader),
            Conn::Ws(ws) => loop {
                match ws.read() {
                    Ok(Message::Binary(b)) => return TopicMessage::decode(&b).map(|(m, _)| Some(m)),
                    Ok(Message::Close(_)) => return Ok(None),
                    Ok(_) => {}
                    Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(None),
                    Err(e) => return Err(ws_err(e)),
                }
            },
        }
    }
}

fn handle_client(stream: TcpStream, shared: &Shared, controls: Sender<ControlMessage>) -> Result<(), StreamError> {
    let mut conn = Conn::open(stream)?;
    let role = match conn.read_handshake().and_then(|t| parse_handshake(&t)) {
        Ok(r) => r,
        Err(e) => {
            let _ = conn.send_text(json!({"ok": false, "error": e.to_string()}));
            return Err(e);
        }
    };
    conn.stream().set_read_timeout(None)?;
    match role {
        Role::Subscriber(topics) => {
            let names: Vec<&str> = match &topics {
                Some(t) => t.iter().map(|t| t.name()).collect(),
                None => Topic::ALL.iter().map(|t| t.name()).collect(),
            };
            conn.send_text(json!({"ok": true, "role": "subscriber", "topics": names}))?;
            let (tx, rx) = mpsc::sync_channel(SUBSCRIBER_QUEUE);
            shared.subscribers.lock().unwrap().push(Subscriber { topics, tx });
            loop {
                match rx.recv_timeout(Duration::from_millis(100)) {
                    Ok(bytes) => conn.send_frame(&bytes)?,
                    Err(RecvTimeoutError::Timeout) if !shared.shutdown.load(Ordering::SeqCst) => {}
                    Err(_) => return Ok(()),
                }
            }
        }
        Role::Controller => {
            if shared.controller.swap(true, Ordering::SeqCst) {
                conn.send_text(json!({"ok": false, "error": "a controller is already connected"}))?;
                return Err(StreamError::Handshake("second controller rejected".into()));
            }
            let result = control_loop(&mut conn, &controls);
            shared.controller.store(false, Ordering::SeqCst);
            result
        }
    }
}

fn control_loop(conn: &mut Conn, controls: &Sender<ControlMessage>) -> Result<(), StreamError> {
    conn.send_text(json!({"ok": true, "role": "controller"}))?;
    let mut last = 0u64;
    while let Some(m) = conn.recv_frame()? {
        let c = match ControlMessage::from_message(&m) {
            Ok(c) => c,
            Err(e) => {
                log::warn!("ignoring control message: {e}");
                continue;
            }
        };
        // stale messages are dropped so input never goes back in time
        if m.timestamp_ns < last {
            continue;
        }
        last = m.timestamp_ns;
        if controls.send(c).is_err() {
            return Ok(());
        }
    }
    Ok(())
}

/// Minimal blocking client over raw TCP.
pub struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    fn connect(addr: SocketAddr, handshake: Value) -> Result<Client, StreamError> {
        let writer = TcpStream::connect(addr)?;
        writer.set_nodelay(true)?;
        let mut reader = BufReader::new(writer.try_clone()?);
        (&writer).write_all(format!("{handshake}\n").as_bytes())?;
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let reply: Value = serde_json::from_str(&line).map_err(|e| StreamError::Handshake(e.to_string()))?;
        if reply.get("ok") != Some(&Value::Bool(true)) {
            return Err(StreamError::Handshake(
                reply.get("error").and_then(Value::as_str).unwrap_or("rejected").to_string(),
            ));
        }
        Ok(Client { reader, writer })
    }

    /// Subscribes to `topics`, or everything when empty.
    pub fn subscribe(addr: SocketAddr, topics: &[Topic]) -> Result<Client, StreamError> {
        let topics: Option<Vec<&str>> = (!topics.is_empty()).then(|| topics.iter().map(|t| t.name()).collect());
        Client::connect(addr, json!({"role": "subscriber", "topics": topics}))
    }

    pub fn control(addr: SocketAddr) -> Result<Client, StreamError> {
        Client::connect(addr, json!({"role": "controller"}))
    }

    pub fn set_read_timeout(&self, t: Option<Duration>) -> Result<(), StreamError> {
        Ok(self.writer.set_read_timeout(t)?)
    }

    pub fn recv(&mut self) -> Result<Option<TopicMessage>, StreamError> {
        read_frame(&mut self.reader)
    }

    pub fn send(&mut self, m: &TopicMessage) -> Result<(), StreamError> {
        m.write_to(&mut self.writer)?;
        Ok(())
    }
}
