//! Uplink relay: forwards an allowlisted set of messages between clients
//! that connect outbound to it. It holds no group keys.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread;

use serde_json::Value;

use crate::announce::{Announcement, Registry, UPLINK_PREFIX};
use crate::frame::{read_frame, write_frame, Frame, FrameError, MsgType};
use crate::transport::Duplex;
use crate::wire::{ErrorBody, Hello, List, Ping, PROTOCOL_VERSION};

/// Message types a client may send once its session is ACTIVE.
pub const ALLOWLIST: &[MsgType] = &[
    MsgType::ANNOUNCE,
    MsgType::RETRACT,
    MsgType::LIST,
    MsgType::DOC_REQUEST,
    MsgType::DOC_RESPONSE,
    MsgType::EXEC_REQUEST,
    MsgType::BLOB_CHUNK,
    MsgType::LOG_CHUNK,
    MsgType::EXEC_RESULT,
    MsgType::CHALLENGE,
    MsgType::PROOF,
    MsgType::PING,
    MsgType::PONG,
];

pub fn is_allowed(byte: u8) -> bool {
    MsgType::from_byte(byte).is_some_and(|t| ALLOWLIST.contains(&t))
}

/// Parses a token file: one `client_id:token` per line; blank lines and
/// `#` comments are skipped.
pub fn parse_tokens(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, token) = line.split_once(':').ok_or_else(|| format!("line {}: expected client_id:token", n + 1))?;
        let (id, token) = (id.trim(), token.trim());
        if !toolweave_core::model::is_identifier(id) || token.is_empty() {
            return Err(format!("line {}: invalid entry", n + 1));
        }
        if out.insert(id.to_owned(), token.to_owned()).is_some() {
            return Err(format!("line {}: duplicate client `{id}`", n + 1));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    Handshake,
    Active,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelayError {
    pub code: &'static str,
    pub message: String,
}

impl fmt::Display for RelayError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for RelayError {}

fn err(code: &'static str, message: impl Into<String>) -> RelayError {
    RelayError { code, message: message.into() }
}

/// Counters of relay side effects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RelayStats {
    pub forwarded: u64,
    pub announcements: u64,
    pub violations: u64,
    pub active_sessions: usize,
}

struct ClientSession {
    client_id: String,
    serial: u64,
    writer: Mutex<Box<dyn Duplex>>,
    ctl: Mutex<Box<dyn Duplex>>,
    closed: AtomicBool,
}

impl ClientSession {
    fn send(&self, frame: &Frame) -> Result<(), FrameError> {
        write_frame(&mut *lock(&self.writer), frame)
    }

    fn close(&self) {
        if !self.closed.swap(true, Ordering::SeqCst) {
            lock(&self.ctl).shutdown();
        }
    }
}

fn lock<T: ?Sized>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

struct Inner {
    tokens: BTreeMap<String, String>,
    sessions: Mutex<HashMap<String, Arc<ClientSession>>>,
    table: Mutex<Registry>,
    serial: AtomicU64,
    forwarded: AtomicU64,
    announcements: AtomicU64,
    violations: AtomicU64,
    log: Mutex<Vec<String>>,
    listeners: Mutex<Vec<(SocketAddr, Arc<AtomicBool>)>>,
}

#[derive(Clone)]
pub struct Relay(Arc<Inner>);

impl Relay {
    pub fn new(tokens: BTreeMap<String, String>) -> Self {
        Relay(Arc::new(Inner {
            tokens,
            sessions: Mutex::new(HashMap::new()),
            table: Mutex::new(Registry::new()),
            serial: AtomicU64::new(1),
            forwarded: AtomicU64::new(0),
            announcements: AtomicU64::new(0),
            violations: AtomicU64::new(0),
            log: Mutex::new(Vec::new()),
            listeners: Mutex::new(Vec::new()),
        }))
    }

    pub fn stats(&self) -> RelayStats {
        let i = &self.0;
        RelayStats {
            forwarded: i.forwarded.load(Ordering::SeqCst),
            announcements: i.announcements.load(Ordering::SeqCst),
            violations: i.violations.load(Ordering::SeqCst),
            active_sessions: lock(&i.sessions).len(),
        }
    }

    /// Client ids with an ACTIVE session.
    pub fn clients(&self) -> Vec<String> {
        let mut ids: Vec<_> = lock(&self.0.sessions).keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn session_state(&self, client_id: &str) -> SessionState {
        match lock(&self.0.sessions).get(client_id) {
            Some(s) if !s.closed.load(Ordering::SeqCst) => SessionState::Active,
            _ => SessionState::Closed,
        }
    }

    /// Announcements currently held, already namespaced.
    pub fn announcements(&self) -> Vec<Announcement> {
        lock(&self.0.table).announcements().cloned().collect()
    }

    /// Everything the relay has logged.
    pub fn log_lines(&self) -> Vec<String> {
        lock(&self.0.log).clone()
    }

    /// Runs the handshake on `stream` and serves the session on a new thread.
    pub fn accept(&self, stream: Box<dyn Duplex>) -> Result<String, RelayError> {
        let inner = self.0.clone();
        let mut reader = stream.try_clone_box().map_err(|e| err("TRANSPORT", e.to_string()))?;
        let ctl = stream.try_clone_box().map_err(|e| err("TRANSPORT", e.to_string()))?;
        let mut writer = stream;
        let refuse = |writer: &mut Box<dyn Duplex>, e: RelayError| {
            let _ = write_frame(writer, &Frame::json(MsgType::ERROR, &ErrorBody::new(e.code, e.message.clone())));
            ctl.shutdown();
            inner.note(format!("refused session: {}", e.code));
            e
        };
        let frame = match read_frame(&mut reader) {
            Ok(f) => f,
            Err(e) => return Err(refuse(&mut writer, err("PROTOCOL_VIOLATION", e.to_string()))),
        };
        if frame.ty != MsgType::HELLO {
            return Err(refuse(&mut writer, err("PROTOCOL_VIOLATION", format!("expected HELLO, got {}", frame.ty))));
        }
        let hello: Hello = match frame.parse() {
            Ok(h) => h,
            Err(e) => return Err(refuse(&mut writer, err("PROTOCOL_VIOLATION", e.to_string()))),
        };
        if hello.protocol_version != PROTOCOL_VERSION {
            return Err(refuse(&mut writer, err("VERSION_MISMATCH", "unsupported protocol version")));
        }
        let (Some(cid), Some(token)) = (hello.client_id, hello.token) else {
            return Err(refuse(&mut writer, err("AUTH_FAILED", "client id and token required")));
        };
        if inner.tokens.get(&cid).map(|t| constant_time_eq(t.as_bytes(), token.as_bytes())) != Some(true) {
            return Err(refuse(&mut writer, err("AUTH_FAILED", format!("bad credentials for `{cid}`"))));
        }
        let session = {
            let mut sessions = lock(&inner.sessions);
            if sessions.contains_key(&cid) {
                drop(sessions);
                return Err(refuse(&mut writer, err("DUPLICATE_CLIENT", format!("`{cid}` is already connected"))));
            }
            let reply = Hello {
                protocol_version: PROTOCOL_VERSION,
                node_id: "relay".into(),
                display_name: "uplink relay".into(),
                client_id: None,
                token: None,
            };
            write_frame(&mut writer, &Frame::json(MsgType::HELLO, &reply)).map_err(|e| err("TRANSPORT", e.to_string()))?;
            let s = Arc::new(ClientSession {
                client_id: cid.clone(),
                serial: inner.serial.fetch_add(1, Ordering::SeqCst),
                writer: Mutex::new(writer),
                ctl: Mutex::new(ctl),
                closed: AtomicBool::new(false),
            });
            sessions.insert(cid.clone(), s.clone());
            s
        };
        inner.note(format!("client {cid} active"));
        thread::Builder::new()
            .name(format!("relay-{cid}"))
            .spawn(move || inner.serve(session, reader))
            .map_err(|e| err("TRANSPORT", e.to_string()))?;
        Ok(cid)
    }

    pub fn listen(&self, addr: impl ToSocketAddrs) -> io::Result<SocketAddr> {
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        lock(&self.0.listeners).push((local, stop.clone()));
        let relay = self.clone();
        thread::Builder::new().name(format!("relay-listen-{local}")).spawn(move || {
            for conn in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let _ = stream.set_nodelay(true);
                let relay = relay.clone();
                thread::spawn(move || {
                    if let Err(e) = relay.accept(Box::new(stream)) {
                        log::warn!("uplink handshake failed: {e}");
                    }
                });
            }
        })?;
        Ok(local)
    }

    /// Stops listening and drops every session and announcement.
    pub fn shutdown(&self) {
        for (addr, stop) in lock(&self.0.listeners).drain(..) {
            stop.store(true, Ordering::SeqCst);
            let _ = TcpStream::connect_timeout(&addr, std::time::Duration::from_millis(200));
        }
        let sessions: Vec<_> = lock(&self.0.sessions).drain().map(|(_, s)| s).collect();
        for s in sessions {
            s.close();
        }
        *lock(&self.0.table) = Registry::new();
    }
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

/// Why a session is being closed.
struct Violation(String);

impl Inner {
    fn note(&self, line: String) {
        log::info!("{line}");
        lock(&self.log).push(line);
    }

    fn serve(self: Arc<Self>, session: Arc<ClientSession>, mut reader: Box<dyn Duplex>) {
        loop {
            let result = match read_frame(&mut reader) {
                Ok(frame) => self.handle(&session, frame),
                Err(FrameError::UnknownType(b)) => Err(Violation(format!("message type 0x{b:02x} is not allowed"))),
                Err(FrameError::TooLarge(n)) => Err(Violation(format!("frame of {n} bytes"))),
                Err(_) => break,
            };
            if let Err(Violation(why)) = result {
                self.violations.fetch_add(1, Ordering::SeqCst);
                self.note(format!("client {}: protocol violation: {why}", session.client_id));
                let _ = session.send(&Frame::json(MsgType::ERROR, &ErrorBody::new("PROTOCOL_VIOLATION", why)));
                break;
            }
            if session.closed.load(Ordering::SeqCst) {
                break;
            }
        }
        self.drop_session(&session);
    }

    fn drop_session(&self, session: &ClientSession) {
        session.close();
        {
            let mut sessions = lock(&self.sessions);
            if sessions.get(&session.client_id).is_some_and(|s| s.serial == session.serial) {
                sessions.remove(&session.client_id);
            } else {
                return;
            }
        }
        let publisher = format!("{UPLINK_PREFIX}{}", session.client_id);
        let tombstones: Vec<Announcement> = {
            let mut table = lock(&self.table);
            let gone: Vec<_> = table.announcements().filter(|a| a.publisher == publisher).cloned().collect();
            table.remove_publisher(&publisher);
            gone.into_iter()
                .map(|a| Announcement { sequence: a.sequence + 1, payload: None, sealed: None, ..a })
                .collect()
        };
        for t in &tombstones {
            self.fan_out(&session.client_id, &Frame::json(MsgType::RETRACT, t));
        }
        self.note(format!("client {} closed", session.client_id));
    }

    fn fan_out(&self, from: &str, frame: &Frame) {
        let targets: Vec<_> = lock(&self.sessions).values().filter(|s| s.client_id != from).cloned().collect();
        for t in targets {
            if t.send(frame).is_ok() {
                self.forwarded.fetch_add(1, Ordering::SeqCst);
            }
        }
    }

    fn handle(&self, session: &Arc<ClientSession>, frame: Frame) -> Result<(), Violation> {
        if !ALLOWLIST.contains(&frame.ty) {
            return Err(Violation(format!("{} is not allowed over an uplink", frame.ty)));
        }
        let body: Value = serde_json::from_slice(&frame.body).map_err(|e| Violation(format!("malformed {}: {e}", frame.ty)))?;
        if !body.is_object() {
            return Err(Violation(format!("malformed {}", frame.ty)));
        }
        match body.get("peer") {
            Some(Value::String(_)) => return self.route(session, frame, body),
            Some(_) => return Err(Violation("peer must be a string".into())),
            None => {}
        }
        match frame.ty {
            MsgType::ANNOUNCE | MsgType::RETRACT => {
                let mut a: Announcement = serde_json::from_value(body).map_err(|e| Violation(format!("malformed announcement: {e}")))?;
                if a.publisher.starts_with(UPLINK_PREFIX) || a.payload.as_ref().is_some_and(|p| p.name.contains("::")) {
                    return Err(Violation(format!("announcement outside the namespace of `{}`", session.client_id)));
                }
                if frame.ty == MsgType::RETRACT && !a.is_tombstone() {
                    return Err(Violation("RETRACT with a payload".into()));
                }
                a.publisher = format!("{UPLINK_PREFIX}{}", session.client_id);
                let applied = lock(&self.table).apply(a.clone());
                if applied {
                    self.announcements.fetch_add(1, Ordering::SeqCst);
                    self.note(format!("{} from {} slot {} seq {}", frame.ty, session.client_id, a.slot, a.sequence));
                    self.fan_out(&session.client_id, &Frame::json(frame.ty, &a));
                }
            }
            MsgType::LIST => {
                let list: List = serde_json::from_value(body).map_err(|e| Violation(format!("malformed LIST: {e}")))?;
                if list.announcements.is_some() {
                    return Err(Violation("LIST reply without a peer".into()));
                }
                let own = format!("{UPLINK_PREFIX}{}", session.client_id);
                let anns = lock(&self.table).announcements().filter(|a| a.publisher != own).cloned().collect();
                let _ = session.send(&Frame::json(MsgType::LIST, &List { req: list.req, peer: None, announcements: Some(anns) }));
            }
            MsgType::PING => {
                let p: Ping = serde_json::from_value(body).map_err(|e| Violation(format!("malformed PING: {e}")))?;
                let _ = session.send(&Frame::json(MsgType::PONG, &p));
            }
            MsgType::PONG => {}
            other => return Err(Violation(format!("{other} needs a peer"))),
        }
        Ok(())
    }

    fn route(&self, session: &Arc<ClientSession>, frame: Frame, mut body: Value) -> Result<(), Violation> {
        let peer = body["peer"].as_str().unwrap_or_default().to_owned();
        let target_id = peer.strip_prefix(UPLINK_PREFIX).ok_or_else(|| Violation(format!("bad peer `{peer}`")))?;
        if matches!(frame.ty, MsgType::ANNOUNCE | MsgType::RETRACT) {
            return Err(Violation(format!("{} cannot be addressed to a peer", frame.ty)));
        }
        let target = lock(&self.sessions).get(target_id).cloned();
        let Some(target) = target.filter(|t| !t.closed.load(Ordering::SeqCst)) else {
            self.note(format!("{} from {} to {target_id}: route unavailable", frame.ty, session.client_id));
            self.route_unavailable(session, &frame, &body, &peer);
            return Ok(());
        };
        body["peer"] = Value::String(format!("{UPLINK_PREFIX}{}", session.client_id));
        let out = Frame { ty: frame.ty, body: serde_json::to_vec(&body).expect("json value serializes"), binary: frame.binary };
        let size = out.payload_len();
        if target.send(&out).is_ok() {
            self.forwarded.fetch_add(1, Ordering::SeqCst);
            self.note(format!("{} from {} to {} ({size} bytes)", out.ty, session.client_id, target.client_id));
        }
        Ok(())
    }

    fn route_unavailable(&self, session: &ClientSession, frame: &Frame, body: &Value, peer: &str) {
        let req = body.get("req").cloned().unwrap_or(Value::from(0));
        let error = serde_json::json!({"code": "ROUTE_UNAVAILABLE", "message": format!("{peer} is not connected")});
        let reply = match frame.ty {
            MsgType::EXEC_REQUEST | MsgType::PROOF | MsgType::BLOB_CHUNK => Some(Frame::json(
                MsgType::EXEC_RESULT,
                &serde_json::json!({"req": req, "peer": peer, "error": {
                    "code": "ROUTE_UNAVAILABLE", "message": error["message"], "exit_status": -1}}),
            )),
            MsgType::DOC_REQUEST => Some(Frame::json(MsgType::DOC_RESPONSE, &serde_json::json!({"req": req, "peer": peer, "error": error}))),
            _ => None,
        };
        if let Some(r) = reply {
            let _ = session.send(&r);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_file() {
        let t = parse_tokens("# partners\nacme: s3cret\n\nbeta:t2\n").unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t["acme"], "s3cret");
        assert!(parse_tokens("acme").is_err());
        assert!(parse_tokens("a:x\na:y").is_err());
        assert!(parse_tokens("a b:x").is_err());
    }

    #[test]
    fn allowlist_excludes_lan_and_session_types() {
        for forbidden in [MsgType::HELLO, MsgType::ERROR, MsgType::RUN_SUBMIT, MsgType::DATA_QUERY, MsgType::RUN_EVENT] {
            assert!(!is_allowed(forbidden.byte()));
        }
        assert_eq!((0..=255u8).filter(|b| is_allowed(*b)).count(), 13);
    }
}
