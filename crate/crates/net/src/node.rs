//! A networked node: peer sessions, component publication, remote
//! execution, run submission and the workflow controller.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex, MutexGuard, RwLock, Weak};
use std::thread;
use std::time::{Duration, Instant};

use serde_json::Value;
use toolweave_core::components::register_builtins;
use toolweave_core::datum::Datum;
use toolweave_core::engine::{local_providers, Controller, Dispatcher, EngineOptions, LocalTools, RunHandle};
use toolweave_core::model::{parse_workflow, plan_placement, validate_graph, Catalog, ComponentRef, Diagnostic};
use toolweave_core::now_ms;
use toolweave_core::store::{sha256_hex, BlobRef, DataStore, RunEvent, RunState};
use toolweave_core::tool::{ExecFailure, ExecutionOutcome, LogSink, LogStream, ToolDescriptor, ToolError, ToolRunner};

use crate::announce::{Announcement, Registry, RemoteComponent, ToolSummary, PUBLIC, UPLINK_PREFIX};
use crate::crypto::{membership_proof, random_bytes, verify_proof, GroupKey, KeyRing, CHALLENGE_LEN};
use crate::frame::{read_frame, write_frame, Frame, FrameError, MsgType, BLOB_CHUNK};
use crate::transport::Duplex;
use crate::wire::*;

const SYNC_TIMEOUT: Duration = Duration::from_secs(10);
const REQUEST_TIMEOUT: Duration = Duration::from_secs(30);

/// Error with a stable code, possibly reported by a peer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetError {
    pub code: String,
    pub message: String,
}

impl NetError {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        NetError { code: code.into(), message: message.into() }
    }

    fn transport(message: impl Into<String>) -> Self {
        NetError::new("TRANSPORT", message)
    }
}

impl fmt::Display for NetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for NetError {}

impl From<FrameError> for NetError {
    fn from(e: FrameError) -> Self {
        NetError::new(e.code(), e.to_string())
    }
}

impl From<io::Error> for NetError {
    fn from(e: io::Error) -> Self {
        NetError::transport(e.to_string())
    }
}

impl From<NetError> for ExecFailure {
    fn from(e: NetError) -> Self {
        ToolError::Remote { code: e.code, message: e.message }.into()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionKind {
    Lan,
    Uplink { client_id: String },
}

struct Session {
    id: u64,
    kind: SessionKind,
    peer_id: String,
    peer_name: String,
    writer: Mutex<Box<dyn Duplex>>,
    ctl: Mutex<Box<dyn Duplex>>,
    closed: AtomicBool,
}

impl Session {
    fn send(&self, frame: &Frame) -> Result<(), NetError> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(NetError::transport(format!("session with {} is closed", self.peer_id)));
        }
        let mut w = lock(&self.writer);
        write_frame(&mut *w, frame).map_err(|e| NetError::transport(e.to_string()))
    }

    fn close(&self) {
        if !self.closed.swap(true, Ordering::SeqCst) {
            lock(&self.ctl).shutdown();
        }
    }

    fn is_uplink(&self) -> bool {
        matches!(self.kind, SessionKind::Uplink { .. })
    }
}

/// A connected peer as seen from this node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerInfo {
    pub session: u64,
    pub kind: SessionKind,
    pub node_id: String,
    pub display_name: String,
}

fn lock<T: ?Sized>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

struct Publication {
    component: ComponentRef,
    group: Option<GroupKey>,
    announcement: Announcement,
}

fn group_label(group: Option<&GroupKey>) -> String {
    group.map_or_else(|| PUBLIC.to_owned(), |k| k.name.clone())
}

/// Incoming blob being reassembled from chunks.
#[derive(Default)]
struct Assembly {
    parts: HashMap<String, Vec<u8>>,
}

impl Assembly {
    /// Returns the complete, verified bytes once the last chunk arrives.
    fn push(&mut self, chunk: &BlobChunk, data: &[u8]) -> Result<Option<Vec<u8>>, NetError> {
        let buf = self.parts.entry(chunk.digest.clone()).or_default();
        let corrupt = |m: &str| NetError::new("TRANSFER_CORRUPT", format!("blob {}: {m}", chunk.digest));
        if chunk.offset != buf.len() as u64 {
            return Err(corrupt("chunk out of order"));
        }
        if buf.len() as u64 + data.len() as u64 > chunk.total {
            return Err(corrupt("more bytes than announced"));
        }
        buf.extend_from_slice(data);
        if (buf.len() as u64) < chunk.total {
            return Ok(None);
        }
        let bytes = self.parts.remove(&chunk.digest).unwrap_or_default();
        if sha256_hex(&bytes) != chunk.digest {
            return Err(corrupt("digest mismatch"));
        }
        Ok(Some(bytes))
    }
}

fn send_blob(session: &Session, peer: &Option<String>, req: u64, input: bool, digest: &str, bytes: &[u8]) -> Result<(), NetError> {
    let mut offset = 0;
    loop {
        let end = (offset + BLOB_CHUNK).min(bytes.len());
        let chunk = BlobChunk { req, peer: peer.clone(), input, digest: digest.to_owned(), offset: offset as u64, total: bytes.len() as u64 };
        session.send(&Frame::json(MsgType::BLOB_CHUNK, &chunk).with_binary(bytes[offset..end].to_vec()))?;
        offset = end;
        if offset >= bytes.len() {
            return Ok(());
        }
    }
}

fn file_digests<'a>(values: impl Iterator<Item = &'a Datum>) -> BTreeSet<String> {
    values.filter_map(Datum::file_ref).map(|f| f.digest.clone()).collect()
}

/// Host-side state of one remote execution request.
struct HostExec {
    request: ExecRequest,
    key: Option<GroupKey>,
    nonce: Option<[u8; CHALLENGE_LEN]>,
    authorized: bool,
    expected: BTreeSet<String>,
    assembly: Assembly,
}

type HostKey = (u64, Option<String>, u64);

/// Rejected run submission.
#[derive(Debug, Clone, PartialEq)]
pub struct SubmitError {
    pub code: String,
    pub message: String,
    pub diagnostics: Vec<Diagnostic>,
}

impl fmt::Display for SubmitError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)?;
        for d in &self.diagnostics {
            write!(f, "\n  {d}")?;
        }
        Ok(())
    }
}

impl From<NetError> for SubmitError {
    fn from(e: NetError) -> Self {
        SubmitError { code: e.code, message: e.message, diagnostics: vec![] }
    }
}

/// A run submitted to a remote controller.
#[derive(Debug)]
pub struct RemoteRun {
    pub run_id: String,
    /// Run events, present when submitted with `watch`; ends after `run_finished`.
    pub events: Option<Receiver<RunEvent>>,
}

/// Final state carried by a `run_finished` event.
pub fn finished_state(event: &RunEvent) -> Option<RunState> {
    if event.kind != "run_finished" {
        return None;
    }
    let detail = event.detail.as_deref()?;
    let word = detail.split(':').next()?.trim();
    serde_json::from_value(Value::String(word.to_owned())).ok()
}

pub struct NodeSetup {
    pub node_id: String,
    pub display_name: String,
    pub store_dir: PathBuf,
    pub work_dir: PathBuf,
    pub keys: KeyRing,
    pub engine: EngineOptions,
}

struct Inner {
    id: String,
    name: String,
    store: Arc<DataStore>,
    tools: Arc<LocalTools>,
    controller: Controller,
    keys: RwLock<KeyRing>,
    publications: Mutex<BTreeMap<(String, String), Publication>>,
    registry: Mutex<Registry>,
    sessions: Mutex<BTreeMap<u64, Arc<Session>>>,
    pending: Mutex<HashMap<u64, (u64, Sender<Frame>)>>,
    host_execs: Mutex<HashMap<HostKey, HostExec>>,
    next_id: AtomicU64,
    last_sequence: Mutex<u64>,
    listeners: Mutex<Vec<(SocketAddr, Arc<AtomicBool>)>>,
}

/// Cheap to clone; all clones share one node.
#[derive(Clone)]
pub struct Node(Arc<Inner>);

struct NetDispatcher(Weak<Inner>);

impl Dispatcher for NetDispatcher {
    fn is_reachable(&self, node: &str) -> bool {
        self.0.upgrade().is_some_and(|inner| node == inner.id || inner.route(node).is_some())
    }

    fn execute(
        &self,
        node: &str,
        component: &ComponentRef,
        inputs: &BTreeMap<String, Datum>,
        sink: LogSink<'_>,
    ) -> Result<ExecutionOutcome, ExecFailure> {
        let inner = self.0.upgrade().ok_or_else(|| NetError::new("NODE_UNREACHABLE", "node is shutting down"))?;
        if node == inner.id {
            return inner.tools.execute_local(component, inputs, sink);
        }
        let group = inner
            .remote_components()
            .into_iter()
            .filter(|rc| rc.publisher == node && &rc.component == component)
            .map(|rc| rc.group)
            .next()
            .ok_or_else(|| NetError::new("UNKNOWN_COMPONENT", format!("{node} does not publish {component}")))?;
        let group = if group == PUBLIC {
            PUBLIC.to_owned()
        } else {
            group.rsplit('/').next().unwrap_or_default().to_owned()
        };
        inner.remote_execute(node, component, &group, inputs, sink)
    }
}

/// Removes a pending request entry when the caller is done with it.
struct PendingGuard<'a>(&'a Inner, u64);

impl Drop for PendingGuard<'_> {
    fn drop(&mut self) {
        lock(&self.0.pending).remove(&self.1);
    }
}

impl Node {
    pub fn new(setup: NodeSetup) -> Result<Node, NetError> {
        let store = Arc::new(DataStore::open(&setup.store_dir).map_err(|e| NetError::new("IO", e.to_string()))?);
        let runner = Arc::new(ToolRunner::new(setup.work_dir, store.blobs().clone()));
        let tools = Arc::new(LocalTools::new(setup.node_id.clone(), runner.clone()));
        let inner = Arc::new_cyclic(|weak: &Weak<Inner>| Inner {
            controller: Controller::new(
                setup.node_id.clone(),
                store.clone(),
                Arc::new(NetDispatcher(weak.clone())),
                runner,
                setup.engine,
            ),
            id: setup.node_id,
            name: setup.display_name,
            store,
            tools,
            keys: RwLock::new(setup.keys),
            publications: Mutex::new(BTreeMap::new()),
            registry: Mutex::new(Registry::new()),
            sessions: Mutex::new(BTreeMap::new()),
            pending: Mutex::new(HashMap::new()),
            host_execs: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            last_sequence: Mutex::new(0),
            listeners: Mutex::new(Vec::new()),
        });
        Ok(Node(inner))
    }

    pub fn id(&self) -> &str {
        &self.0.id
    }

    pub fn display_name(&self) -> &str {
        &self.0.name
    }

    pub fn store(&self) -> &Arc<DataStore> {
        &self.0.store
    }

    pub fn tools(&self) -> &Arc<LocalTools> {
        &self.0.tools
    }

    pub fn runner(&self) -> &Arc<ToolRunner> {
        self.0.tools.runner()
    }

    pub fn controller(&self) -> &Controller {
        &self.0.controller
    }

    pub fn keys(&self) -> KeyRing {
        self.0.keys.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn add_key(&self, key: GroupKey) {
        self.0.keys.write().unwrap_or_else(|p| p.into_inner()).insert(key);
    }

    /// Installs or replaces a tool; published tools are re-announced.
    pub fn install_tool(&self, desc: ToolDescriptor) {
        let component = desc.component_ref();
        self.0.tools.install(desc);
        let republish: Vec<_> = lock(&self.0.publications)
            .values()
            .filter(|p| p.component == component)
            .map(|p| p.group.as_ref().map(|k| k.name.clone()))
            .collect();
        for group in republish {
            if let Err(e) = self.publish(&component, group.as_deref()) {
                log::warn!("re-announcing {component}: {e}");
            }
        }
    }

    /// Publishes an installed tool to a group (`None` = PUBLIC). Replaces any
    /// earlier publication of the same tool name in that group.
    pub fn publish(&self, component: &ComponentRef, group: Option<&str>) -> Result<Announcement, NetError> {
        let inner = &self.0;
        let desc = inner
            .tools
            .get(component)
            .ok_or_else(|| NetError::new("UNKNOWN_COMPONENT", format!("{component} is not installed")))?;
        let key = match group {
            None => None,
            Some(name) => Some(
                self.keys().get(name).cloned().ok_or_else(|| NetError::new("UNKNOWN_GROUP", format!("no key for group `{name}`")))?,
            ),
        };
        let ann = Announcement::publish(&inner.id, key.as_ref(), &ToolSummary::of(&desc), inner.next_sequence());
        lock(&inner.publications).insert(
            (component.name.clone(), group_label(key.as_ref())),
            Publication { component: component.clone(), group: key, announcement: ann.clone() },
        );
        inner.broadcast(&Frame::json(MsgType::ANNOUNCE, &ann));
        Ok(ann)
    }

    pub fn unpublish(&self, component: &ComponentRef, group: Option<&str>) -> Result<Announcement, NetError> {
        let inner = &self.0;
        let label = group.unwrap_or(PUBLIC).to_owned();
        let mut pubs = lock(&inner.publications);
        let key = (component.name.clone(), label);
        match pubs.get(&key) {
            Some(p) if &p.component == component => {}
            _ => return Err(NetError::new("UNKNOWN_COMPONENT", format!("{component} is not published to {}", key.1))),
        }
        let p = pubs.remove(&key).expect("checked above");
        drop(pubs);
        let tomb = Announcement::retract(&inner.id, p.group.as_ref(), &component.name, inner.next_sequence());
        inner.broadcast(&Frame::json(MsgType::RETRACT, &tomb));
        Ok(tomb)
    }

    /// `(component, group label)` pairs this node publishes.
    pub fn publications(&self) -> Vec<(ComponentRef, String)> {
        lock(&self.0.publications).iter().map(|((_, g), p)| (p.component.clone(), g.clone())).collect()
    }

    pub fn remote_components(&self) -> Vec<RemoteComponent> {
        self.0.remote_components()
    }

    /// Nodes able to run each component: this node for local tools and
    /// built-ins, publishers for remote tools.
    pub fn providers(&self) -> BTreeMap<ComponentRef, BTreeSet<String>> {
        self.0.providers()
    }

    pub fn catalog(&self) -> Catalog {
        self.0.catalog()
    }

    /// Parses, validates, places and starts a workflow with this node as controller.
    pub fn submit(&self, workflow: &str, overrides: &BTreeMap<String, String>) -> Result<RunHandle, SubmitError> {
        self.0.submit(workflow, overrides)
    }

    pub fn peers(&self) -> Vec<PeerInfo> {
        lock(&self.0.sessions)
            .values()
            .map(|s| PeerInfo { session: s.id, kind: s.kind.clone(), node_id: s.peer_id.clone(), display_name: s.peer_name.clone() })
            .collect()
    }

    /// Performs the LAN handshake over `stream` and starts serving it.
    pub fn connect(&self, stream: Box<dyn Duplex>) -> Result<PeerInfo, NetError> {
        let inner = &self.0;
        let mut reader = stream.try_clone_box()?;
        let ctl = stream.try_clone_box()?;
        let mut writer = stream;
        let hello = Hello { protocol_version: PROTOCOL_VERSION, node_id: inner.id.clone(), display_name: inner.name.clone(), client_id: None, token: None };
        write_frame(&mut writer, &Frame::json(MsgType::HELLO, &hello))?;
        let reject = |writer: &mut Box<dyn Duplex>, code: &str, message: String| {
            let _ = write_frame(writer, &Frame::json(MsgType::ERROR, &ErrorBody::new(code, message.clone())));
            ctl.shutdown();
            NetError::new(code, message)
        };
        let frame = match read_frame(&mut reader) {
            Ok(f) => f,
            Err(e) => {
                ctl.shutdown();
                return Err(e.into());
            }
        };
        if frame.ty == MsgType::ERROR {
            ctl.shutdown();
            let e: ErrorBody = frame.parse().unwrap_or_else(|_| ErrorBody::new("HANDSHAKE", "peer refused"));
            return Err(NetError::new(e.code, e.message));
        }
        if frame.ty != MsgType::HELLO {
            return Err(reject(&mut writer, "HANDSHAKE", format!("expected HELLO, got {}", frame.ty)));
        }
        let theirs: Hello = match frame.parse() {
            Ok(h) => h,
            Err(e) => return Err(reject(&mut writer, "HANDSHAKE", e.to_string())),
        };
        if theirs.protocol_version != PROTOCOL_VERSION {
            return Err(reject(&mut writer, "VERSION_MISMATCH", format!("protocol version {} not supported", theirs.protocol_version)));
        }
        if theirs.client_id.is_some() || theirs.node_id == inner.id || theirs.node_id.starts_with(UPLINK_PREFIX) {
            return Err(reject(&mut writer, "HANDSHAKE", format!("unacceptable peer id `{}`", theirs.node_id)));
        }
        let session = inner.register(SessionKind::Lan, theirs.node_id, theirs.display_name, writer, ctl);
        self.serve(session.clone(), reader);
        inner.sync_session(&session)?;
        Ok(inner.peer_info(&session))
    }

    pub fn connect_tcp(&self, addr: impl ToSocketAddrs) -> Result<PeerInfo, NetError> {
        let stream = TcpStream::connect(addr)?;
        let _ = stream.set_nodelay(true);
        self.connect(Box::new(stream))
    }

    /// Accepts LAN peers on `addr` until [`Node::shutdown`].
    pub fn listen(&self, addr: impl ToSocketAddrs) -> Result<SocketAddr, NetError> {
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        lock(&self.0.listeners).push((local, stop.clone()));
        let node = self.clone();
        thread::Builder::new().name(format!("listen-{local}")).spawn(move || {
            for conn in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let _ = stream.set_nodelay(true);
                let node = node.clone();
                thread::spawn(move || {
                    let remote = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
                    match node.connect(Box::new(stream)) {
                        Ok(p) => log::info!("peer {} ({}) connected from {remote}", p.node_id, p.display_name),
                        Err(e) => log::warn!("handshake with {remote} failed: {e}"),
                    }
                });
            }
        })?;
        Ok(local)
    }

    /// Joins an uplink relay as `client_id` and announces published tools through it.
    pub fn uplink_attach(&self, stream: Box<dyn Duplex>, client_id: &str, token: &str) -> Result<PeerInfo, NetError> {
        let inner = &self.0;
        let mut reader = stream.try_clone_box()?;
        let ctl = stream.try_clone_box()?;
        let mut writer = stream;
        let hello = Hello {
            protocol_version: PROTOCOL_VERSION,
            node_id: inner.id.clone(),
            display_name: inner.name.clone(),
            client_id: Some(client_id.to_owned()),
            token: Some(token.to_owned()),
        };
        write_frame(&mut writer, &Frame::json(MsgType::HELLO, &hello))?;
        let frame = read_frame(&mut reader).inspect_err(|_| ctl.shutdown())?;
        let theirs: Hello = match frame.ty {
            MsgType::HELLO => frame.parse()?,
            MsgType::ERROR => {
                ctl.shutdown();
                let e: ErrorBody = frame.parse()?;
                return Err(NetError::new(e.code, e.message));
            }
            other => {
                ctl.shutdown();
                return Err(NetError::new("HANDSHAKE", format!("relay answered with {other}")));
            }
        };
        let session =
            inner.register(SessionKind::Uplink { client_id: client_id.to_owned() }, theirs.node_id, theirs.display_name, writer, ctl);
        self.serve(session.clone(), reader);
        let anns: Vec<_> = lock(&inner.publications).values().map(|p| p.announcement.clone()).collect();
        for a in anns {
            session.send(&Frame::json(MsgType::ANNOUNCE, &a))?;
        }
        inner.sync_session(&session)?;
        Ok(inner.peer_info(&session))
    }

    /// Keeps an uplink session alive, reconnecting with bounded backoff.
    /// The first attempt is made before returning.
    pub fn uplink_maintain(
        &self,
        connector: Box<dyn Fn() -> io::Result<Box<dyn Duplex>> + Send>,
        client_id: &str,
        token: &str,
    ) -> Result<UplinkLink, NetError> {
        let first = self.uplink_attach(connector()?, client_id, token)?;
        let stop = Arc::new(AtomicBool::new(false));
        let link = UplinkLink { stop: stop.clone(), reconnects: Arc::new(AtomicU64::new(0)) };
        let reconnects = link.reconnects.clone();
        let node = self.clone();
        let (cid, token) = (client_id.to_owned(), token.to_owned());
        thread::Builder::new().name(format!("uplink-{cid}")).spawn(move || {
            let mut session = first.session;
            let mut backoff = Duration::from_millis(100);
            while !stop.load(Ordering::SeqCst) {
                if node.0.session_alive(session) {
                    thread::sleep(Duration::from_millis(50));
                    continue;
                }
                thread::sleep(backoff);
                match connector().map_err(NetError::from).and_then(|s| node.uplink_attach(s, &cid, &token)) {
                    Ok(p) => {
                        log::info!("uplink {cid}: reconnected");
                        session = p.session;
                        backoff = Duration::from_millis(100);
                        reconnects.fetch_add(1, Ordering::SeqCst);
                    }
                    Err(e) if e.code == "AUTH_FAILED" => {
                        log::error!("uplink {cid}: {e}; giving up");
                        break;
                    }
                    Err(e) => {
                        log::warn!("uplink {cid}: reconnect failed: {e}");
                        backoff = (backoff * 2).min(Duration::from_secs(5));
                    }
                }
            }
        })?;
        Ok(link)
    }

    /// Re-requests every peer's announcements.
    pub fn sync(&self) -> Result<(), NetError> {
        let sessions: Vec<_> = lock(&self.0.sessions).values().cloned().collect();
        for s in sessions {
            self.0.sync_session(&s)?;
        }
        Ok(())
    }

    pub fn ping(&self, peer: &str) -> Result<Duration, NetError> {
        let (session, route) = self.0.route(peer).ok_or_else(|| unreachable(peer))?;
        let start = Instant::now();
        let req = self.0.next();
        let rx = self.0.expect_reply(req, session.id);
        let _g = PendingGuard(&self.0, req);
        session.send(&Frame::json(MsgType::PING, &Ping { req, peer: route }))?;
        self.0.recv(&rx, REQUEST_TIMEOUT)?;
        Ok(start.elapsed())
    }

    /// Executes `component` on `peer` under `group` (`PUBLIC` or a key id).
    pub fn remote_execute(
        &self,
        peer: &str,
        component: &ComponentRef,
        group: &str,
        inputs: &BTreeMap<String, Datum>,
        sink: LogSink<'_>,
    ) -> Result<ExecutionOutcome, ExecFailure> {
        self.0.remote_execute(peer, component, group, inputs, sink)
    }

    pub fn fetch_documentation(&self, peer: &str, component: &ComponentRef) -> Result<String, NetError> {
        let inner = &self.0;
        let (session, route) = inner.route(peer).ok_or_else(|| unreachable(peer))?;
        let req = inner.next();
        let rx = inner.expect_reply(req, session.id);
        let _g = PendingGuard(inner, req);
        let component = if route.is_some() { strip_namespace(component) } else { component.clone() };
        session.send(&Frame::json(MsgType::DOC_REQUEST, &DocRequest { req, peer: route, component }))?;
        let resp: DocResponse = inner.recv(&rx, REQUEST_TIMEOUT)?.parse()?;
        match (resp.documentation, resp.error) {
            (Some(doc), _) => Ok(doc),
            (None, Some(e)) => Err(NetError::new(e.code, e.message)),
            (None, None) => Err(NetError::new("MALFORMED", "empty documentation response")),
        }
    }

    /// Submits a workflow to the controller `peer` (a LAN peer).
    pub fn submit_remote(
        &self,
        peer: &str,
        workflow: &str,
        overrides: &BTreeMap<String, String>,
        watch: bool,
    ) -> Result<RemoteRun, SubmitError> {
        let inner = self.0.clone();
        let (session, route) = inner.route(peer).ok_or_else(|| unreachable(peer))?;
        if route.is_some() {
            return Err(NetError::new("FORBIDDEN", "runs cannot be submitted through an uplink relay").into());
        }
        let req = inner.next();
        let rx = inner.expect_reply(req, session.id);
        let guard = PendingGuard(&inner, req);
        session.send(&Frame::json(
            MsgType::RUN_SUBMIT,
            &RunSubmit { req, workflow: workflow.to_owned(), overrides: overrides.clone(), watch },
        ))?;
        let accepted: RunAccepted = inner.recv(&rx, REQUEST_TIMEOUT)?.parse().map_err(NetError::from)?;
        let run_id = match (accepted.run_id, accepted.error) {
            (Some(id), _) => id,
            (None, Some(e)) => return Err(SubmitError { code: e.code, message: e.message, diagnostics: accepted.diagnostics }),
            (None, None) => return Err(NetError::new("MALFORMED", "empty RUN_ACCEPTED").into()),
        };
        if !watch {
            return Ok(RemoteRun { run_id, events: None });
        }
        std::mem::forget(guard);
        let (tx, events) = channel();
        let inner2 = inner.clone();
        thread::spawn(move || {
            let _g = PendingGuard(&inner2, req);
            for frame in rx.iter() {
                let Ok(msg) = frame.parse::<RunEventMsg>() else { continue };
                let last = msg.event.kind == "run_finished";
                if tx.send(msg.event).is_err() || last {
                    break;
                }
            }
        });
        Ok(RemoteRun { run_id, events: Some(events) })
    }

    pub fn data_query(&self, peer: &str, query: DataQueryKind) -> Result<Value, NetError> {
        let inner = &self.0;
        let (session, route) = inner.route(peer).ok_or_else(|| unreachable(peer))?;
        if route.is_some() {
            return Err(NetError::new("FORBIDDEN", "data queries cannot cross an uplink relay"));
        }
        let req = inner.next();
        let rx = inner.expect_reply(req, session.id);
        let _g = PendingGuard(inner, req);
        session.send(&Frame::json(MsgType::DATA_QUERY, &DataQuery { req, query }))?;
        let resp: DataResponse = inner.recv(&rx, REQUEST_TIMEOUT)?.parse()?;
        match (resp.result, resp.error) {
            (Some(v), _) => Ok(v),
            (None, Some(e)) => Err(NetError::new(e.code, e.message)),
            (None, None) => Ok(Value::Null),
        }
    }

    /// Closes the session(s) with `peer`.
    pub fn disconnect(&self, peer: &str) {
        let sessions: Vec<_> = lock(&self.0.sessions).values().filter(|s| s.peer_id == peer).cloned().collect();
        for s in sessions {
            s.close();
        }
    }

    pub fn shutdown(&self) {
        for (addr, stop) in lock(&self.0.listeners).drain(..) {
            stop.store(true, Ordering::SeqCst);
            let _ = TcpStream::connect_timeout(&addr, Duration::from_millis(200));
        }
        let sessions: Vec<_> = lock(&self.0.sessions).values().cloned().collect();
        for s in sessions {
            s.close();
        }
    }

    fn serve(&self, session: Arc<Session>, mut reader: Box<dyn Duplex>) {
        let inner = self.0.clone();
        let name = format!("session-{}-{}", inner.id.get(..8).unwrap_or(&inner.id), session.id);
        let spawned = thread::Builder::new().name(name).spawn(move || {
            loop {
                match read_frame(&mut reader) {
                    Ok(frame) => {
                        if let Err(e) = inner.handle(&session, frame) {
                            log::warn!("session with {}: {e}", session.peer_id);
                            let _ = session.send(&Frame::json(MsgType::ERROR, &ErrorBody::new(e.code, e.message)));
                            break;
                        }
                    }
                    Err(FrameError::Closed) => break,
                    Err(e) => {
                        if !session.closed.load(Ordering::SeqCst) {
                            log::warn!("session with {}: {e}", session.peer_id);
                        }
                        break;
                    }
                }
                if session.closed.load(Ordering::SeqCst) {
                    break;
                }
            }
            inner.on_closed(&session);
        });
        if let Err(e) = spawned {
            log::error!("cannot start session thread: {e}");
        }
    }
}

fn unreachable(peer: &str) -> NetError {
    NetError::new("NODE_UNREACHABLE", format!("no session with {peer}"))
}

fn strip_namespace(component: &ComponentRef) -> ComponentRef {
    let name = component.name.split_once("::").map_or(component.name.as_str(), |(_, n)| n);
    ComponentRef::new(name, component.version.clone())
}

/// Handle to a maintained uplink session.
pub struct UplinkLink {
    stop: Arc<AtomicBool>,
    reconnects: Arc<AtomicU64>,
}

impl UplinkLink {
    pub fn reconnects(&self) -> u64 {
        self.reconnects.load(Ordering::SeqCst)
    }

    pub fn stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }
}

impl Drop for UplinkLink {
    fn drop(&mut self) {
        self.stop();
    }
}

impl Inner {
    fn next(&self) -> u64 {
        self.next_id.fetch_add(1, Ordering::SeqCst)
    }

    /// Strictly increasing, and ahead of anything sent before a restart.
    fn next_sequence(&self) -> u64 {
        let mut last = lock(&self.last_sequence);
        *last = (*last + 1).max(now_ms() * 1000);
        *last
    }

    fn register(&self, kind: SessionKind, peer_id: String, peer_name: String, writer: Box<dyn Duplex>, ctl: Box<dyn Duplex>) -> Arc<Session> {
        let session = Arc::new(Session {
            id: self.next(),
            kind,
            peer_id,
            peer_name,
            writer: Mutex::new(writer),
            ctl: Mutex::new(ctl),
            closed: AtomicBool::new(false),
        });
        lock(&self.sessions).insert(session.id, session.clone());
        session
    }

    fn peer_info(&self, s: &Session) -> PeerInfo {
        PeerInfo { session: s.id, kind: s.kind.clone(), node_id: s.peer_id.clone(), display_name: s.peer_name.clone() }
    }

    fn session_alive(&self, id: u64) -> bool {
        lock(&self.sessions).get(&id).is_some_and(|s| !s.closed.load(Ordering::SeqCst))
    }

    /// Session and relay routing field for reaching `node`.
    fn route(&self, node: &str) -> Option<(Arc<Session>, Option<String>)> {
        let sessions = lock(&self.sessions);
        let live = sessions.values().filter(|s| !s.closed.load(Ordering::SeqCst));
        if node.starts_with(UPLINK_PREFIX) {
            live.into_iter().find(|s| s.is_uplink()).map(|s| (s.clone(), Some(node.to_owned())))
        } else {
            live.into_iter().find(|s| !s.is_uplink() && s.peer_id == node).map(|s| (s.clone(), None))
        }
    }

    fn broadcast(&self, frame: &Frame) {
        let sessions: Vec<_> = lock(&self.sessions).values().cloned().collect();
        for s in sessions {
            if let Err(e) = s.send(frame) {
                log::warn!("announcing to {}: {e}", s.peer_id);
            }
        }
    }

    fn remote_components(&self) -> Vec<RemoteComponent> {
        let keys = self.keys.read().unwrap_or_else(|p| p.into_inner());
        lock(&self.registry).list(&keys)
    }

    fn expect_reply(&self, req: u64, session: u64) -> Receiver<Frame> {
        let (tx, rx) = channel();
        lock(&self.pending).insert(req, (session, tx));
        rx
    }

    fn recv(&self, rx: &Receiver<Frame>, timeout: Duration) -> Result<Frame, NetError> {
        match rx.recv_timeout(timeout) {
            Ok(f) if f.ty == MsgType::ERROR => {
                let e: ErrorBody = f.parse()?;
                Err(NetError::new(e.code, e.message))
            }
            Ok(f) => Ok(f),
            Err(RecvTimeoutError::Timeout) => Err(NetError::new("TIMEOUT", "no reply from peer")),
            Err(RecvTimeoutError::Disconnected) => Err(NetError::transport("connection lost")),
        }
    }

    fn sync_session(&self, session: &Arc<Session>) -> Result<(), NetError> {
        let req = self.next();
        let rx = self.expect_reply(req, session.id);
        let _g = PendingGuard(self, req);
        session.send(&Frame::json(MsgType::LIST, &List { req, peer: None, announcements: None }))?;
        let reply: List = self.recv(&rx, SYNC_TIMEOUT)?.parse()?;
        let anns = reply.announcements.unwrap_or_default();
        let mut reg = lock(&self.registry);
        if session.is_uplink() {
            reg.retain_publishers(|p| !p.starts_with(UPLINK_PREFIX));
        } else {
            reg.remove_publisher(&session.peer_id);
        }
        for a in anns {
            if self.acceptable_publisher(session, &a) {
                reg.apply(a);
            }
        }
        Ok(())
    }

    fn acceptable_publisher(&self, session: &Session, a: &Announcement) -> bool {
        if session.is_uplink() {
            a.publisher.starts_with(UPLINK_PREFIX)
        } else {
            a.publisher == session.peer_id
        }
    }

    fn on_closed(&self, session: &Arc<Session>) {
        session.close();
        let mut sessions = lock(&self.sessions);
        sessions.remove(&session.id);
        let still_connected = sessions.values().any(|s| s.is_uplink() == session.is_uplink() && (session.is_uplink() || s.peer_id == session.peer_id));
        drop(sessions);
        lock(&self.pending).retain(|_, (sid, _)| *sid != session.id);
        lock(&self.host_execs).retain(|(sid, _, _), _| *sid != session.id);
        if !still_connected {
            let mut reg = lock(&self.registry);
            if session.is_uplink() {
                reg.retain_publishers(|p| !p.starts_with(UPLINK_PREFIX));
            } else {
                reg.remove_publisher(&session.peer_id);
            }
        }
        log::info!("session with {} closed", session.peer_id);
    }

    /// Handles one incoming frame. An error closes the session.
    fn handle(self: &Arc<Self>, session: &Arc<Session>, frame: Frame) -> Result<(), NetError> {
        use MsgType::*;
        match frame.ty {
            HELLO => return Err(NetError::new("PROTOCOL_VIOLATION", "unexpected HELLO")),
            ERROR => {
                let e: ErrorBody = frame.parse()?;
                log::warn!("{} reported {}: {}", session.peer_id, e.code, e.message);
                session.close();
            }
            ANNOUNCE | RETRACT => {
                let a: Announcement = frame.parse()?;
                if self.acceptable_publisher(session, &a) {
                    lock(&self.registry).apply(a);
                } else {
                    log::warn!("ignoring announcement for {} from {}", a.publisher, session.peer_id);
                }
            }
            LIST => {
                let list: List = frame.parse()?;
                if list.announcements.is_some() {
                    self.deliver(list.req, frame);
                } else {
                    let anns = lock(&self.publications).values().map(|p| p.announcement.clone()).collect();
                    session.send(&Frame::json(LIST, &List { req: list.req, peer: list.peer, announcements: Some(anns) }))?;
                }
            }
            PING => {
                let p: Ping = frame.parse()?;
                session.send(&Frame::json(PONG, &p))?;
            }
            EXEC_REQUEST => self.host_request(session, frame.parse()?)?,
            PROOF => self.host_proof(session, frame.parse()?)?,
            BLOB_CHUNK => {
                let chunk: BlobChunk = frame.parse()?;
                if chunk.input {
                    self.host_chunk(session, chunk, frame.binary.as_deref().unwrap_or_default())?;
                } else {
                    self.deliver(chunk.req, frame);
                }
            }
            DOC_REQUEST => {
                let r: DocRequest = frame.parse()?;
                let published = lock(&self.publications).values().any(|p| p.component == r.component);
                let doc = self.tools.get(&r.component).filter(|_| published).map(|d| d.documentation.unwrap_or_default());
                let error = doc.is_none().then(|| ErrorBody::new("UNKNOWN_COMPONENT", format!("{} is not published", r.component)));
                session.send(&Frame::json(DOC_RESPONSE, &DocResponse { req: r.req, peer: r.peer, documentation: doc, error }))?;
            }
            RUN_SUBMIT | DATA_QUERY if session.is_uplink() => {
                return Err(NetError::new("PROTOCOL_VIOLATION", format!("{} is not allowed over an uplink", frame.ty)));
            }
            RUN_SUBMIT => self.serve_submit(session, frame.parse()?)?,
            DATA_QUERY => {
                let q: DataQuery = frame.parse()?;
                let (result, error) = match &q.query {
                    DataQueryKind::Runs => (Some(serde_json::to_value(self.store.list_runs()).unwrap_or_default()), None),
                    DataQueryKind::Show { run_id } => match self.store.query_run(run_id) {
                        Ok(r) => (Some(serde_json::to_value(r).unwrap_or_default()), None),
                        Err(e) => (None, Some(ErrorBody::new(e.code(), e.to_string()))),
                    },
                };
                session.send(&Frame::json(DATA_RESPONSE, &DataResponse { req: q.req, result, error }))?;
            }
            CHALLENGE | LOG_CHUNK | EXEC_RESULT | DOC_RESPONSE | PONG | RUN_ACCEPTED | RUN_EVENT | DATA_RESPONSE => {
                match req_of(&frame.body) {
                    Some(req) => self.deliver(req, frame),
                    None => return Err(NetError::new("MALFORMED", format!("{} without request id", frame.ty))),
                }
            }
        }
        Ok(())
    }

    fn deliver(&self, req: u64, frame: Frame) {
        let tx = lock(&self.pending).get(&req).map(|(_, tx)| tx.clone());
        match tx {
            Some(tx) => {
                let _ = tx.send(frame);
            }
            None => log::debug!("dropping {} for finished request {req}", frame.ty),
        }
    }

    fn remote_execute(
        &self,
        peer: &str,
        component: &ComponentRef,
        group: &str,
        inputs: &BTreeMap<String, Datum>,
        sink: LogSink<'_>,
    ) -> Result<ExecutionOutcome, ExecFailure> {
        let (session, route) = self.route(peer).ok_or_else(|| unreachable(peer))?;
        let req = self.next();
        let rx = self.expect_reply(req, session.id);
        let _g = PendingGuard(self, req);
        let wire_component = if route.is_some() { strip_namespace(component) } else { component.clone() };
        let request = ExecRequest { req, peer: route.clone(), component: wire_component, group: group.to_owned(), inputs: inputs.clone() };
        session.send(&Frame::json(MsgType::EXEC_REQUEST, &request))?;

        let first = self.recv(&rx, REQUEST_TIMEOUT)?;
        if first.ty == MsgType::EXEC_RESULT {
            return result_of(first.parse().map_err(NetError::from)?, &self.store);
        }
        let challenge: Challenge = first.parse().map_err(NetError::from)?;
        let tag = match challenge.nonce {
            None => None,
            Some(nonce) => {
                let nonce = hex::decode(nonce).map_err(|e| NetError::new("MALFORMED", e.to_string()))?;
                let digest: [u8; 32] = sha2_digest(&request.canonical_bytes());
                let keys = self.keys.read().unwrap_or_else(|p| p.into_inner());
                // without the key a proof cannot be formed; the host decides
                let tag = match keys.by_key_id(group) {
                    Some(k) => membership_proof(&k.material().mac_key, &nonce, &digest),
                    None => random_bytes::<32>(),
                };
                Some(hex::encode(tag))
            }
        };
        session.send(&Frame::json(MsgType::PROOF, &Proof { req, peer: route.clone(), tag }))?;
        for digest in file_digests(inputs.values()) {
            let bytes = self.store.blobs().get(&digest).map_err(|e| NetError::new("IO", e.to_string()))?;
            send_blob(&session, &route, req, true, &digest, &bytes)?;
        }

        let mut assembly = Assembly::default();
        loop {
            // tools may run for a long time; only a lost session ends the wait
            let frame = match rx.recv() {
                Ok(f) => f,
                Err(_) => return Err(NetError::transport(format!("connection to {peer} lost")).into()),
            };
            match frame.ty {
                MsgType::LOG_CHUNK => {
                    let chunk: LogChunk = frame.parse().map_err(NetError::from)?;
                    sink(chunk.stream, frame.binary.as_deref().unwrap_or_default());
                }
                MsgType::BLOB_CHUNK => {
                    let chunk: BlobChunk = frame.parse().map_err(NetError::from)?;
                    if let Some(bytes) = assembly.push(&chunk, frame.binary.as_deref().unwrap_or_default())? {
                        self.store.put_blob(&bytes).map_err(|e| NetError::new("IO", e.to_string()))?;
                    }
                }
                MsgType::EXEC_RESULT => return result_of(frame.parse().map_err(NetError::from)?, &self.store),
                MsgType::ERROR => {
                    let e: ErrorBody = frame.parse().map_err(NetError::from)?;
                    return Err(NetError::new(e.code, e.message).into());
                }
                other => log::debug!("ignoring {other} during execution {req}"),
            }
        }
    }

    fn host_request(self: &Arc<Self>, session: &Arc<Session>, request: ExecRequest) -> Result<(), NetError> {
        let key = {
            let pubs = lock(&self.publications);
            pubs.values()
                .find(|p| {
                    p.component == request.component
                        && match &p.group {
                            None => request.group == PUBLIC,
                            Some(k) => k.key_id() == request.group,
                        }
                })
                .map(|p| p.group.clone())
        };
        let Some(key) = key else {
            let msg = format!("{} is not published to {}", request.component, request.group);
            return send_result_error(session, &request.peer, request.req, "UNKNOWN_COMPONENT", &msg);
        };
        let nonce = key.as_ref().map(|_| random_bytes::<CHALLENGE_LEN>());
        let challenge = Challenge { req: request.req, peer: request.peer.clone(), nonce: nonce.map(hex::encode) };
        let expected = file_digests(request.inputs.values());
        let id = (session.id, request.peer.clone(), request.req);
        lock(&self.host_execs).insert(id, HostExec { request, key, nonce, authorized: false, expected, assembly: Assembly::default() });
        session.send(&Frame::json(MsgType::CHALLENGE, &challenge))
    }

    fn host_proof(self: &Arc<Self>, session: &Arc<Session>, proof: Proof) -> Result<(), NetError> {
        let id = (session.id, proof.peer.clone(), proof.req);
        let mut execs = lock(&self.host_execs);
        let Some(state) = execs.get_mut(&id) else { return Ok(()) };
        if state.authorized {
            return Ok(());
        }
        if let (Some(nonce), Some(key)) = (state.nonce, &state.key) {
            let digest = sha2_digest(&state.request.canonical_bytes());
            let ok = proof
                .tag
                .as_deref()
                .and_then(|t| hex::decode(t).ok())
                .is_some_and(|tag| verify_proof(&key.material().mac_key, &nonce, &digest, &tag));
            if !ok {
                execs.remove(&id);
                drop(execs);
                log::warn!("rejected execution request {} from {}: bad membership proof", proof.req, session.peer_id);
                return send_result_error(session, &proof.peer, proof.req, "AUTH_FAILED", "membership proof rejected");
            }
        }
        state.authorized = true;
        if state.expected.is_empty() {
            let state = execs.remove(&id).expect("present");
            drop(execs);
            self.host_start(session.clone(), state);
        }
        Ok(())
    }

    fn host_chunk(self: &Arc<Self>, session: &Arc<Session>, chunk: BlobChunk, data: &[u8]) -> Result<(), NetError> {
        let id = (session.id, chunk.peer.clone(), chunk.req);
        let mut execs = lock(&self.host_execs);
        let Some(state) = execs.get_mut(&id) else { return Ok(()) };
        if !state.authorized || !state.expected.contains(&chunk.digest) {
            return Ok(());
        }
        let done = match state.assembly.push(&chunk, data) {
            Ok(d) => d,
            Err(e) => {
                execs.remove(&id);
                drop(execs);
                return send_result_error(session, &chunk.peer, chunk.req, &e.code, &e.message);
            }
        };
        if let Some(bytes) = done {
            self.store.put_blob(&bytes).map_err(|e| NetError::new("IO", e.to_string()))?;
            state.expected.remove(&chunk.digest);
            if state.expected.is_empty() {
                let state = execs.remove(&id).expect("present");
                drop(execs);
                self.host_start(session.clone(), state);
            }
        }
        Ok(())
    }

    fn host_start(self: &Arc<Self>, session: Arc<Session>, state: HostExec) {
        let inner = self.clone();
        thread::spawn(move || {
            let HostExec { request, .. } = state;
            let (req, peer) = (request.req, request.peer.clone());
            let sink = |stream: LogStream, bytes: &[u8]| {
                for part in bytes.chunks(BLOB_CHUNK) {
                    let frame = Frame::json(MsgType::LOG_CHUNK, &LogChunk { req, peer: peer.clone(), stream }).with_binary(part.to_vec());
                    let _ = session.send(&frame);
                }
            };
            let result = inner.tools.execute_local(&request.component, &request.inputs, &sink);
            let (refs, body) = match result {
                Ok(o) => {
                    let mut refs = file_digests(o.outputs.values().flatten());
                    refs.insert(o.stdout_ref.digest.clone());
                    refs.insert(o.stderr_ref.digest.clone());
                    let outcome = Outcome {
                        exit_status: o.exit_status,
                        outputs: o.outputs,
                        stdout_ref: o.stdout_ref,
                        stderr_ref: o.stderr_ref,
                        started_at: o.started_at,
                        finished_at: o.finished_at,
                    };
                    (refs, ExecResult { req, peer: peer.clone(), outcome: Some(outcome), error: None })
                }
                Err(f) => {
                    let refs: BTreeSet<_> = f.stdout_ref.iter().chain(&f.stderr_ref).map(|r| r.digest.clone()).collect();
                    let failure = Failure {
                        code: f.error.code().to_owned(),
                        message: f.error.to_string(),
                        exit_status: f.exit_status,
                        stdout_ref: f.stdout_ref,
                        stderr_ref: f.stderr_ref,
                    };
                    (refs, ExecResult { req, peer: peer.clone(), outcome: None, error: Some(failure) })
                }
            };
            for digest in refs {
                match inner.store.blobs().get(&digest) {
                    Ok(bytes) => {
                        if send_blob(&session, &peer, req, false, &digest, &bytes).is_err() {
                            return;
                        }
                    }
                    Err(e) => log::error!("output blob {digest}: {e}"),
                }
            }
            if let Err(e) = session.send(&Frame::json(MsgType::EXEC_RESULT, &body)) {
                log::warn!("cannot deliver result of request {req}: {e}");
            }
        });
    }

    fn submit(&self, workflow: &str, overrides: &BTreeMap<String, String>) -> Result<RunHandle, SubmitError> {
        let err = |code: &str, message: String| SubmitError { code: code.to_owned(), message, diagnostics: vec![] };
        let graph = parse_workflow(workflow).map_err(|e| err(e.code(), e.to_string()))?;
        let catalog = self.catalog();
        let diagnostics = validate_graph(&graph, &catalog);
        if !diagnostics.is_empty() {
            return Err(SubmitError {
                code: "INVALID_WORKFLOW".into(),
                message: format!("{} diagnostic(s)", diagnostics.len()),
                diagnostics,
            });
        }
        let plan = plan_placement(&graph, &self.providers(), overrides).map_err(|e| err(e.code(), e.to_string()))?;
        self.controller.start_run(&graph, &plan, &catalog).map_err(|e| err(e.code(), e.to_string()))
    }

    fn catalog(&self) -> Catalog {
        let mut c = Catalog::new();
        register_builtins(&mut c);
        for rc in self.remote_components() {
            if let Ok(iface) = rc.summary.interface() {
                c.insert(rc.component, iface);
            }
        }
        for d in self.tools.list() {
            c.insert(d.component_ref(), d.interface());
        }
        c
    }

    fn providers(&self) -> BTreeMap<ComponentRef, BTreeSet<String>> {
        let mut out = local_providers(&self.id, &self.tools);
        for rc in self.remote_components() {
            if self.route(&rc.publisher).is_some() {
                out.entry(rc.component).or_default().insert(rc.publisher);
            }
        }
        out
    }

    fn serve_submit(self: &Arc<Self>, session: &Arc<Session>, submit: RunSubmit) -> Result<(), NetError> {
        let req = submit.req;
        match self.submit(&submit.workflow, &submit.overrides) {
            Err(e) => session.send(&Frame::json(
                MsgType::RUN_ACCEPTED,
                &RunAccepted { req, run_id: None, error: Some(ErrorBody::new(e.code, e.message)), diagnostics: e.diagnostics },
            )),
            Ok(handle) => {
                let run_id = handle.run_id().to_owned();
                log::info!("run {run_id} submitted by {}", session.peer_id);
                session.send(&Frame::json(MsgType::RUN_ACCEPTED, &RunAccepted { req, run_id: Some(run_id), error: None, diagnostics: vec![] }))?;
                if submit.watch {
                    let session = session.clone();
                    thread::spawn(move || {
                        for event in handle.subscribe() {
                            // the submitter may leave at any time; the run carries on
                            if session.send(&Frame::json(MsgType::RUN_EVENT, &RunEventMsg { req, event })).is_err() {
                                break;
                            }
                        }
                    });
                }
                Ok(())
            }
        }
    }
}

fn sha2_digest(bytes: &[u8]) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).into()
}

fn send_result_error(session: &Session, peer: &Option<String>, req: u64, code: &str, message: &str) -> Result<(), NetError> {
    let failure = Failure { code: code.to_owned(), message: message.to_owned(), exit_status: -1, stdout_ref: None, stderr_ref: None };
    session.send(&Frame::json(MsgType::EXEC_RESULT, &ExecResult { req, peer: peer.clone(), outcome: None, error: Some(failure) }))
}

fn result_of(result: ExecResult, store: &DataStore) -> Result<ExecutionOutcome, ExecFailure> {
    match (result.outcome, result.error) {
        (Some(o), _) => {
            let missing = file_digests(o.outputs.values().flatten())
                .into_iter()
                .chain([o.stdout_ref.digest.clone(), o.stderr_ref.digest.clone()])
                .find(|d| !store.blobs().contains(d));
            if let Some(d) = missing {
                return Err(NetError::new("TRANSFER_CORRUPT", format!("output blob {d} was not transferred")).into());
            }
            Ok(ExecutionOutcome {
                exit_status: o.exit_status,
                outputs: o.outputs,
                stdout_ref: o.stdout_ref,
                stderr_ref: o.stderr_ref,
                started_at: o.started_at,
                finished_at: o.finished_at,
            })
        }
        (None, Some(f)) => {
            let known = |r: Option<BlobRef>| r.filter(|r| store.blobs().contains(&r.digest));
            Err(ExecFailure {
                error: ToolError::Remote { code: f.code, message: f.message },
                exit_status: f.exit_status,
                stdout_ref: known(f.stdout_ref),
                stderr_ref: known(f.stderr_ref),
            })
        }
        (None, None) => Err(NetError::new("MALFORMED", "empty EXEC_RESULT").into()),
    }
}
