//! The workflow controller: fires component instances by dataflow readiness,
//! routes outputs, detects termination and records every firing.
//!
//! Each run is owned by one event-loop thread. Tool firings execute on worker
//! threads and report back as messages; built-in behaviors are evaluated on the
//! loop itself. Public queries go through a shared [`RunHandle`].

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, RwLock};
use std::thread;
use std::time::{Duration, Instant};

use crate::components::{self, Behavior, Builtin, FireContext};
use crate::datum::Datum;
use crate::model::{
    serialize_workflow, validate_graph, Catalog, ComponentInterface, ComponentRef, Diagnostic, PlacementPlan, PortRef,
    WorkflowGraph,
};
use crate::now_ms;
use crate::store::{ComponentExecutionRecord, DataStore, RunEvent, RunRecord, RunState, StoreError, UpstreamEdge};
use crate::tool::{discard_logs, ExecFailure, ExecutionOutcome, LogSink, ToolDescriptor, ToolError, ToolRunner};

/// Executes tool firings on the node chosen by placement.
pub trait Dispatcher: Send + Sync {
    fn is_reachable(&self, node: &str) -> bool;

    fn execute(
        &self,
        node: &str,
        component: &ComponentRef,
        inputs: &BTreeMap<String, Datum>,
        sink: LogSink<'_>,
    ) -> Result<ExecutionOutcome, ExecFailure>;
}

/// Tools installed on this node, executed with the local runner.
pub struct LocalTools {
    node_id: String,
    tools: RwLock<BTreeMap<ComponentRef, ToolDescriptor>>,
    runner: Arc<ToolRunner>,
}

impl LocalTools {
    pub fn new(node_id: impl Into<String>, runner: Arc<ToolRunner>) -> Self {
        LocalTools { node_id: node_id.into(), tools: RwLock::new(BTreeMap::new()), runner }
    }

    pub fn node_id(&self) -> &str {
        &self.node_id
    }

    pub fn runner(&self) -> &Arc<ToolRunner> {
        &self.runner
    }

    /// Installs (or replaces) a tool; returns the previous descriptor for the same reference.
    pub fn install(&self, desc: ToolDescriptor) -> Option<ToolDescriptor> {
        self.tools.write().unwrap_or_else(|p| p.into_inner()).insert(desc.component_ref(), desc)
    }

    pub fn remove(&self, component: &ComponentRef) -> Option<ToolDescriptor> {
        self.tools.write().unwrap_or_else(|p| p.into_inner()).remove(component)
    }

    pub fn get(&self, component: &ComponentRef) -> Option<ToolDescriptor> {
        self.tools.read().unwrap_or_else(|p| p.into_inner()).get(component).cloned()
    }

    pub fn list(&self) -> Vec<ToolDescriptor> {
        self.tools.read().unwrap_or_else(|p| p.into_inner()).values().cloned().collect()
    }

    /// Runs an installed tool here.
    pub fn execute_local(
        &self,
        component: &ComponentRef,
        inputs: &BTreeMap<String, Datum>,
        sink: LogSink<'_>,
    ) -> Result<ExecutionOutcome, ExecFailure> {
        let desc = self.get(component).ok_or_else(|| ToolError::Remote {
            code: "UNKNOWN_COMPONENT".into(),
            message: format!("{component} is not installed on {}", self.node_id),
        })?;
        self.runner.execute(&desc, inputs, sink)
    }
}

impl Dispatcher for LocalTools {
    fn is_reachable(&self, node: &str) -> bool {
        node == self.node_id
    }

    fn execute(
        &self,
        node: &str,
        component: &ComponentRef,
        inputs: &BTreeMap<String, Datum>,
        sink: LogSink<'_>,
    ) -> Result<ExecutionOutcome, ExecFailure> {
        if node != self.node_id {
            return Err(ToolError::Remote { code: "NODE_UNREACHABLE".into(), message: format!("node {node} is not connected") }.into());
        }
        self.execute_local(component, inputs, sink)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error("workflow is not executable: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Diagnostic>),
    #[error("instance `{instance}` is placed on unreachable node {node}")]
    PlacementUnreachable { instance: String, node: String },
    #[error("instance `{0}` has no placement")]
    Unplaced(String),
    #[error("unknown instance `{0}`")]
    UnknownInstance(String),
    #[error("run is already {0}")]
    AlreadyTerminal(RunState),
    #[error("unknown run `{0}`")]
    UnknownRun(String),
    #[error("data store: {0}")]
    Store(String),
}

impl EngineError {
    pub fn code(&self) -> &'static str {
        match self {
            EngineError::Invalid(_) => "INVALID_WORKFLOW",
            EngineError::PlacementUnreachable { .. } => "PLACEMENT_UNREACHABLE",
            EngineError::Unplaced(_) => "NO_PROVIDER",
            EngineError::UnknownInstance(_) => "UNKNOWN_INSTANCE",
            EngineError::AlreadyTerminal(_) => "ALREADY_TERMINAL",
            EngineError::UnknownRun(_) => "NOT_FOUND",
            EngineError::Store(_) => "IO",
        }
    }
}

impl From<StoreError> for EngineError {
    fn from(e: StoreError) -> Self {
        EngineError::Store(e.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct EngineOptions {
    /// How long `cancel` waits for in-flight firings before abandoning them.
    pub cancel_grace: Duration,
    /// Also print run events to stderr.
    pub echo_events: bool,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions { cancel_grace: Duration::from_secs(5), echo_events: false }
    }
}

/// Owns runs for one controller node.
pub struct Controller {
    node_id: String,
    store: Arc<DataStore>,
    dispatcher: Arc<dyn Dispatcher>,
    runner: Arc<ToolRunner>,
    options: EngineOptions,
    runs: Mutex<BTreeMap<String, RunHandle>>,
}

impl Controller {
    pub fn new(
        node_id: impl Into<String>,
        store: Arc<DataStore>,
        dispatcher: Arc<dyn Dispatcher>,
        runner: Arc<ToolRunner>,
        options: EngineOptions,
    ) -> Self {
        Controller { node_id: node_id.into(), store, dispatcher, runner, options, runs: Mutex::new(BTreeMap::new()) }
    }

    pub fn node_id(&self) -> &str {
        &self.node_id
    }

    pub fn store(&self) -> &Arc<DataStore> {
        &self.store
    }

    pub fn run(&self, run_id: &str) -> Option<RunHandle> {
        self.runs.lock().unwrap_or_else(|p| p.into_inner()).get(run_id).cloned()
    }

    /// Starts a run and returns without waiting for it.
    pub fn start_run(&self, graph: &WorkflowGraph, plan: &PlacementPlan, catalog: &Catalog) -> Result<RunHandle, EngineError> {
        let diagnostics = validate_graph(graph, catalog);
        if !diagnostics.is_empty() {
            return Err(EngineError::Invalid(diagnostics));
        }
        let mut interfaces = BTreeMap::new();
        let mut kinds = BTreeMap::new();
        for inst in &graph.components {
            let iface = catalog.interface_for(inst).and_then(Result::ok).expect("validated graphs resolve");
            interfaces.insert(inst.id.clone(), iface);
            let kind = match components::instantiate(inst) {
                Some(Ok(Builtin::Behavior(b))) => Kind::Behavior(b),
                Some(Ok(Builtin::Script(d))) => Kind::Script(Arc::new(d)),
                Some(Err(e)) => {
                    return Err(EngineError::Invalid(vec![Diagnostic {
                        severity: crate::model::Severity::Error,
                        code: crate::model::DiagnosticCode::InvalidConfig,
                        location: inst.id.clone(),
                        message: e.to_string(),
                    }]))
                }
                None => {
                    let node = plan.node_of(&inst.id).ok_or_else(|| EngineError::Unplaced(inst.id.clone()))?;
                    if !self.dispatcher.is_reachable(node) {
                        return Err(EngineError::PlacementUnreachable { instance: inst.id.clone(), node: node.to_owned() });
                    }
                    Kind::Tool { node: node.to_owned(), component: inst.component.clone() }
                }
            };
            kinds.insert(inst.id.clone(), kind);
        }

        let run_id = uuid::Uuid::new_v4().to_string();
        let started_at = now_ms();
        self.store.open_run(RunRecord {
            run_id: run_id.clone(),
            workflow_name: graph.name.clone(),
            graph_copy: serialize_workflow(graph),
            controller_node: self.node_id.clone(),
            started_at,
            finished_at: None,
            final_state: RunState::Running,
        })?;

        let (tx, rx) = mpsc::channel();
        let shared = Arc::new(Shared {
            run_id: run_id.clone(),
            view: Mutex::new(RunView::default()),
            changed: Condvar::new(),
            tx: Mutex::new(tx.clone()),
            cancel_grace: self.options.cancel_grace,
        });
        let handle = RunHandle { shared: shared.clone() };
        self.runs.lock().unwrap_or_else(|p| p.into_inner()).insert(run_id.clone(), handle.clone());

        let mut core = RunCore::new(self, graph, interfaces, kinds, shared, tx);
        core.emit("run_started", None, None, Some(format!("workflow {}", graph.name)));
        match core.prepare() {
            Ok(()) => {
                core.publish();
                thread::Builder::new()
                    .name(format!("run-{}", &run_id[..8]))
                    .spawn(move || core.run_loop(rx))
                    .map_err(|e| EngineError::Store(format!("cannot start run thread: {e}")))?;
            }
            Err(message) => core.finish(RunState::Failed, Some(message)),
        }
        Ok(handle)
    }
}

enum Kind {
    Behavior(Box<dyn Behavior>),
    Script(Arc<ToolDescriptor>),
    Tool { node: String, component: ComponentRef },
}

#[derive(Debug, Default)]
struct RunView {
    state: Option<RunState>,
    in_flight: usize,
    fireable: BTreeSet<String>,
    executing: BTreeSet<String>,
    counters: BTreeMap<String, u32>,
    queue_lens: BTreeMap<PortRef, usize>,
    known: BTreeSet<String>,
    diagnostic: Option<String>,
    events: Vec<RunEvent>,
    subscribers: Vec<Sender<RunEvent>>,
}

struct Shared {
    run_id: String,
    view: Mutex<RunView>,
    changed: Condvar,
    tx: Mutex<Sender<LoopMsg>>,
    cancel_grace: Duration,
}

impl Shared {
    fn view(&self) -> MutexGuard<'_, RunView> {
        self.view.lock().unwrap_or_else(|p| p.into_inner())
    }
}

/// Thread-safe handle onto a run.
#[derive(Clone)]
pub struct RunHandle {
    shared: Arc<Shared>,
}

impl std::fmt::Debug for RunHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RunHandle").field("run_id", &self.shared.run_id).field("state", &self.state()).finish()
    }
}

impl RunHandle {
    pub fn run_id(&self) -> &str {
        &self.shared.run_id
    }

    pub fn state(&self) -> RunState {
        self.shared.view().state.unwrap_or(RunState::Running)
    }

    /// Blocks until the run is terminal or `timeout` elapses; returns the state seen last.
    pub fn wait(&self, timeout: Duration) -> RunState {
        let deadline = Instant::now() + timeout;
        let mut view = self.shared.view();
        loop {
            let state = view.state.unwrap_or(RunState::Running);
            let now = Instant::now();
            if state.is_terminal() || now >= deadline {
                return state;
            }
            view = self.shared.changed.wait_timeout(view, deadline - now).unwrap_or_else(|p| p.into_inner()).0;
        }
    }

    pub fn fireable(&self, instance: &str) -> Result<bool, EngineError> {
        let view = self.shared.view();
        if !view.known.contains(instance) {
            return Err(EngineError::UnknownInstance(instance.to_owned()));
        }
        Ok(view.fireable.contains(instance))
    }

    pub fn execution_count(&self, instance: &str) -> Result<u32, EngineError> {
        let view = self.shared.view();
        if !view.known.contains(instance) {
            return Err(EngineError::UnknownInstance(instance.to_owned()));
        }
        Ok(view.counters.get(instance).copied().unwrap_or(0))
    }

    pub fn queue_len(&self, instance: &str, input: &str) -> Option<usize> {
        self.shared.view().queue_lens.get(&PortRef::new(instance, input)).copied()
    }

    pub fn in_flight(&self) -> usize {
        self.shared.view().in_flight
    }

    /// Explanation attached to a STALLED or FAILED run.
    pub fn diagnostic(&self) -> Option<String> {
        self.shared.view().diagnostic.clone()
    }

    pub fn events(&self) -> Vec<RunEvent> {
        self.shared.view().events.clone()
    }

    /// Past events followed by live ones; the channel closes when the run ends.
    pub fn subscribe(&self) -> Receiver<RunEvent> {
        let (tx, rx) = mpsc::channel();
        let mut view = self.shared.view();
        for e in &view.events {
            let _ = tx.send(e.clone());
        }
        if !view.state.unwrap_or(RunState::Running).is_terminal() {
            view.subscribers.push(tx);
        }
        rx
    }

    /// Stops dispatching, waits up to the grace period for in-flight firings
    /// and marks the run CANCELLED.
    pub fn cancel(&self) -> Result<RunState, EngineError> {
        let state = self.state();
        if state.is_terminal() {
            return Err(EngineError::AlreadyTerminal(state));
        }
        let _ = self.shared.tx.lock().unwrap_or_else(|p| p.into_inner()).send(LoopMsg::Cancel);
        let state = self.wait(self.shared.cancel_grace + Duration::from_secs(2));
        match state {
            RunState::Cancelled => Ok(state),
            RunState::Running => Err(EngineError::Store("cancellation did not complete".into())),
            other => Err(EngineError::AlreadyTerminal(other)),
        }
    }
}

enum LoopMsg {
    Done(Box<Completion>),
    Cancel,
}

struct Completion {
    instance: String,
    execution_index: u32,
    node: String,
    inputs: BTreeMap<String, Datum>,
    edges: BTreeMap<String, UpstreamEdge>,
    started_at: u64,
    result: Result<ExecutionOutcome, ExecFailure>,
}

type Slot = (Datum, Option<UpstreamEdge>);

struct InstanceState {
    interface: ComponentInterface,
    kind: Kind,
    queued: BTreeMap<String, VecDeque<Slot>>,
    constants: BTreeMap<String, Option<Slot>>,
    executing: bool,
    fired: u32,
}

struct RunCore {
    run_id: String,
    node_id: String,
    store: Arc<DataStore>,
    dispatcher: Arc<dyn Dispatcher>,
    runner: Arc<ToolRunner>,
    echo: bool,
    grace: Duration,
    order: Vec<String>,
    instances: HashMap<String, InstanceState>,
    /// from port -> target ports, in connection declaration order
    routes: HashMap<PortRef, Vec<PortRef>>,
    ready: VecDeque<Completion>,
    in_flight: usize,
    halted: Option<RunState>,
    failure: Option<String>,
    shared: Arc<Shared>,
    tx: Sender<LoopMsg>,
}

impl RunCore {
    fn new(
        ctl: &Controller,
        graph: &WorkflowGraph,
        interfaces: BTreeMap<String, ComponentInterface>,
        mut kinds: BTreeMap<String, Kind>,
        shared: Arc<Shared>,
        tx: Sender<LoopMsg>,
    ) -> Self {
        let mut instances = HashMap::new();
        for inst in &graph.components {
            let interface = interfaces[&inst.id].clone();
            let mut queued = BTreeMap::new();
            let mut constants = BTreeMap::new();
            for ep in &interface.inputs {
                if ep.is_constant() {
                    constants.insert(ep.name.clone(), None);
                } else {
                    queued.insert(ep.name.clone(), VecDeque::new());
                }
            }
            let mut state = InstanceState {
                interface,
                kind: kinds.remove(&inst.id).expect("every instance has a kind"),
                queued,
                constants,
                executing: false,
                fired: 0,
            };
            if let Some(seeds) = inst.seeds() {
                for (name, raw) in seeds {
                    let ep = state.interface.input(name).expect("validated seed");
                    let datum = Datum::from_scalar_json(raw, ep.datum_type).expect("validated seed");
                    if ep.is_constant() {
                        state.constants.insert(name.clone(), Some((datum, None)));
                    } else if let Some(q) = state.queued.get_mut(name) {
                        q.push_back((datum, None));
                    }
                }
            }
            instances.insert(inst.id.clone(), state);
        }
        let mut routes: HashMap<PortRef, Vec<PortRef>> = HashMap::new();
        for c in &graph.connections {
            routes.entry(c.from.clone()).or_default().push(c.to.clone());
        }
        RunCore {
            run_id: shared.run_id.clone(),
            node_id: ctl.node_id.clone(),
            store: ctl.store.clone(),
            dispatcher: ctl.dispatcher.clone(),
            runner: ctl.runner.clone(),
            echo: ctl.options.echo_events,
            grace: ctl.options.cancel_grace,
            order: graph.components.iter().map(|c| c.id.clone()).collect(),
            instances,
            routes,
            ready: VecDeque::new(),
            in_flight: 0,
            halted: None,
            failure: None,
            shared,
            tx,
        }
    }

    fn prepare(&mut self) -> Result<(), String> {
        let blobs = self.store.blobs().clone();
        for id in &self.order {
            if let Kind::Behavior(b) = &mut self.instances.get_mut(id).expect("known").kind {
                b.prepare(&blobs).map_err(|e| format!("{id}: {e}"))?;
            }
        }
        Ok(())
    }

    fn emit(&self, kind: &str, instance: Option<&str>, execution_index: Option<u32>, detail: Option<String>) {
        let event = RunEvent {
            kind: kind.to_owned(),
            run_id: self.run_id.clone(),
            instance: instance.map(str::to_owned),
            execution_index,
            timestamp: now_ms(),
            detail,
        };
        if let Err(e) = self.store.append_event(&event) {
            log::warn!("run {}: cannot log event: {e}", self.run_id);
        }
        if self.echo {
            if let Ok(line) = serde_json::to_string(&event) {
                eprintln!("{line}");
            }
        }
        let mut view = self.shared.view();
        view.subscribers.retain(|s| s.send(event.clone()).is_ok());
        view.events.push(event);
    }

    fn is_fireable(&self, id: &str) -> bool {
        let st = &self.instances[id];
        if st.executing || st.constants.values().any(Option::is_none) {
            return false;
        }
        let self_starting = matches!(&st.kind, Kind::Behavior(b) if b.self_starting());
        let all_filled = !st.queued.is_empty() && st.queued.values().all(|q| !q.is_empty());
        all_filled || ((st.queued.is_empty() || self_starting) && st.fired == 0)
    }

    /// Mirrors the loop state into the shared view.
    fn publish(&self) {
        let mut view = self.shared.view();
        view.in_flight = self.in_flight;
        view.known = self.order.iter().cloned().collect();
        view.fireable = if self.halted.is_some() {
            BTreeSet::new()
        } else {
            self.order.iter().filter(|id| self.is_fireable(id)).cloned().collect()
        };
        view.executing = self.order.iter().filter(|id| self.instances[*id].executing).cloned().collect();
        view.counters = self.order.iter().map(|id| (id.clone(), self.instances[id].fired)).collect();
        view.queue_lens.clear();
        for id in &self.order {
            let st = &self.instances[id];
            for (name, q) in &st.queued {
                view.queue_lens.insert(PortRef::new(id, name), q.len());
            }
            for (name, c) in &st.constants {
                view.queue_lens.insert(PortRef::new(id, name), usize::from(c.is_some()));
            }
        }
        if view.state.is_none() {
            view.state = Some(RunState::Running);
        }
        drop(view);
        self.shared.changed.notify_all();
    }

    /// Dispatches every fireable instance, in declaration order, until none is left.
    fn schedule(&mut self) {
        if self.halted.is_some() {
            return;
        }
        loop {
            let next = self.order.iter().find(|id| self.is_fireable(id)).cloned();
            match next {
                Some(id) => self.fire(&id),
                None => break,
            }
        }
    }

    fn fire(&mut self, id: &str) {
        let st = self.instances.get_mut(id).expect("known instance");
        let mut inputs = BTreeMap::new();
        let mut edges = BTreeMap::new();
        for (name, q) in st.queued.iter_mut() {
            if let Some((d, edge)) = q.pop_front() {
                inputs.insert(name.clone(), d);
                if let Some(e) = edge {
                    edges.insert(name.clone(), e);
                }
            }
        }
        for (name, slot) in &st.constants {
            let (d, edge) = slot.clone().expect("fireable implies constants present");
            inputs.insert(name.clone(), d);
            if let Some(e) = edge {
                edges.insert(name.clone(), e);
            }
        }
        st.fired += 1;
        st.executing = true;
        let execution_index = st.fired;
        self.in_flight += 1;
        let started_at = now_ms();

        let mut completion = Completion {
            instance: id.to_owned(),
            execution_index,
            node: self.node_id.clone(),
            inputs: inputs.clone(),
            edges,
            started_at,
            result: Err(ToolError::Io("not executed".into()).into()),
        };
        let blobs = self.store.blobs().clone();
        match &mut st.kind {
            Kind::Behavior(b) => {
                let mut ctx = FireContext { instance_id: id, execution_index, blobs: &blobs, log: String::new() };
                let result = b.fire(&mut ctx, &inputs);
                completion.result = behavior_outcome(&blobs, started_at, ctx.log, result);
                self.emit("firing_started", Some(id), Some(execution_index), Some(self.node_id.clone()));
                self.ready.push_back(completion);
            }
            Kind::Script(desc) => {
                let desc = desc.clone();
                let runner = self.runner.clone();
                self.emit("firing_started", Some(id), Some(execution_index), Some(self.node_id.clone()));
                self.spawn_worker(completion, move |inputs| runner.execute(&desc, inputs, &discard_logs));
            }
            Kind::Tool { node, component } => {
                let (node, component) = (node.clone(), component.clone());
                completion.node = node.clone();
                let dispatcher = self.dispatcher.clone();
                self.emit("firing_started", Some(id), Some(execution_index), Some(node.clone()));
                let label = format!("{id}#{execution_index}");
                self.spawn_worker(completion, move |inputs| {
                    let sink = move |_: crate::tool::LogStream, chunk: &[u8]| {
                        log::trace!("{label}: {}", String::from_utf8_lossy(chunk).trim_end());
                    };
                    dispatcher.execute(&node, &component, inputs, &sink)
                });
            }
        }
    }

    fn spawn_worker<F>(&self, mut completion: Completion, work: F)
    where
        F: FnOnce(&BTreeMap<String, Datum>) -> Result<ExecutionOutcome, ExecFailure> + Send + 'static,
    {
        let tx = self.tx.clone();
        let name = format!("fire-{}", completion.instance);
        let spawned = thread::Builder::new().name(name).spawn(move || {
            completion.result = work(&completion.inputs);
            let _ = tx.send(LoopMsg::Done(Box::new(completion)));
        });
        if let Err(e) = spawned {
            log::error!("run {}: cannot start worker: {e}", self.run_id);
        }
    }

    fn run_loop(mut self, rx: Receiver<LoopMsg>) {
        self.schedule();
        self.publish();
        let mut cancel_deadline: Option<Instant> = None;
        loop {
            if self.in_flight == 0 && self.ready.is_empty() {
                let state = match self.halted {
                    Some(s) => s,
                    None if self.order.iter().any(|id| self.is_fireable(id)) => {
                        self.schedule();
                        self.publish();
                        continue;
                    }
                    None => self.quiescent_state(),
                };
                let diagnostic = match state {
                    RunState::Stalled => Some(self.stall_diagnostic()),
                    RunState::Failed => self.failure.clone(),
                    _ => None,
                };
                self.finish(state, diagnostic);
                return;
            }
            let msg = match self.ready.pop_front() {
                Some(c) => LoopMsg::Done(Box::new(c)),
                None => {
                    let received = match cancel_deadline {
                        Some(deadline) => rx.recv_timeout(deadline.saturating_duration_since(Instant::now())),
                        None => rx.recv().map_err(|_| RecvTimeoutError::Disconnected),
                    };
                    match received {
                        Ok(m) => m,
                        Err(_) => {
                            // grace period over: abandon whatever is still running
                            log::warn!("run {}: abandoning {} in-flight firing(s)", self.run_id, self.in_flight);
                            self.in_flight = 0;
                            self.ready.clear();
                            continue;
                        }
                    }
                }
            };
            match msg {
                LoopMsg::Cancel => {
                    if self.halted.is_none() {
                        self.halted = Some(RunState::Cancelled);
                        self.emit("cancel_requested", None, None, None);
                        cancel_deadline = Some(Instant::now() + self.grace);
                    }
                }
                LoopMsg::Done(c) => {
                    self.complete(*c);
                    self.schedule();
                }
            }
            self.publish();
        }
    }

    fn quiescent_state(&self) -> RunState {
        let pending = self.instances.values().any(|st| st.queued.values().any(|q| !q.is_empty()));
        if pending {
            RunState::Stalled
        } else {
            RunState::Completed
        }
    }

    /// Names the empty inputs of every instance that holds undeliverable data.
    fn stall_diagnostic(&self) -> String {
        let mut starved = Vec::new();
        let mut waiting = Vec::new();
        for id in &self.order {
            let st = &self.instances[id];
            let has_data = st.queued.values().any(|q| !q.is_empty());
            if !has_data {
                continue;
            }
            for (name, q) in &st.queued {
                if q.is_empty() {
                    starved.push(format!("{id}.{name}"));
                } else {
                    waiting.push(format!("{id}.{name} ({} queued)", q.len()));
                }
            }
            for (name, c) in &st.constants {
                if c.is_none() {
                    starved.push(format!("{id}.{name}"));
                }
            }
        }
        format!("starved inputs: {}; waiting data: {}", starved.join(", "), waiting.join(", "))
    }

    fn complete(&mut self, c: Completion) {
        self.in_flight = self.in_flight.saturating_sub(1);
        let finished_at = now_ms().max(c.started_at);
        let st = self.instances.get_mut(&c.instance).expect("known instance");
        st.executing = false;
        let empty_log = || self.store.put_blob(b"");

        let (record, outcome) = match c.result {
            Ok(outcome) => {
                let rec = ComponentExecutionRecord {
                    run_id: self.run_id.clone(),
                    instance_id: c.instance.clone(),
                    execution_index: c.execution_index,
                    node_id: c.node.clone(),
                    started_at: c.started_at,
                    finished_at,
                    exit_status: outcome.exit_status,
                    inputs: c.inputs,
                    outputs: outcome.outputs.clone(),
                    stdout_ref: outcome.stdout_ref.clone(),
                    stderr_ref: outcome.stderr_ref.clone(),
                    upstream_edges: c.edges,
                    error: None,
                };
                (rec, Some(outcome))
            }
            Err(failure) => {
                let stdout_ref = failure.stdout_ref.clone().map_or_else(empty_log, Ok);
                let stderr_ref = failure.stderr_ref.clone().map_or_else(empty_log, Ok);
                let (Ok(stdout_ref), Ok(stderr_ref)) = (stdout_ref, stderr_ref) else {
                    self.fail(format!("{}: cannot store logs", c.instance));
                    return;
                };
                let error = format!("{}: {}", failure.error.code(), failure.error);
                let rec = ComponentExecutionRecord {
                    run_id: self.run_id.clone(),
                    instance_id: c.instance.clone(),
                    execution_index: c.execution_index,
                    node_id: c.node.clone(),
                    started_at: c.started_at,
                    finished_at,
                    exit_status: failure.exit_status,
                    inputs: c.inputs,
                    outputs: BTreeMap::new(),
                    stdout_ref,
                    stderr_ref,
                    upstream_edges: c.edges,
                    error: Some(error),
                };
                (rec, None)
            }
        };

        let record_error = record.error.clone();
        if let Err(e) = self.store.record_execution(record) {
            self.fail(format!("{}#{}: cannot record execution: {e}", c.instance, c.execution_index));
            return;
        }
        let Some(outcome) = outcome else {
            let msg = format!("{}#{} failed: {}", c.instance, c.execution_index, record_error.unwrap_or_default());
            self.emit("firing_failed", Some(&c.instance), Some(c.execution_index), Some(msg.clone()));
            self.fail(msg);
            return;
        };
        self.emit("firing_finished", Some(&c.instance), Some(c.execution_index), None);
        if self.halted.is_some() {
            // cancelled or failed runs keep the record but route nothing
            return;
        }
        let outputs = self.instances[&c.instance].interface.outputs.clone();
        for ep in &outputs {
            let Some(datums) = outcome.outputs.get(&ep.name) else { continue };
            let from = PortRef::new(&c.instance, &ep.name);
            let targets = self.routes.get(&from).cloned().unwrap_or_default();
            for (ordinal, datum) in datums.iter().enumerate() {
                let edge = UpstreamEdge {
                    producer: c.instance.clone(),
                    execution_index: c.execution_index,
                    output: ep.name.clone(),
                    ordinal: ordinal as u32,
                };
                for to in &targets {
                    self.route(to, datum, &edge);
                }
            }
        }
    }

    fn route(&mut self, to: &PortRef, datum: &Datum, edge: &UpstreamEdge) {
        let st = self.instances.get_mut(&to.instance).expect("validated connection");
        let ep = st.interface.input(&to.endpoint).expect("validated connection");
        let Some(value) = datum.convert_to(ep.datum_type) else {
            log::error!("run {}: dropping {} value for {to}", self.run_id, datum.datum_type());
            return;
        };
        if ep.is_constant() {
            st.constants.insert(to.endpoint.clone(), Some((value, Some(edge.clone()))));
        } else {
            st.queued.get_mut(&to.endpoint).expect("queued input").push_back((value, Some(edge.clone())));
        }
    }

    fn fail(&mut self, message: String) {
        log::warn!("run {}: {message}", self.run_id);
        if self.halted.is_none() {
            self.halted = Some(RunState::Failed);
            self.failure = Some(message);
        }
    }

    fn finish(&mut self, state: RunState, diagnostic: Option<String>) {
        if let Err(e) = self.store.close_run(&self.run_id, state, now_ms()) {
            log::error!("run {}: cannot close run: {e}", self.run_id);
        }
        self.emit("run_finished", None, None, Some(match &diagnostic {
            Some(d) => format!("{state}: {d}"),
            None => state.to_string(),
        }));
        {
            let mut view = self.shared.view();
            view.diagnostic = diagnostic;
        }
        self.publish();
        let mut view = self.shared.view();
        view.state = Some(state);
        view.fireable.clear();
        view.subscribers.clear();
        drop(view);
        self.shared.changed.notify_all();
    }
}

fn behavior_outcome(
    blobs: &crate::store::BlobStore,
    started_at: u64,
    log: String,
    result: Result<components::Emission, components::BehaviorError>,
) -> Result<ExecutionOutcome, ExecFailure> {
    let stdout_ref = blobs.put(log.as_bytes()).map_err(ToolError::from)?;
    let stderr_ref = blobs.put(b"").map_err(ToolError::from)?;
    match result {
        Ok(outputs) => Ok(ExecutionOutcome { exit_status: 0, outputs, stdout_ref, stderr_ref, started_at, finished_at: now_ms() }),
        Err(e) => Err(ExecFailure {
            error: ToolError::Remote { code: e.code.to_owned(), message: e.message },
            exit_status: 1,
            stdout_ref: Some(stdout_ref),
            stderr_ref: Some(stderr_ref),
        }),
    }
}

/// Providers map for placement: installed tools on `node_id` plus built-ins.
pub fn local_providers(node_id: &str, tools: &LocalTools) -> BTreeMap<ComponentRef, BTreeSet<String>> {
    let mut out: BTreeMap<ComponentRef, BTreeSet<String>> = BTreeMap::new();
    for d in tools.list() {
        out.entry(d.component_ref()).or_default().insert(node_id.to_owned());
    }
    for r in components::builtin_refs() {
        out.entry(r).or_default().insert(node_id.to_owned());
    }
    out
}
