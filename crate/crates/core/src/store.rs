//! Data management: a SHA-256 content-addressed blob store plus the run and
//! component-execution records of every workflow run.
//!
//! On-disk layout under the store root:
//!
//! ```text
//! blobs/<first two hex chars>/<digest>
//! runs/<run_id>/records.log   one JSON entry per line (run, execution, closed)
//! runs/<run_id>/events.log    one JSON run event per line
//! ```

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datum::Datum;

/// Reference to stored bytes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlobRef {
    pub digest: String,
    pub size: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn is_digest(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("execution record ({run_id}, {instance_id}, {execution_index}) already exists")]
    DuplicateKey { run_id: String, instance_id: String, execution_index: u32 },
    #[error("run {0} is closed")]
    RunClosed(String),
    #[error("run {0} already exists")]
    RunExists(String),
    #[error("record references blob {0}, which is not stored")]
    DanglingRef(String),
    #[error("run {0} has not finished")]
    RunNotTerminal(String),
    #[error("blob {0} does not match its digest")]
    Corrupt(String),
    #[error("malformed store data: {0}")]
    Malformed(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

impl StoreError {
    pub fn code(&self) -> &'static str {
        match self {
            StoreError::NotFound(_) => "NOT_FOUND",
            StoreError::DuplicateKey { .. } => "DUPLICATE_KEY",
            StoreError::RunClosed(_) => "RUN_CLOSED",
            StoreError::RunExists(_) => "RUN_EXISTS",
            StoreError::DanglingRef(_) => "DANGLING_REF",
            StoreError::RunNotTerminal(_) => "RUN_NOT_TERMINAL",
            StoreError::Corrupt(_) => "CORRUPT",
            StoreError::Malformed(_) => "MALFORMED",
            StoreError::Io { .. } => "IO",
        }
    }
}

fn io_err(context: impl fmt::Display) -> impl FnOnce(io::Error) -> StoreError {
    move |source| StoreError::Io { context: context.to_string(), source }
}

/// Immutable content-addressed bytes.
#[derive(Debug, Clone)]
pub struct BlobStore {
    root: PathBuf,
}

impl BlobStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(root.display()))?;
        Ok(BlobStore { root })
    }

    pub fn path_of(&self, digest: &str) -> PathBuf {
        self.root.join(&digest[..2]).join(digest)
    }

    /// Stores `bytes` once; re-putting identical bytes is a no-op returning the same ref.
    pub fn put(&self, bytes: &[u8]) -> Result<BlobRef, StoreError> {
        let digest = sha256_hex(bytes);
        let path = self.path_of(&digest);
        if !path.exists() {
            let dir = path.parent().expect("blob paths have a parent");
            fs::create_dir_all(dir).map_err(io_err(dir.display()))?;
            // Write to a unique temporary name, then rename: concurrent writers of
            // the same digest race harmlessly since the content is identical.
            let tmp = dir.join(format!(".{}.{}", digest, uuid::Uuid::new_v4().simple()));
            fs::write(&tmp, bytes).map_err(io_err(tmp.display()))?;
            fs::rename(&tmp, &path).map_err(io_err(path.display()))?;
        }
        Ok(BlobRef { digest, size: bytes.len() as u64 })
    }

    pub fn put_file(&self, path: &Path) -> Result<BlobRef, StoreError> {
        let bytes = fs::read(path).map_err(io_err(path.display()))?;
        self.put(&bytes)
    }

    /// Returns the stored bytes after checking them against the digest.
    pub fn get(&self, digest: &str) -> Result<Vec<u8>, StoreError> {
        if !is_digest(digest) {
            return Err(StoreError::NotFound(digest.to_owned()));
        }
        let path = self.path_of(digest);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(StoreError::NotFound(digest.to_owned())),
            Err(e) => return Err(io_err(path.display())(e)),
        };
        if sha256_hex(&bytes) != digest {
            return Err(StoreError::Corrupt(digest.to_owned()));
        }
        Ok(bytes)
    }

    pub fn contains(&self, digest: &str) -> bool {
        is_digest(digest) && self.path_of(digest).is_file()
    }

    /// Digests of every stored blob.
    pub fn digests(&self) -> Result<Vec<String>, StoreError> {
        let mut out = Vec::new();
        for shard in fs::read_dir(&self.root).map_err(io_err(self.root.display()))? {
            let shard = shard.map_err(io_err(self.root.display()))?.path();
            if !shard.is_dir() {
                continue;
            }
            for entry in fs::read_dir(&shard).map_err(io_err(shard.display()))? {
                let name = entry.map_err(io_err(shard.display()))?.file_name();
                let name = name.to_string_lossy();
                if is_digest(&name) {
                    out.push(name.into_owned());
                }
            }
        }
        out.sort();
        Ok(out)
    }

    /// Re-hashes every blob, returning the digests whose content does not match.
    pub fn verify_all(&self) -> Result<Vec<String>, StoreError> {
        let mut bad = Vec::new();
        for digest in self.digests()? {
            match self.get(&digest) {
                Ok(_) => {}
                Err(StoreError::Corrupt(d)) => bad.push(d),
                Err(e) => return Err(e),
            }
        }
        Ok(bad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunState {
    Running,
    Completed,
    Stalled,
    Failed,
    Cancelled,
}

impl RunState {
    pub fn is_terminal(self) -> bool {
        self != RunState::Running
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RunState::Running => "RUNNING",
            RunState::Completed => "COMPLETED",
            RunState::Stalled => "STALLED",
            RunState::Failed => "FAILED",
            RunState::Cancelled => "CANCELLED",
        }
    }
}

impl fmt::Display for RunState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub workflow_name: String,
    /// The executed workflow document, verbatim.
    pub graph_copy: String,
    pub controller_node: String,
    pub started_at: u64,
    pub finished_at: Option<u64>,
    pub final_state: RunState,
}

/// Which producer firing supplied an input value.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UpstreamEdge {
    pub producer: String,
    pub execution_index: u32,
    pub output: String,
    /// Position among the datums emitted on that output in that firing.
    #[serde(default)]
    pub ordinal: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentExecutionRecord {
    pub run_id: String,
    pub instance_id: String,
    /// 1-based per instance.
    pub execution_index: u32,
    pub node_id: String,
    pub started_at: u64,
    pub finished_at: u64,
    pub exit_status: i32,
    pub inputs: BTreeMap<String, Datum>,
    pub outputs: BTreeMap<String, Vec<Datum>>,
    pub stdout_ref: BlobRef,
    pub stderr_ref: BlobRef,
    pub upstream_edges: BTreeMap<String, UpstreamEdge>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ComponentExecutionRecord {
    /// Every blob digest the record points at.
    pub fn blob_digests(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::from([self.stdout_ref.digest.as_str(), self.stderr_ref.digest.as_str()]);
        let files = self.inputs.values().chain(self.outputs.values().flatten()).filter_map(Datum::file_ref);
        out.extend(files.map(|f| f.digest.as_str()));
        out
    }
}

/// One line of a run's event log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunEvent {
    pub kind: String,
    pub run_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub execution_index: Option<u32>,
    pub timestamp: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// A run and its execution records, ordered by `(started_at, instance_id)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run: RunRecord,
    pub executions: Vec<ComponentExecutionRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogEntry {
    Run { record: RunRecord },
    Execution { record: ComponentExecutionRecord },
    Closed { finished_at: u64, final_state: RunState },
}

struct RunEntry {
    record: RunRecord,
    executions: Vec<ComponentExecutionRecord>,
    keys: HashSet<(String, u32)>,
}

/// A dangling blob reference found by [`DataStore::check_closure`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DanglingRef {
    pub run_id: String,
    pub instance_id: String,
    pub execution_index: u32,
    pub digest: String,
}

pub const EXPORT_FORMAT: &str = "toolweave-run-export/1";

/// Self-contained description of an exported run; blobs sit beside it in `blobs/`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub format: String,
    pub run: RunRecord,
    /// Ordered by `(instance_id, execution_index)`.
    pub executions: Vec<ComponentExecutionRecord>,
    pub blobs: Vec<BlobRef>,
}

/// The controller-local system of record.
pub struct DataStore {
    root: PathBuf,
    blobs: BlobStore,
    runs: Mutex<BTreeMap<String, RunEntry>>,
}

impl DataStore {
    /// Opens (or creates) a store, loading the records of existing runs.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        let blobs = BlobStore::open(root.join("blobs"))?;
        let runs_dir = root.join("runs");
        fs::create_dir_all(&runs_dir).map_err(io_err(runs_dir.display()))?;
        let mut runs = BTreeMap::new();
        for entry in fs::read_dir(&runs_dir).map_err(io_err(runs_dir.display()))? {
            let path = entry.map_err(io_err(runs_dir.display()))?.path().join("records.log");
            if path.is_file() {
                let run = load_run_log(&path)?;
                runs.insert(run.record.run_id.clone(), run);
            }
        }
        Ok(DataStore { root, blobs, runs: Mutex::new(runs) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn blobs(&self) -> &BlobStore {
        &self.blobs
    }

    pub fn put_blob(&self, bytes: &[u8]) -> Result<BlobRef, StoreError> {
        self.blobs.put(bytes)
    }

    pub fn get_blob(&self, blob: &BlobRef) -> Result<Vec<u8>, StoreError> {
        self.blobs.get(&blob.digest)
    }

    fn lock(&self) -> MutexGuard<'_, BTreeMap<String, RunEntry>> {
        self.runs.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }

    fn append(&self, run_id: &str, file: &str, line: &impl Serialize) -> Result<(), StoreError> {
        let path = self.run_dir(run_id).join(file);
        let mut text = serde_json::to_string(line).map_err(|e| StoreError::Malformed(e.to_string()))?;
        text.push('\n');
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(path.display()))?;
        f.write_all(text.as_bytes()).map_err(io_err(path.display()))?;
        f.flush().map_err(io_err(path.display()))
    }

    /// Opens a new run record. `record.final_state` should be `Running`.
    pub fn open_run(&self, record: RunRecord) -> Result<(), StoreError> {
        let mut runs = self.lock();
        if runs.contains_key(&record.run_id) {
            return Err(StoreError::RunExists(record.run_id));
        }
        let dir = self.run_dir(&record.run_id);
        fs::create_dir_all(&dir).map_err(io_err(dir.display()))?;
        self.append(&record.run_id, "records.log", &LogEntry::Run { record: record.clone() })?;
        runs.insert(record.run_id.clone(), RunEntry { record, executions: Vec::new(), keys: HashSet::new() });
        Ok(())
    }

    /// Appends an execution record; it is visible to queries immediately.
    pub fn record_execution(&self, record: ComponentExecutionRecord) -> Result<(), StoreError> {
        let mut runs = self.lock();
        let entry = runs.get_mut(&record.run_id).ok_or_else(|| StoreError::NotFound(record.run_id.clone()))?;
        if entry.record.final_state.is_terminal() {
            return Err(StoreError::RunClosed(record.run_id.clone()));
        }
        let key = (record.instance_id.clone(), record.execution_index);
        if entry.keys.contains(&key) {
            return Err(StoreError::DuplicateKey {
                run_id: record.run_id.clone(),
                instance_id: record.instance_id.clone(),
                execution_index: record.execution_index,
            });
        }
        if let Some(missing) = record.blob_digests().into_iter().find(|d| !self.blobs.contains(d)) {
            return Err(StoreError::DanglingRef(missing.to_owned()));
        }
        self.append(&record.run_id, "records.log", &LogEntry::Execution { record: record.clone() })?;
        entry.keys.insert(key);
        entry.executions.push(record);
        Ok(())
    }

    /// Marks a run terminal. Further execution records are rejected.
    pub fn close_run(&self, run_id: &str, final_state: RunState, finished_at: u64) -> Result<(), StoreError> {
        let mut runs = self.lock();
        let entry = runs.get_mut(run_id).ok_or_else(|| StoreError::NotFound(run_id.to_owned()))?;
        if entry.record.final_state.is_terminal() {
            return Err(StoreError::RunClosed(run_id.to_owned()));
        }
        let finished_at = finished_at.max(entry.record.started_at);
        self.append(run_id, "records.log", &LogEntry::Closed { finished_at, final_state })?;
        entry.record.finished_at = Some(finished_at);
        entry.record.final_state = final_state;
        Ok(())
    }

    pub fn append_event(&self, event: &RunEvent) -> Result<(), StoreError> {
        let _guard = self.lock();
        self.append(&event.run_id, "events.log", event)
    }

    pub fn events(&self, run_id: &str) -> Result<Vec<RunEvent>, StoreError> {
        let path = self.run_dir(run_id).join("events.log");
        let f = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(StoreError::NotFound(run_id.to_owned())),
            Err(e) => return Err(io_err(path.display())(e)),
        };
        BufReader::new(f)
            .lines()
            .map(|l| {
                let l = l.map_err(io_err(path.display()))?;
                serde_json::from_str(&l).map_err(|e| StoreError::Malformed(e.to_string()))
            })
            .collect()
    }

    pub fn query_run(&self, run_id: &str) -> Result<RunReport, StoreError> {
        let runs = self.lock();
        let entry = runs.get(run_id).ok_or_else(|| StoreError::NotFound(run_id.to_owned()))?;
        let mut executions = entry.executions.clone();
        executions.sort_by(|a, b| (a.started_at, &a.instance_id).cmp(&(b.started_at, &b.instance_id)));
        Ok(RunReport { run: entry.record.clone(), executions })
    }

    /// All runs, oldest first.
    pub fn list_runs(&self) -> Vec<RunRecord> {
        let mut out: Vec<_> = self.lock().values().map(|e| e.record.clone()).collect();
        out.sort_by(|a, b| (a.started_at, &a.run_id).cmp(&(b.started_at, &b.run_id)));
        out
    }

    /// Scans every record for blob references that do not resolve.
    pub fn check_closure(&self) -> Vec<DanglingRef> {
        let runs = self.lock();
        let mut out = Vec::new();
        for entry in runs.values() {
            for rec in &entry.executions {
                for d in rec.blob_digests() {
                    if !self.blobs.contains(d) {
                        out.push(DanglingRef {
                            run_id: rec.run_id.clone(),
                            instance_id: rec.instance_id.clone(),
                            execution_index: rec.execution_index,
                            digest: d.to_owned(),
                        });
                    }
                }
            }
        }
        out
    }

    /// Builds the export manifest of a terminal run.
    pub fn export_manifest(&self, run_id: &str) -> Result<ExportManifest, StoreError> {
        let runs = self.lock();
        let entry = runs.get(run_id).ok_or_else(|| StoreError::NotFound(run_id.to_owned()))?;
        if !entry.record.final_state.is_terminal() {
            return Err(StoreError::RunNotTerminal(run_id.to_owned()));
        }
        let mut executions = entry.executions.clone();
        executions.sort_by(|a, b| (&a.instance_id, a.execution_index).cmp(&(&b.instance_id, b.execution_index)));
        let mut blobs = BTreeSet::new();
        for rec in &executions {
            blobs.insert(rec.stdout_ref.clone());
            blobs.insert(rec.stderr_ref.clone());
            let files = rec.inputs.values().chain(rec.outputs.values().flatten()).filter_map(Datum::file_ref);
            blobs.extend(files.map(|f| BlobRef { digest: f.digest.clone(), size: f.size }));
        }
        Ok(ExportManifest {
            format: EXPORT_FORMAT.to_owned(),
            run: entry.record.clone(),
            executions,
            blobs: blobs.into_iter().collect(),
        })
    }

    /// Writes `manifest.json` plus every referenced blob (named by digest) into `dir`.
    pub fn export_run(&self, run_id: &str, dir: &Path) -> Result<PathBuf, StoreError> {
        let manifest = self.export_manifest(run_id)?;
        let blob_dir = dir.join("blobs");
        fs::create_dir_all(&blob_dir).map_err(io_err(blob_dir.display()))?;
        for blob in &manifest.blobs {
            let bytes = self.blobs.get(&blob.digest)?;
            let path = blob_dir.join(&blob.digest);
            fs::write(&path, bytes).map_err(io_err(path.display()))?;
        }
        let path = dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| StoreError::Malformed(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text).map_err(io_err(path.display()))?;
        Ok(path)
    }

    /// Loads a run exported by [`DataStore::export_run`].
    pub fn import_run(&self, dir: &Path) -> Result<String, StoreError> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(io_err(path.display()))?;
        let manifest: ExportManifest = serde_json::from_str(&text).map_err(|e| StoreError::Malformed(e.to_string()))?;
        if manifest.format != EXPORT_FORMAT {
            return Err(StoreError::Malformed(format!("unsupported export format {}", manifest.format)));
        }
        if !manifest.run.final_state.is_terminal() {
            return Err(StoreError::RunNotTerminal(manifest.run.run_id));
        }
        for blob in &manifest.blobs {
            let file = dir.join("blobs").join(&blob.digest);
            let bytes = fs::read(&file).map_err(io_err(file.display()))?;
            if sha256_hex(&bytes) != blob.digest {
                return Err(StoreError::Corrupt(blob.digest.clone()));
            }
            self.blobs.put(&bytes)?;
        }
        let run_id = manifest.run.run_id.clone();
        let mut record = manifest.run.clone();
        let (final_state, finished_at) = (record.final_state, record.finished_at.unwrap_or(record.started_at));
        record.final_state = RunState::Running;
        record.finished_at = None;
        self.open_run(record)?;
        for rec in manifest.executions {
            self.record_execution(rec)?;
        }
        self.close_run(&run_id, final_state, finished_at)?;
        Ok(run_id)
    }
}

fn load_run_log(path: &Path) -> Result<RunEntry, StoreError> {
    let f = File::open(path).map_err(io_err(path.display()))?;
    let mut entry: Option<RunEntry> = None;
    for line in BufReader::new(f).lines() {
        let line = line.map_err(io_err(path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: LogEntry = serde_json::from_str(&line).map_err(|e| StoreError::Malformed(format!("{}: {e}", path.display())))?;
        match (parsed, entry.as_mut()) {
            (LogEntry::Run { record }, None) => {
                entry = Some(RunEntry { record, executions: Vec::new(), keys: HashSet::new() });
            }
            (LogEntry::Execution { record }, Some(e)) => {
                e.keys.insert((record.instance_id.clone(), record.execution_index));
                e.executions.push(record);
            }
            (LogEntry::Closed { finished_at, final_state }, Some(e)) => {
                e.record.finished_at = Some(finished_at);
                e.record.final_state = final_state;
            }
            _ => return Err(StoreError::Malformed(format!("{}: out-of-order entry", path.display()))),
        }
    }
    entry.ok_or_else(|| StoreError::Malformed(format!("{}: empty log", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    const EMPTY_SHA256: &str = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855";

    fn store() -> (tempfile::TempDir, DataStore) {
        let dir = tempfile::tempdir().unwrap();
        let s = DataStore::open(dir.path().join("store")).unwrap();
        (dir, s)
    }

    fn run(id: &str) -> RunRecord {
        RunRecord {
            run_id: id.into(),
            workflow_name: "w".into(),
            graph_copy: "{\"name\":\"w\"}".into(),
            controller_node: "c".into(),
            started_at: 10,
            finished_at: None,
            final_state: RunState::Running,
        }
    }

    fn exec(run_id: &str, inst: &str, idx: u32, log: &BlobRef) -> ComponentExecutionRecord {
        ComponentExecutionRecord {
            run_id: run_id.into(),
            instance_id: inst.into(),
            execution_index: idx,
            node_id: "c".into(),
            started_at: 10 + idx as u64,
            finished_at: 11 + idx as u64,
            exit_status: 0,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::from([("y".to_string(), vec![Datum::Integer(idx as i64)])]),
            stdout_ref: log.clone(),
            stderr_ref: log.clone(),
            upstream_edges: BTreeMap::new(),
            error: None,
        }
    }

    #[test]
    fn empty_blob_digest() {
        let (_d, s) = store();
        let r = s.put_blob(b"").unwrap();
        assert_eq!(r.digest, EMPTY_SHA256);
        assert_eq!(r.size, 0);
        assert_eq!(s.blobs().path_of(&r.digest), s.root().join("blobs/e3").join(EMPTY_SHA256));
    }

    #[test]
    fn put_is_idempotent() {
        let (_d, s) = store();
        let a = s.put_blob(b"hello").unwrap();
        let count = s.blobs().digests().unwrap().len();
        let b = s.put_blob(b"hello").unwrap();
        assert_eq!(a, b);
        assert_eq!(s.blobs().digests().unwrap().len(), count);
        assert_ne!(s.put_blob(b"hello!").unwrap().digest, a.digest);
    }

    #[test]
    fn get_unknown_and_corrupt() {
        let (_d, s) = store();
        assert_eq!(s.blobs().get(&"ab".repeat(32)).unwrap_err().code(), "NOT_FOUND");
        assert_eq!(s.blobs().get("../etc").unwrap_err().code(), "NOT_FOUND");
        let r = s.put_blob(b"data").unwrap();
        fs::write(s.blobs().path_of(&r.digest), b"tampered").unwrap();
        assert_eq!(s.get_blob(&r).unwrap_err().code(), "CORRUPT");
        assert_eq!(s.blobs().verify_all().unwrap(), vec![r.digest]);
    }

    #[test]
    fn record_rules() {
        let (_d, s) = store();
        let log = s.put_blob(b"").unwrap();
        s.open_run(run("r1")).unwrap();
        s.record_execution(exec("r1", "sim", 1, &log)).unwrap();
        assert_eq!(s.record_execution(exec("r1", "sim", 1, &log)).unwrap_err().code(), "DUPLICATE_KEY");

        let dangling = BlobRef { digest: "0".repeat(64), size: 1 };
        assert_eq!(s.record_execution(exec("r1", "sim", 2, &dangling)).unwrap_err().code(), "DANGLING_REF");
        assert_eq!(s.record_execution(exec("nope", "sim", 1, &log)).unwrap_err().code(), "NOT_FOUND");

        // visible while running
        let partial = s.query_run("r1").unwrap();
        assert_eq!(partial.run.final_state, RunState::Running);
        assert_eq!(partial.executions.len(), 1);

        s.close_run("r1", RunState::Completed, 50).unwrap();
        assert_eq!(s.record_execution(exec("r1", "sim", 3, &log)).unwrap_err().code(), "RUN_CLOSED");
        assert_eq!(s.query_run("missing").unwrap_err().code(), "NOT_FOUND");
    }

    #[test]
    fn export_requires_terminal_and_roundtrips() {
        let (d, s) = store();
        let log = s.put_blob(b"log text").unwrap();
        s.open_run(run("r2")).unwrap();
        s.record_execution(exec("r2", "b", 1, &log)).unwrap();
        s.record_execution(exec("r2", "a", 1, &log)).unwrap();
        assert_eq!(s.export_run("r2", &d.path().join("x")).unwrap_err().code(), "RUN_NOT_TERMINAL");
        s.close_run("r2", RunState::Completed, 99).unwrap();

        let out = d.path().join("export");
        let manifest_path = s.export_run("r2", &out).unwrap();
        let first = fs::read(&manifest_path).unwrap();
        let again = d.path().join("export2");
        assert_eq!(fs::read(s.export_run("r2", &again).unwrap()).unwrap(), first);

        let manifest: ExportManifest = serde_json::from_slice(&first).unwrap();
        assert_eq!(manifest.executions[0].instance_id, "a");
        for blob in &manifest.blobs {
            let bytes = fs::read(out.join("blobs").join(&blob.digest)).unwrap();
            assert_eq!(sha256_hex(&bytes), blob.digest);
        }

        let other = DataStore::open(d.path().join("other")).unwrap();
        assert_eq!(other.import_run(&out).unwrap(), "r2");
        assert_eq!(other.query_run("r2").unwrap(), s.query_run("r2").unwrap());
        assert!(other.check_closure().is_empty());
    }

    #[test]
    fn reopen_reloads_runs() {
        let (d, s) = store();
        let log = s.put_blob(b"x").unwrap();
        s.open_run(run("r3")).unwrap();
        s.record_execution(exec("r3", "sim", 1, &log)).unwrap();
        s.close_run("r3", RunState::Stalled, 20).unwrap();
        let before = s.query_run("r3").unwrap();
        drop(s);
        let reopened = DataStore::open(d.path().join("store")).unwrap();
        assert_eq!(reopened.query_run("r3").unwrap(), before);
        assert_eq!(reopened.list_runs().len(), 1);
    }
}
