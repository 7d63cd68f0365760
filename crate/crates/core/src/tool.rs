//! Tool integration: descriptors for external executables and their local
//! execution in a fresh working directory.
//!
//! Working directory contract seen by a tool:
//!
//! ```text
//! inputs/<name>/<filename>   one directory per file input
//! inputs.json                input name -> scalar, or relative file path
//! outputs/                   empty; file outputs are written here
//! outputs.json               written by the tool: output name -> scalar or path under outputs/
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Component, Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datum::{Datum, DatumType, FileRef};
use crate::model::{endpoints_from_decls, ComponentInterface, ComponentRef, Direction, Endpoint, EndpointDecl, EndpointError};
use crate::now_ms;
use crate::store::{BlobRef, BlobStore, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HostOs {
    Windows,
    Linux,
}

impl HostOs {
    pub fn current() -> Self {
        if cfg!(windows) {
            HostOs::Windows
        } else {
            HostOs::Linux
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Commands {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub windows: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linux: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolDescriptor {
    pub name: String,
    pub version: String,
    pub commands: Commands,
    pub inputs: Vec<Endpoint>,
    pub outputs: Vec<Endpoint>,
    pub pre_script: Option<String>,
    pub post_script: Option<String>,
    pub documentation: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
struct DescriptorDoc {
    name: String,
    version: String,
    #[serde(default)]
    commands: Commands,
    #[serde(default)]
    inputs: Vec<EndpointDecl>,
    #[serde(default)]
    outputs: Vec<EndpointDecl>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pre_script: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    post_script: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    documentation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DescriptorError {
    #[error("malformed descriptor: {0}")]
    Syntax(String),
    #[error("descriptor declares no command for any operating system")]
    MissingCommand,
    #[error("duplicate endpoint `{0}`")]
    DuplicateEndpoint(String),
    #[error("placeholder `{0}` does not name a declared endpoint")]
    BadPlaceholder(String),
    #[error("invalid descriptor: {0}")]
    Invalid(String),
}

impl DescriptorError {
    pub fn code(&self) -> &'static str {
        match self {
            DescriptorError::Syntax(_) => "SYNTAX",
            DescriptorError::MissingCommand => "MISSING_COMMAND",
            DescriptorError::DuplicateEndpoint(_) => "DUPLICATE_ENDPOINT",
            DescriptorError::BadPlaceholder(_) => "BAD_PLACEHOLDER",
            DescriptorError::Invalid(_) => "INVALID_DESCRIPTOR",
        }
    }
}

impl From<EndpointError> for DescriptorError {
    fn from(e: EndpointError) -> Self {
        match e {
            EndpointError::Duplicate(n) => DescriptorError::DuplicateEndpoint(n),
            other => DescriptorError::Invalid(other.to_string()),
        }
    }
}

impl ToolDescriptor {
    pub fn component_ref(&self) -> ComponentRef {
        ComponentRef::new(&self.name, &self.version)
    }

    pub fn interface(&self) -> ComponentInterface {
        ComponentInterface { inputs: self.inputs.clone(), outputs: self.outputs.clone() }
    }

    /// Checks the descriptor invariants.
    pub fn check(&self) -> Result<(), DescriptorError> {
        if !crate::model::is_identifier(&self.name.replace("::", "_").replace('.', "_")) {
            return Err(DescriptorError::Invalid(format!("invalid tool name `{}`", self.name)));
        }
        if self.version.is_empty() || self.version.contains(char::is_whitespace) {
            return Err(DescriptorError::Invalid(format!("invalid version `{}`", self.version)));
        }
        if self.commands.windows.is_none() && self.commands.linux.is_none() {
            return Err(DescriptorError::MissingCommand);
        }
        for (list, dir) in [(&self.inputs, Direction::Input), (&self.outputs, Direction::Output)] {
            let decls: Vec<_> = list.iter().map(EndpointDecl::from_endpoint).collect();
            endpoints_from_decls(&decls, dir)?;
        }
        let templates = [&self.commands.windows, &self.commands.linux, &self.pre_script, &self.post_script];
        for template in templates.into_iter().flatten() {
            for ph in placeholders(template) {
                let ok = match &ph {
                    Placeholder::Workdir => true,
                    Placeholder::Input(n) => self.inputs.iter().any(|e| &e.name == n),
                    Placeholder::Output(n) => self.outputs.iter().any(|e| &e.name == n),
                    Placeholder::Unknown(_) => false,
                };
                if !ok {
                    return Err(DescriptorError::BadPlaceholder(ph.name().to_owned()));
                }
            }
        }
        Ok(())
    }

    /// Canonical JSON text of the descriptor.
    pub fn to_json(&self) -> String {
        let doc = DescriptorDoc {
            name: self.name.clone(),
            version: self.version.clone(),
            commands: self.commands.clone(),
            inputs: self.inputs.iter().map(EndpointDecl::from_endpoint).collect(),
            outputs: self.outputs.iter().map(EndpointDecl::from_endpoint).collect(),
            pre_script: self.pre_script.clone(),
            post_script: self.post_script.clone(),
            documentation: self.documentation.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("descriptors always serialize")
    }
}

pub fn parse_descriptor(text: &str) -> Result<ToolDescriptor, DescriptorError> {
    let doc: DescriptorDoc = serde_json::from_str(text).map_err(|e| DescriptorError::Syntax(e.to_string()))?;
    let desc = ToolDescriptor {
        inputs: endpoints_from_decls(&doc.inputs, Direction::Input)?,
        outputs: endpoints_from_decls(&doc.outputs, Direction::Output)?,
        name: doc.name,
        version: doc.version,
        commands: doc.commands,
        pre_script: doc.pre_script,
        post_script: doc.post_script,
        documentation: doc.documentation,
    };
    desc.check()?;
    Ok(desc)
}

/// Answers collected by `tool integrate`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScaffoldAnswers {
    pub name: String,
    pub version: String,
    pub linux_command: Option<String>,
    pub windows_command: Option<String>,
    pub inputs: Vec<EndpointDecl>,
    pub outputs: Vec<EndpointDecl>,
    pub pre_script: Option<String>,
    pub post_script: Option<String>,
    pub documentation: Option<String>,
}

/// Emits descriptor text for the answers, validated before emission.
pub fn scaffold_descriptor(answers: &ScaffoldAnswers) -> Result<String, DescriptorError> {
    let desc = ToolDescriptor {
        name: answers.name.clone(),
        version: answers.version.clone(),
        commands: Commands { windows: answers.windows_command.clone(), linux: answers.linux_command.clone() },
        inputs: endpoints_from_decls(&answers.inputs, Direction::Input)?,
        outputs: endpoints_from_decls(&answers.outputs, Direction::Output)?,
        pre_script: answers.pre_script.clone(),
        post_script: answers.post_script.clone(),
        documentation: answers.documentation.clone(),
    };
    desc.check()?;
    Ok(desc.to_json())
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Placeholder {
    Workdir,
    Input(String),
    Output(String),
    Unknown(String),
}

impl Placeholder {
    fn parse(inner: &str) -> Self {
        if inner == "workdir" {
            return Placeholder::Workdir;
        }
        match inner.split_once(':') {
            Some(("in", n)) => Placeholder::Input(n.to_owned()),
            Some(("out", n)) => Placeholder::Output(n.to_owned()),
            _ => Placeholder::Unknown(inner.to_owned()),
        }
    }

    fn name(&self) -> &str {
        match self {
            Placeholder::Workdir => "workdir",
            Placeholder::Input(n) | Placeholder::Output(n) | Placeholder::Unknown(n) => n,
        }
    }
}

enum Piece<'a> {
    Lit(&'a str),
    Ph(Placeholder),
}

fn pieces(token: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut rest = token;
    while let Some(start) = rest.find("${") {
        let Some(len) = rest[start + 2..].find('}') else { break };
        if start > 0 {
            out.push(Piece::Lit(&rest[..start]));
        }
        out.push(Piece::Ph(Placeholder::parse(&rest[start + 2..start + 2 + len])));
        rest = &rest[start + 3 + len..];
    }
    if !rest.is_empty() {
        out.push(Piece::Lit(rest));
    }
    out
}

fn placeholders(template: &str) -> Vec<Placeholder> {
    template
        .split_whitespace()
        .flat_map(pieces)
        .filter_map(|p| match p {
            Piece::Ph(ph) => Some(ph),
            Piece::Lit(_) => None,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pre,
    Main,
    Post,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pre => "pre",
            Stage::Main => "main",
            Stage::Post => "post",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ToolError {
    #[error("{stage} stage exited with status {status}")]
    ToolFailed { stage: Stage, status: i32 },
    #[error("declared output `{0}` missing from outputs.json")]
    OutputMissing(String),
    #[error("output `{name}` does not hold a {expected} value")]
    OutputTypeMismatch { name: String, expected: DatumType },
    #[error("cannot start {stage} stage: {message}")]
    SpawnFailed { stage: Stage, message: String },
    #[error("no command declared for {0:?}")]
    OsUnsupported(HostOs),
    #[error("placeholder `{0}` cannot be resolved")]
    UnresolvedPlaceholder(String),
    #[error("bad inputs: {0}")]
    BadInputs(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{code}: {message}")]
    Remote { code: String, message: String },
}

impl ToolError {
    pub fn code(&self) -> &str {
        match self {
            ToolError::ToolFailed { .. } => "TOOL_FAILED",
            ToolError::OutputMissing(_) => "OUTPUT_MISSING",
            ToolError::OutputTypeMismatch { .. } => "OUTPUT_TYPE_MISMATCH",
            ToolError::SpawnFailed { .. } => "SPAWN_FAILED",
            ToolError::OsUnsupported(_) => "OS_UNSUPPORTED",
            ToolError::UnresolvedPlaceholder(_) => "UNRESOLVED_PLACEHOLDER",
            ToolError::BadInputs(_) => "BAD_INPUTS",
            ToolError::Io(_) => "IO",
            ToolError::Remote { code, .. } => code,
        }
    }
}

impl From<StoreError> for ToolError {
    fn from(e: StoreError) -> Self {
        ToolError::Io(e.to_string())
    }
}

pub fn select_command(desc: &ToolDescriptor, os: HostOs) -> Result<&str, ToolError> {
    let cmd = match os {
        HostOs::Windows => desc.commands.windows.as_deref(),
        HostOs::Linux => desc.commands.linux.as_deref(),
    };
    cmd.ok_or(ToolError::OsUnsupported(os))
}

/// Path of a file input relative to the working directory.
pub fn input_file_path(name: &str, file: &FileRef) -> String {
    format!("inputs/{name}/{}", safe_filename(&file.filename))
}

fn safe_filename(name: &str) -> &str {
    let base = name.rsplit(['/', '\\']).next().unwrap_or("");
    if base.is_empty() || base == "." || base == ".." {
        "file"
    } else {
        base
    }
}

/// Splits `template` on whitespace, then substitutes placeholders token by token.
pub fn render_command(template: &str, workdir: &Path, inputs: &BTreeMap<String, Datum>) -> Result<Vec<String>, ToolError> {
    let mut argv = Vec::new();
    for token in template.split_whitespace() {
        let mut arg = String::new();
        for piece in pieces(token) {
            match piece {
                Piece::Lit(s) => arg.push_str(s),
                Piece::Ph(Placeholder::Workdir) => arg.push_str(&workdir.to_string_lossy()),
                Piece::Ph(Placeholder::Input(n)) => match inputs.get(&n) {
                    Some(Datum::FileRef(f)) => arg.push_str(&input_file_path(&n, f)),
                    Some(d) => arg.push_str(&d.render_text()),
                    None => return Err(ToolError::UnresolvedPlaceholder(format!("in:{n}"))),
                },
                Piece::Ph(Placeholder::Output(n)) => {
                    arg.push_str("outputs/");
                    arg.push_str(&n);
                }
                Piece::Ph(Placeholder::Unknown(n)) => return Err(ToolError::UnresolvedPlaceholder(n)),
            }
        }
        argv.push(arg);
    }
    if argv.is_empty() {
        return Err(ToolError::UnresolvedPlaceholder("empty command".into()));
    }
    Ok(argv)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionOutcome {
    pub exit_status: i32,
    pub outputs: BTreeMap<String, Vec<Datum>>,
    pub stdout_ref: BlobRef,
    pub stderr_ref: BlobRef,
    pub started_at: u64,
    pub finished_at: u64,
}

/// A failed execution, with whatever logs were captured before it failed.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecFailure {
    pub error: ToolError,
    pub exit_status: i32,
    pub stdout_ref: Option<BlobRef>,
    pub stderr_ref: Option<BlobRef>,
}

impl From<ToolError> for ExecFailure {
    fn from(error: ToolError) -> Self {
        let exit_status = match &error {
            ToolError::ToolFailed { status, .. } => *status,
            _ => -1,
        };
        ExecFailure { error, exit_status, stdout_ref: None, stderr_ref: None }
    }
}

impl fmt::Display for ExecFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogStream {
    Stdout,
    Stderr,
}

/// Receives tool output as it is produced.
pub type LogSink<'a> = &'a (dyn Fn(LogStream, &[u8]) + Sync);

pub fn discard_logs(_: LogStream, _: &[u8]) {}

/// Executes tools under one working-directory root.
#[derive(Debug)]
pub struct ToolRunner {
    workdir_root: PathBuf,
    blobs: BlobStore,
    os: HostOs,
    spawned: AtomicU64,
}

impl ToolRunner {
    pub fn new(workdir_root: impl Into<PathBuf>, blobs: BlobStore) -> Self {
        ToolRunner { workdir_root: workdir_root.into(), blobs, os: HostOs::current(), spawned: AtomicU64::new(0) }
    }

    pub fn with_os(mut self, os: HostOs) -> Self {
        self.os = os;
        self
    }

    pub fn blobs(&self) -> &BlobStore {
        &self.blobs
    }

    pub fn workdir_root(&self) -> &Path {
        &self.workdir_root
    }

    /// Number of subprocesses started so far.
    pub fn spawn_count(&self) -> u64 {
        self.spawned.load(Ordering::SeqCst)
    }

    /// Runs the pre, main and post stages of `desc` in a fresh working directory.
    pub fn execute(
        &self,
        desc: &ToolDescriptor,
        inputs: &BTreeMap<String, Datum>,
        sink: LogSink<'_>,
    ) -> Result<ExecutionOutcome, ExecFailure> {
        let started_at = now_ms();
        let main = select_command(desc, self.os)?;
        let inputs = check_inputs(desc, inputs)?;
        let workdir = self.prepare_workdir(desc, &inputs)?;

        let mut stdout = Vec::new();
        let mut stderr = Vec::new();
        let stages = [(Stage::Pre, desc.pre_script.as_deref()), (Stage::Main, Some(main)), (Stage::Post, desc.post_script.as_deref())];
        let mut result = Ok(());
        for (stage, template) in stages {
            let Some(template) = template else { continue };
            result = self.run_stage(stage, template, &workdir, &inputs, sink, &mut stdout, &mut stderr);
            if result.is_err() {
                break;
            }
        }
        let stdout_ref = self.blobs.put(&stdout).map_err(ToolError::from)?;
        let stderr_ref = self.blobs.put(&stderr).map_err(ToolError::from)?;
        let with_logs = |error: ToolError| {
            let mut f = ExecFailure::from(error);
            f.stdout_ref = Some(stdout_ref.clone());
            f.stderr_ref = Some(stderr_ref.clone());
            f
        };
        result.map_err(with_logs)?;
        let outputs = self.collect_outputs(desc, &workdir).map_err(with_logs)?;
        Ok(ExecutionOutcome { exit_status: 0, outputs, stdout_ref, stderr_ref, started_at, finished_at: now_ms() })
    }

    fn prepare_workdir(&self, desc: &ToolDescriptor, inputs: &BTreeMap<String, Datum>) -> Result<PathBuf, ToolError> {
        let io = |e: std::io::Error| ToolError::Io(e.to_string());
        fs::create_dir_all(&self.workdir_root).map_err(io)?;
        let dir = self.workdir_root.join(format!("{}-{}", sanitize(&desc.name), uuid::Uuid::new_v4().simple()));
        fs::create_dir(&dir).map_err(io)?;
        let dir = dir.canonicalize().map_err(io)?;
        fs::create_dir(dir.join("inputs")).map_err(io)?;
        fs::create_dir(dir.join("outputs")).map_err(io)?;
        let mut doc = serde_json::Map::new();
        for (name, datum) in inputs {
            let value = match datum {
                Datum::FileRef(f) => {
                    let rel = input_file_path(name, f);
                    fs::create_dir_all(dir.join("inputs").join(name)).map_err(io)?;
                    fs::write(dir.join(&rel), self.blobs.get(&f.digest)?).map_err(io)?;
                    Value::String(rel)
                }
                scalar => scalar.to_scalar_json().ok_or_else(|| ToolError::BadInputs(format!("`{name}` is not representable")))?,
            };
            doc.insert(name.clone(), value);
        }
        let text = serde_json::to_string_pretty(&Value::Object(doc)).map_err(|e| ToolError::Io(e.to_string()))?;
        fs::write(dir.join("inputs.json"), text).map_err(io)?;
        Ok(dir)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_stage(
        &self,
        stage: Stage,
        template: &str,
        workdir: &Path,
        inputs: &BTreeMap<String, Datum>,
        sink: LogSink<'_>,
        stdout: &mut Vec<u8>,
        stderr: &mut Vec<u8>,
    ) -> Result<(), ToolError> {
        let argv = render_command(template, workdir, inputs)?;
        log::debug!("{stage} stage: {argv:?}");
        let mut child = Command::new(&argv[0])
            .args(&argv[1..])
            .current_dir(workdir)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| ToolError::SpawnFailed { stage, message: format!("{}: {e}", argv[0]) })?;
        self.spawned.fetch_add(1, Ordering::SeqCst);
        let mut out_pipe = child.stdout.take().expect("stdout is piped");
        let mut err_pipe = child.stderr.take().expect("stderr is piped");
        let pump = |pipe: &mut dyn Read, stream: LogStream, buf: &mut Vec<u8>| {
            let mut chunk = [0u8; 8192];
            loop {
                match pipe.read(&mut chunk) {
                    Ok(0) | Err(_) => break,
                    Ok(n) => {
                        sink(stream, &chunk[..n]);
                        buf.extend_from_slice(&chunk[..n]);
                    }
                }
            }
        };
        std::thread::scope(|s| {
            s.spawn(|| pump(&mut err_pipe, LogStream::Stderr, stderr));
            pump(&mut out_pipe, LogStream::Stdout, stdout);
        });
        let status = child.wait().map_err(|e| ToolError::Io(e.to_string()))?;
        match status.code() {
            Some(0) => Ok(()),
            Some(code) => Err(ToolError::ToolFailed { stage, status: code }),
            // killed by a signal
            None => Err(ToolError::ToolFailed { stage, status: -1 }),
        }
    }

    fn collect_outputs(&self, desc: &ToolDescriptor, workdir: &Path) -> Result<BTreeMap<String, Vec<Datum>>, ToolError> {
        let missing_all = || ToolError::OutputMissing(desc.outputs.first().map_or("outputs.json".into(), |e| e.name.clone()));
        if desc.outputs.is_empty() {
            return Ok(BTreeMap::new());
        }
        let text = fs::read_to_string(workdir.join("outputs.json")).map_err(|_| missing_all())?;
        let doc: serde_json::Map<String, Value> =
            serde_json::from_str(&text).map_err(|e| ToolError::OutputMissing(format!("outputs.json unreadable: {e}")))?;
        let mut out = BTreeMap::new();
        for ep in &desc.outputs {
            let value = doc.get(&ep.name).ok_or_else(|| ToolError::OutputMissing(ep.name.clone()))?;
            let values = match value {
                Value::Array(items) => items.as_slice(),
                single => std::slice::from_ref(single),
            };
            let mismatch = || ToolError::OutputTypeMismatch { name: ep.name.clone(), expected: ep.datum_type };
            let mut datums = Vec::with_capacity(values.len());
            for v in values {
                let datum = if ep.datum_type == DatumType::FileRef {
                    let rel = v.as_str().ok_or_else(mismatch)?;
                    self.read_output_file(workdir, rel).ok_or_else(mismatch)??
                } else {
                    Datum::from_scalar_json(v, ep.datum_type).ok_or_else(mismatch)?
                };
                datums.push(datum);
            }
            out.insert(ep.name.clone(), datums);
        }
        let extra: Vec<_> = doc.keys().filter(|k| desc.outputs.iter().all(|e| &e.name != *k)).collect();
        if !extra.is_empty() {
            log::warn!("{}: ignoring undeclared outputs {extra:?}", desc.name);
        }
        Ok(out)
    }

    /// `None` when the path escapes `outputs/` or does not name a file.
    fn read_output_file(&self, workdir: &Path, rel: &str) -> Option<Result<Datum, ToolError>> {
        let rel_path = Path::new(rel);
        let clean = rel_path.components().all(|c| matches!(c, Component::Normal(_)));
        if !clean || rel_path.components().next() != Some(Component::Normal("outputs".as_ref())) {
            return None;
        }
        let path = workdir.join(rel_path);
        if !path.is_file() {
            return None;
        }
        let filename = path.file_name()?.to_string_lossy().into_owned();
        Some(self.blobs.put_file(&path).map_err(ToolError::from).map(|b| {
            Datum::FileRef(FileRef { digest: b.digest, size: b.size, filename })
        }))
    }
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Checks that inputs cover the declared inputs exactly, widening Integer to Float.
fn check_inputs(desc: &ToolDescriptor, inputs: &BTreeMap<String, Datum>) -> Result<BTreeMap<String, Datum>, ToolError> {
    let declared: HashSet<&str> = desc.inputs.iter().map(|e| e.name.as_str()).collect();
    if let Some(extra) = inputs.keys().find(|k| !declared.contains(k.as_str())) {
        return Err(ToolError::BadInputs(format!("undeclared input `{extra}`")));
    }
    let mut out = BTreeMap::new();
    for ep in &desc.inputs {
        let d = inputs.get(&ep.name).ok_or_else(|| ToolError::BadInputs(format!("missing input `{}`", ep.name)))?;
        let d = d
            .convert_to(ep.datum_type)
            .ok_or_else(|| ToolError::BadInputs(format!("`{}` expects {}, got {}", ep.name, ep.datum_type, d.datum_type())))?;
        out.insert(ep.name.clone(), d);
    }
    Ok(out)
}

/// Convenience wrapper running one descriptor under `workdir_root`.
pub fn execute_tool(
    desc: &ToolDescriptor,
    inputs: &BTreeMap<String, Datum>,
    workdir_root: &Path,
    blobs: &BlobStore,
) -> Result<ExecutionOutcome, ExecFailure> {
    ToolRunner::new(workdir_root, blobs.clone()).execute(desc, inputs, &discard_logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Handling;

    fn decl(name: &str, ty: DatumType) -> EndpointDecl {
        EndpointDecl { name: name.into(), datum_type: ty, handling: None }
    }

    const MINIMAL: &str = r#"{
        "name": "square", "version": "1.0",
        "commands": {"linux": "sq ${in:x} ${out:y}"},
        "inputs": [{"name": "x", "type": "Float", "handling": "queued"}],
        "outputs": [{"name": "y", "type": "Float"}]
    }"#;

    #[test]
    fn parse_linux_only() {
        let d = parse_descriptor(MINIMAL).unwrap();
        assert_eq!(d.inputs[0].handling, Some(Handling::Queued));
        assert_eq!(d.component_ref().to_string(), "square@1.0");
        assert_eq!(parse_descriptor(&d.to_json()).unwrap(), d);
    }

    #[test]
    fn descriptor_errors() {
        let none = r#"{"name":"t","version":"1","commands":{}}"#;
        assert_eq!(parse_descriptor(none).unwrap_err(), DescriptorError::MissingCommand);
        let bad = r#"{"name":"t","version":"1","commands":{"linux":"run ${in:z}"},
            "inputs":[{"name":"x","type":"Float"}]}"#;
        assert_eq!(parse_descriptor(bad).unwrap_err(), DescriptorError::BadPlaceholder("z".into()));
        let dup = r#"{"name":"t","version":"1","commands":{"linux":"run"},
            "inputs":[{"name":"x","type":"Float"},{"name":"x","type":"Text"}]}"#;
        assert_eq!(parse_descriptor(dup).unwrap_err().code(), "DUPLICATE_ENDPOINT");
        let unknown = r#"{"name":"t","version":"1","commands":{"linux":"run"},"extra":1}"#;
        assert_eq!(parse_descriptor(unknown).unwrap_err().code(), "SYNTAX");
    }

    #[test]
    fn scaffold_roundtrip_and_errors() {
        let answers = ScaffoldAnswers {
            name: "echo".into(),
            version: "1".into(),
            linux_command: Some("echo ${in:msg}".into()),
            inputs: vec![decl("msg", DatumType::Text)],
            outputs: vec![decl("reply", DatumType::Text)],
            ..Default::default()
        };
        let text = scaffold_descriptor(&answers).unwrap();
        let d = parse_descriptor(&text).unwrap();
        assert_eq!(d.name, "echo");
        assert_eq!(d.inputs.len(), 1);

        let mut dup = answers.clone();
        dup.inputs.push(decl("msg", DatumType::Integer));
        assert_eq!(scaffold_descriptor(&dup).unwrap_err().code(), "DUPLICATE_ENDPOINT");
    }

    #[test]
    fn command_selection() {
        let mut d = parse_descriptor(MINIMAL).unwrap();
        assert_eq!(select_command(&d, HostOs::Linux).unwrap(), "sq ${in:x} ${out:y}");
        assert_eq!(select_command(&d, HostOs::Windows).unwrap_err().code(), "OS_UNSUPPORTED");
        d.commands.windows = Some("sq.exe".into());
        assert_eq!(select_command(&d, HostOs::Linux).unwrap(), "sq ${in:x} ${out:y}");
        d.commands.linux = None;
        assert_eq!(select_command(&d, HostOs::Linux).unwrap_err().code(), "OS_UNSUPPORTED");
    }

    #[test]
    fn rendering() {
        let wd = Path::new("/tmp/w");
        let inputs = BTreeMap::from([("x".to_string(), Datum::Float(2.5))]);
        assert_eq!(render_command("run ${in:x}", wd, &inputs).unwrap(), ["run", "2.5"]);
        assert_eq!(render_command("p ${workdir}", wd, &inputs).unwrap(), ["p", "/tmp/w"]);
        assert_eq!(render_command("p --v=${in:x}!", wd, &inputs).unwrap(), ["p", "--v=2.5!"]);

        let f = FileRef { digest: "0".repeat(64), size: 3, filename: "a.dat".into() };
        let files = BTreeMap::from([("f".to_string(), Datum::FileRef(f))]);
        assert_eq!(render_command("cp ${in:f} ${out:g}", wd, &files).unwrap(), ["cp", "inputs/f/a.dat", "outputs/g"]);
        assert_eq!(render_command("cp ${in:q}", wd, &files).unwrap_err().code(), "UNRESOLVED_PLACEHOLDER");
    }

    #[test]
    fn substituted_values_are_not_resplit() {
        let inputs = BTreeMap::from([("t".to_string(), Datum::Text("two words".into()))]);
        assert_eq!(render_command("echo ${in:t}", Path::new("/"), &inputs).unwrap(), ["echo", "two words"]);
    }

    #[test]
    fn hostile_filenames_stay_inside() {
        let f = FileRef { digest: "0".repeat(64), size: 0, filename: "../../etc/passwd".into() };
        assert_eq!(input_file_path("f", &f), "inputs/f/passwd");
        let f = FileRef { digest: "0".repeat(64), size: 0, filename: "..".into() };
        assert_eq!(input_file_path("f", &f), "inputs/f/file");
    }
}
