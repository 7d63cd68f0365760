//! Built-in standard components (all version `1`):
//!
//! | component              | inputs                 | outputs                          |
//! |------------------------|------------------------|----------------------------------|
//! | `std.input-provider`   | none                   | one per configured value / file  |
//! | `std.output-writer`    | declared per instance  | none                             |
//! | `std.script`           | declared per instance  | declared per instance            |
//! | `std.switch`           | `value`                | `true`, `false`                  |
//! | `std.converger`        | `x: Float`             | `loop`, `converged`, `done`      |
//! | `std.optimizer`        | `objective: Float`     | one Float per variable, `optimum`|
//!
//! Built-ins always execute on the controller of a run.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::PathBuf;

use serde::Deserialize;
use serde_json::{json, Value};

use crate::datum::{Datum, DatumType, FileRef};
use crate::model::{
    endpoints_from_decls, Catalog, ComponentInstance, ComponentInterface, ComponentRef, Direction, Endpoint, Handling,
};
use crate::store::BlobStore;
use crate::tool::{Commands, ToolDescriptor};

pub const BUILTIN_VERSION: &str = "1";
pub const INPUT_PROVIDER: &str = "std.input-provider";
pub const OUTPUT_WRITER: &str = "std.output-writer";
pub const SCRIPT: &str = "std.script";
pub const SWITCH: &str = "std.switch";
pub const CONVERGER: &str = "std.converger";
pub const OPTIMIZER: &str = "std.optimizer";

const ALL: [&str; 6] = [INPUT_PROVIDER, OUTPUT_WRITER, SCRIPT, SWITCH, CONVERGER, OPTIMIZER];

pub fn is_builtin(component: &ComponentRef) -> bool {
    component.version == BUILTIN_VERSION && ALL.contains(&component.name.as_str())
}

pub fn builtin_refs() -> impl Iterator<Item = ComponentRef> {
    ALL.iter().map(|n| ComponentRef::new(*n, BUILTIN_VERSION))
}

/// Adds the built-ins to a catalog.
pub fn register_builtins(catalog: &mut Catalog) {
    catalog.insert_dynamic(ComponentRef::new(INPUT_PROVIDER, BUILTIN_VERSION), |i| Ok(InputProvider::from_instance(i)?.interface()));
    catalog.insert_dynamic(ComponentRef::new(OUTPUT_WRITER, BUILTIN_VERSION), |i| Ok(OutputWriter::from_instance(i)?.interface()));
    catalog.insert_dynamic(ComponentRef::new(SCRIPT, BUILTIN_VERSION), |i| Ok(script_descriptor(i)?.interface()));
    catalog.insert_dynamic(ComponentRef::new(SWITCH, BUILTIN_VERSION), |i| Ok(Switch::from_instance(i)?.interface()));
    catalog.insert_dynamic(ComponentRef::new(CONVERGER, BUILTIN_VERSION), |i| {
        Converger::from_instance(i)?;
        Ok(Converger::interface())
    });
    catalog.insert_dynamic(ComponentRef::new(OPTIMIZER, BUILTIN_VERSION), |i| Ok(Optimizer::from_instance(i)?.interface()));
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{code}: {message}")]
pub struct BehaviorError {
    pub code: &'static str,
    pub message: String,
}

impl BehaviorError {
    pub fn new(code: &'static str, message: impl Into<String>) -> Self {
        BehaviorError { code, message: message.into() }
    }

    fn config(message: impl Into<String>) -> Self {
        Self::new("INVALID_CONFIG", message)
    }
}

impl From<BehaviorError> for String {
    fn from(e: BehaviorError) -> String {
        e.to_string()
    }
}

/// Per-firing context handed to a behavior.
pub struct FireContext<'a> {
    pub instance_id: &'a str,
    pub execution_index: u32,
    pub blobs: &'a BlobStore,
    /// Text recorded as the firing's stdout.
    pub log: String,
}

pub type Emission = BTreeMap<String, Vec<Datum>>;

/// A built-in evaluated on the engine's event loop.
pub trait Behavior: Send {
    /// Fires once at run start even though its queued inputs are empty.
    fn self_starting(&self) -> bool {
        false
    }

    /// Called once before the first firing of the run.
    fn prepare(&mut self, _blobs: &BlobStore) -> Result<(), BehaviorError> {
        Ok(())
    }

    fn fire(&mut self, ctx: &mut FireContext<'_>, inputs: &BTreeMap<String, Datum>) -> Result<Emission, BehaviorError>;
}

pub enum Builtin {
    Behavior(Box<dyn Behavior>),
    /// Runs off-loop through the tool runner.
    Script(ToolDescriptor),
}

/// Creates the built-in behind `instance`; `None` if it is not a built-in.
pub fn instantiate(instance: &ComponentInstance) -> Option<Result<Builtin, BehaviorError>> {
    if !is_builtin(&instance.component) {
        return None;
    }
    let boxed = |b: Result<Box<dyn Behavior>, BehaviorError>| b.map(Builtin::Behavior);
    Some(match instance.component.name.as_str() {
        INPUT_PROVIDER => boxed(InputProvider::from_instance(instance).map(|b| Box::new(b) as _)),
        OUTPUT_WRITER => boxed(OutputWriter::from_instance(instance).map(|b| Box::new(b) as _)),
        SWITCH => boxed(Switch::from_instance(instance).map(|b| Box::new(b) as _)),
        CONVERGER => boxed(Converger::from_instance(instance).map(|b| Box::new(b) as _)),
        OPTIMIZER => boxed(Optimizer::from_instance(instance).map(|b| Box::new(b) as _)),
        _ => script_descriptor(instance).map(Builtin::Script),
    })
}

fn parse_config<T: for<'de> Deserialize<'de>>(instance: &ComponentInstance) -> Result<T, BehaviorError> {
    let mut map: serde_json::Map<String, Value> = instance.config.clone().into_iter().collect();
    map.remove(crate::model::SEEDS_KEY);
    serde_json::from_value(Value::Object(map)).map_err(|e| BehaviorError::config(format!("{}: {e}", instance.component.name)))
}

fn no_declared_endpoints(instance: &ComponentInstance) -> Result<(), BehaviorError> {
    if instance.inputs.is_empty() && instance.outputs.is_empty() {
        Ok(())
    } else {
        Err(BehaviorError::config(format!("{} has fixed endpoints", instance.component.name)))
    }
}

// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InputProviderConfig {
    #[serde(default)]
    values: BTreeMap<String, Value>,
    #[serde(default)]
    files: BTreeMap<String, PathBuf>,
}

/// Emits each configured value and file once.
pub struct InputProvider {
    values: BTreeMap<String, Datum>,
    files: BTreeMap<String, PathBuf>,
    outputs: Vec<Endpoint>,
    loaded: BTreeMap<String, Datum>,
}

impl InputProvider {
    fn from_instance(instance: &ComponentInstance) -> Result<Self, BehaviorError> {
        let cfg: InputProviderConfig = parse_config(instance)?;
        if !instance.inputs.is_empty() {
            return Err(BehaviorError::config("std.input-provider has no inputs"));
        }
        let declared = endpoints_from_decls(&instance.outputs, Direction::Output).map_err(|e| BehaviorError::config(e.to_string()))?;
        let mut values = BTreeMap::new();
        let mut outputs = Vec::new();
        for (name, raw) in &cfg.values {
            if cfg.files.contains_key(name) {
                return Err(BehaviorError::config(format!("`{name}` is both a value and a file")));
            }
            let datum = match declared.iter().find(|e| &e.name == name) {
                Some(ep) => Datum::from_scalar_json(raw, ep.datum_type),
                None => Datum::infer_from_json(raw),
            };
            let datum = datum.ok_or_else(|| BehaviorError::config(format!("value `{name}` does not fit its type")))?;
            outputs.push(Endpoint::output(name, datum.datum_type()));
            values.insert(name.clone(), datum);
        }
        for name in cfg.files.keys() {
            outputs.push(Endpoint::output(name, DatumType::FileRef));
        }
        for ep in &declared {
            match outputs.iter().find(|o| o.name == ep.name) {
                Some(o) if o.datum_type == ep.datum_type => {}
                Some(_) => return Err(BehaviorError::config(format!("output `{}` does not match its value", ep.name))),
                None => return Err(BehaviorError::config(format!("output `{}` has no configured value", ep.name))),
            }
        }
        for name in values.keys().chain(cfg.files.keys()) {
            if !crate::model::is_identifier(name) {
                return Err(BehaviorError::config(format!("invalid output name `{name}`")));
            }
        }
        Ok(InputProvider { values, files: cfg.files, outputs, loaded: BTreeMap::new() })
    }

    fn interface(&self) -> ComponentInterface {
        ComponentInterface { inputs: vec![], outputs: self.outputs.clone() }
    }
}

impl Behavior for InputProvider {
    fn prepare(&mut self, blobs: &BlobStore) -> Result<(), BehaviorError> {
        for (name, path) in &self.files {
            let bytes = fs::read(path)
                .map_err(|e| BehaviorError::new("FILE_NOT_FOUND", format!("`{name}`: {}: {e}", path.display())))?;
            let blob = blobs.put(&bytes).map_err(|e| BehaviorError::new("IO", e.to_string()))?;
            let filename = path.file_name().map_or_else(|| name.clone(), |f| f.to_string_lossy().into_owned());
            self.loaded.insert(name.clone(), Datum::FileRef(FileRef { digest: blob.digest, size: blob.size, filename }));
        }
        Ok(())
    }

    fn fire(&mut self, _ctx: &mut FireContext<'_>, _inputs: &BTreeMap<String, Datum>) -> Result<Emission, BehaviorError> {
        if self.loaded.len() != self.files.len() {
            return Err(BehaviorError::new("FILE_NOT_FOUND", "input files were not loaded"));
        }
        let all = self.values.iter().chain(self.loaded.iter());
        Ok(all.map(|(k, v)| (k.clone(), vec![v.clone()])).collect())
    }
}

// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputWriterConfig {
    target: PathBuf,
    #[serde(default = "default_pattern")]
    pattern: String,
}

fn default_pattern() -> String {
    "{instance}-{endpoint}-{index}-{filename}".into()
}

/// Appends scalars to `values.log` and materializes files in the target directory.
pub struct OutputWriter {
    target: PathBuf,
    pattern: String,
    inputs: Vec<Endpoint>,
}

impl OutputWriter {
    fn from_instance(instance: &ComponentInstance) -> Result<Self, BehaviorError> {
        let cfg: OutputWriterConfig = parse_config(instance)?;
        if !instance.outputs.is_empty() {
            return Err(BehaviorError::config("std.output-writer has no outputs"));
        }
        let inputs = endpoints_from_decls(&instance.inputs, Direction::Input).map_err(|e| BehaviorError::config(e.to_string()))?;
        if inputs.is_empty() {
            return Err(BehaviorError::config("std.output-writer needs at least one declared input"));
        }
        if !cfg.pattern.contains("{index}") {
            return Err(BehaviorError::config("output pattern must contain {index}"));
        }
        Ok(OutputWriter { target: cfg.target, pattern: cfg.pattern, inputs })
    }

    fn interface(&self) -> ComponentInterface {
        ComponentInterface { inputs: self.inputs.clone(), outputs: vec![] }
    }
}

impl Behavior for OutputWriter {
    fn fire(&mut self, ctx: &mut FireContext<'_>, inputs: &BTreeMap<String, Datum>) -> Result<Emission, BehaviorError> {
        let io = |e: std::io::Error| BehaviorError::new("IO", format!("{}: {e}", self.target.display()));
        fs::create_dir_all(&self.target).map_err(io)?;
        for ep in &self.inputs {
            let Some(datum) = inputs.get(&ep.name) else { continue };
            match datum {
                Datum::FileRef(f) => {
                    let name = self
                        .pattern
                        .replace("{instance}", ctx.instance_id)
                        .replace("{endpoint}", &ep.name)
                        .replace("{index}", &ctx.execution_index.to_string())
                        .replace("{filename}", &f.filename)
                        .replace(['/', '\\'], "_");
                    let bytes = ctx.blobs.get(&f.digest).map_err(|e| BehaviorError::new("IO", e.to_string()))?;
                    let path = self.target.join(&name);
                    let mut file = OpenOptions::new().write(true).create_new(true).open(&path).map_err(io)?;
                    file.write_all(&bytes).map_err(io)?;
                    ctx.log.push_str(&format!("wrote {}\n", path.display()));
                }
                scalar => {
                    let line = json!({
                        "instance": ctx.instance_id,
                        "endpoint": ep.name,
                        "index": ctx.execution_index,
                        "value": scalar.to_scalar_json(),
                    });
                    let mut log = OpenOptions::new().create(true).append(true).open(self.target.join("values.log")).map_err(io)?;
                    writeln!(log, "{line}").map_err(io)?;
                }
            }
        }
        Ok(Emission::new())
    }
}

// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
struct ScriptConfig {
    #[serde(default)]
    command: Option<String>,
    #[serde(default)]
    windows_command: Option<String>,
    #[serde(default)]
    pre_script: Option<String>,
    #[serde(default)]
    post_script: Option<String>,
}

/// Ad-hoc descriptor for a `std.script` instance.
pub fn script_descriptor(instance: &ComponentInstance) -> Result<ToolDescriptor, BehaviorError> {
    let cfg: ScriptConfig = parse_config(instance)?;
    let decl_err = |e: crate::model::EndpointError| BehaviorError::config(e.to_string());
    let desc = ToolDescriptor {
        name: format!("script-{}", instance.id),
        version: BUILTIN_VERSION.into(),
        commands: Commands { windows: cfg.windows_command, linux: cfg.command },
        inputs: endpoints_from_decls(&instance.inputs, Direction::Input).map_err(decl_err)?,
        outputs: endpoints_from_decls(&instance.outputs, Direction::Output).map_err(decl_err)?,
        pre_script: cfg.pre_script,
        post_script: cfg.post_script,
        documentation: None,
    };
    desc.check().map_err(|e| BehaviorError::config(e.to_string()))?;
    Ok(desc)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Lt,
    Le,
    Eq,
    Ge,
    Gt,
    Ne,
}

impl CmpOp {
    fn is_ordering(self) -> bool {
        !matches!(self, CmpOp::Eq | CmpOp::Ne)
    }

    fn holds(self, ord: std::cmp::Ordering) -> bool {
        use std::cmp::Ordering::*;
        match self {
            CmpOp::Lt => ord == Less,
            CmpOp::Le => ord != Greater,
            CmpOp::Eq => ord == Equal,
            CmpOp::Ge => ord != Less,
            CmpOp::Gt => ord == Greater,
            CmpOp::Ne => ord != Equal,
        }
    }
}

/// Parses conditions such as `< 10`, `>= 2.5`, `!= "done"`.
pub fn parse_condition(text: &str) -> Result<(CmpOp, Value), BehaviorError> {
    let t = text.trim();
    const OPS: [(&str, CmpOp); 11] = [
        ("<=", CmpOp::Le),
        (">=", CmpOp::Ge),
        ("!=", CmpOp::Ne),
        ("==", CmpOp::Eq),
        ("≤", CmpOp::Le),
        ("≥", CmpOp::Ge),
        ("≠", CmpOp::Ne),
        ("<", CmpOp::Lt),
        (">", CmpOp::Gt),
        ("=", CmpOp::Eq),
        ("", CmpOp::Eq),
    ];
    let (op, rest) = OPS
        .iter()
        .find_map(|(sym, op)| t.strip_prefix(sym).map(|r| (*op, r)))
        .expect("empty prefix always matches");
    let rest = rest.trim();
    let literal: Value = serde_json::from_str(rest).map_err(|_| BehaviorError::config(format!("bad condition literal `{rest}`")))?;
    if !matches!(literal, Value::Bool(_) | Value::Number(_) | Value::String(_)) || rest.is_empty() {
        return Err(BehaviorError::config(format!("bad condition `{text}`")));
    }
    Ok((op, literal))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
struct SwitchConfig {
    condition: String,
    #[serde(default = "default_switch_type")]
    value_type: DatumType,
}

fn default_switch_type() -> DatumType {
    DatumType::Float
}

/// Forwards `value` to `true` or `false` depending on the condition.
pub struct Switch {
    op: CmpOp,
    literal: Value,
    ty: DatumType,
}

impl Switch {
    fn from_instance(instance: &ComponentInstance) -> Result<Self, BehaviorError> {
        no_declared_endpoints(instance)?;
        let cfg: SwitchConfig = parse_config(instance)?;
        let (op, literal) = parse_condition(&cfg.condition)?;
        Ok(Switch { op, literal, ty: cfg.value_type })
    }

    fn interface(&self) -> ComponentInterface {
        ComponentInterface {
            inputs: vec![Endpoint::input("value", self.ty, Handling::Queued)],
            outputs: vec![Endpoint::output("true", self.ty), Endpoint::output("false", self.ty)],
        }
    }

    pub fn evaluate(&self, value: &Datum) -> Result<bool, BehaviorError> {
        let mismatch = || BehaviorError::new("TYPE_MISMATCH", format!("cannot compare {value} with {}", self.literal));
        let ord = match (value, &self.literal) {
            (Datum::Integer(a), Value::Number(n)) if n.is_i64() => a.cmp(&n.as_i64().unwrap_or_default()),
            (Datum::Integer(_) | Datum::Float(_), Value::Number(n)) => {
                let a = value.as_f64().ok_or_else(mismatch)?;
                a.partial_cmp(&n.as_f64().ok_or_else(mismatch)?).ok_or_else(mismatch)?
            }
            (Datum::Text(a), Value::String(b)) if !self.op.is_ordering() => a.as_str().cmp(b.as_str()),
            (Datum::Boolean(a), Value::Bool(b)) if !self.op.is_ordering() => a.cmp(b),
            _ => return Err(mismatch()),
        };
        Ok(self.op.holds(ord))
    }
}

impl Behavior for Switch {
    fn fire(&mut self, _ctx: &mut FireContext<'_>, inputs: &BTreeMap<String, Datum>) -> Result<Emission, BehaviorError> {
        let value = inputs.get("value").ok_or_else(|| BehaviorError::new("BAD_INPUTS", "missing `value`"))?;
        let branch = if self.evaluate(value)? { "true" } else { "false" };
        Ok(Emission::from([(branch.to_owned(), vec![value.clone()])]))
    }
}

// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvergerConfig {
    eps_abs: f64,
    max_iterations: u32,
}

/// Feeds `x` back on `loop` until two successive values agree within `eps_abs`.
pub struct Converger {
    eps_abs: f64,
    max_iterations: u32,
    previous: Option<f64>,
    t: u32,
}

impl Converger {
    fn from_instance(instance: &ComponentInstance) -> Result<Self, BehaviorError> {
        no_declared_endpoints(instance)?;
        let cfg: ConvergerConfig = parse_config(instance)?;
        Self::new(cfg.eps_abs, cfg.max_iterations)
    }

    pub fn new(eps_abs: f64, max_iterations: u32) -> Result<Self, BehaviorError> {
        if !(eps_abs > 0.0) {
            return Err(BehaviorError::config("eps_abs must be positive"));
        }
        if max_iterations < 1 {
            return Err(BehaviorError::config("max_iterations must be at least 1"));
        }
        Ok(Converger { eps_abs, max_iterations, previous: None, t: 0 })
    }

    fn interface() -> ComponentInterface {
        ComponentInterface {
            inputs: vec![Endpoint::input("x", DatumType::Float, Handling::Queued)],
            outputs: vec![
                Endpoint::output("loop", DatumType::Float),
                Endpoint::output("converged", DatumType::Float),
                Endpoint::output("done", DatumType::Boolean),
            ],
        }
    }

    /// One step on value `x`; `(output name, datum)` pairs in emission order.
    pub fn step(&mut self, x: f64) -> Vec<(&'static str, Datum)> {
        self.t += 1;
        let converged = self.t >= 2 && self.previous.is_some_and(|p| (x - p).abs() <= self.eps_abs);
        self.previous = Some(x);
        if converged {
            vec![("converged", Datum::Float(x)), ("done", Datum::Boolean(true))]
        } else if self.t >= self.max_iterations {
            vec![("converged", Datum::Float(x)), ("done", Datum::Boolean(false))]
        } else {
            vec![("loop", Datum::Float(x))]
        }
    }
}

impl Behavior for Converger {
    fn fire(&mut self, ctx: &mut FireContext<'_>, inputs: &BTreeMap<String, Datum>) -> Result<Emission, BehaviorError> {
        let x = inputs.get("x").and_then(Datum::as_f64).ok_or_else(|| BehaviorError::new("BAD_INPUTS", "missing `x`"))?;
        let out = self.step(x);
        match out.iter().find(|(n, _)| *n == "done") {
            Some((_, Datum::Boolean(true))) => ctx.log.push_str(&format!("converged after {} iterations: {x:?}\n", self.t)),
            Some(_) => ctx.log.push_str(&format!("max_iterations {} reached without convergence: {x:?}\n", self.t)),
            None => {}
        }
        let mut emission = Emission::new();
        for (name, d) in out {
            emission.entry(name.to_owned()).or_default().push(d);
        }
        Ok(emission)
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Grid,
    CoordinateDescent,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variable {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub initial_step: f64,
    #[serde(default)]
    pub initial: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub strategy: Strategy,
    pub variables: Vec<Variable>,
    pub tol: f64,
    pub max_evals: u32,
}

/// Minimizes `objective` by emitting one candidate at a time.
#[derive(Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    search: Search,
    pending: Option<Vec<f64>>,
    best: Option<(Vec<f64>, f64)>,
    evals: u32,
    finished: bool,
}

#[derive(Debug)]
enum Search {
    Grid { points: Vec<Vec<f64>>, next: usize },
    Coordinate { center: Vec<f64>, steps: Vec<f64>, var: usize, dir: usize, improved: bool, started: bool },
}

impl Optimizer {
    fn from_instance(instance: &ComponentInstance) -> Result<Self, BehaviorError> {
        no_declared_endpoints(instance)?;
        Self::new(parse_config(instance)?)
    }

    pub fn new(cfg: OptimizerConfig) -> Result<Self, BehaviorError> {
        if cfg.variables.is_empty() {
            return Err(BehaviorError::config("optimizer needs at least one variable"));
        }
        for v in &cfg.variables {
            if !crate::model::is_identifier(&v.name) || v.name == "objective" || v.name == "optimum" {
                return Err(BehaviorError::config(format!("invalid variable name `{}`", v.name)));
            }
            if !(v.lower < v.upper) {
                return Err(BehaviorError::new("BAD_BOUNDS", format!("`{}`: lower must be below upper", v.name)));
            }
            if !(v.initial_step > 0.0) {
                return Err(BehaviorError::config(format!("`{}`: initial_step must be positive", v.name)));
            }
            if v.initial.is_some_and(|x| !(v.lower..=v.upper).contains(&x)) {
                return Err(BehaviorError::new("BAD_BOUNDS", format!("`{}`: initial value outside bounds", v.name)));
            }
        }
        let names: std::collections::HashSet<_> = cfg.variables.iter().map(|v| &v.name).collect();
        if names.len() != cfg.variables.len() {
            return Err(BehaviorError::config("duplicate variable name"));
        }
        if !(cfg.tol > 0.0) {
            return Err(BehaviorError::new("TOL_NONPOSITIVE", "tol must be positive"));
        }
        if cfg.max_evals < 1 {
            return Err(BehaviorError::config("max_evals must be at least 1"));
        }
        let search = match cfg.strategy {
            Strategy::Grid => Search::Grid { points: grid_points(&cfg.variables), next: 0 },
            Strategy::CoordinateDescent => Search::Coordinate {
                center: cfg.variables.iter().map(|v| v.initial.unwrap_or(v.lower)).collect(),
                steps: cfg.variables.iter().map(|v| v.initial_step).collect(),
                var: 0,
                dir: 0,
                improved: false,
                started: false,
            },
        };
        Ok(Optimizer { cfg, search, pending: None, best: None, evals: 0, finished: false })
    }

    fn interface(&self) -> ComponentInterface {
        let mut outputs: Vec<_> = self.cfg.variables.iter().map(|v| Endpoint::output(&v.name, DatumType::Float)).collect();
        outputs.push(Endpoint::output("optimum", DatumType::Text));
        ComponentInterface { inputs: vec![Endpoint::input("objective", DatumType::Float, Handling::Queued)], outputs }
    }

    pub fn evaluations(&self) -> u32 {
        self.evals
    }

    pub fn best(&self) -> Option<(&[f64], f64)> {
        self.best.as_ref().map(|(p, f)| (p.as_slice(), *f))
    }

    /// Feeds the objective of the pending candidate (if any) and returns the
    /// next candidate, or `None` once the search is over.
    pub fn advance(&mut self, objective: Option<f64>) -> Option<Vec<f64>> {
        if self.finished {
            return None;
        }
        let mut accepted = false;
        if let (Some(point), Some(f)) = (self.pending.take(), objective) {
            self.evals += 1;
            // strict improvement only: ties keep the earlier point
            if self.best.as_ref().map_or(true, |(_, b)| f < *b) {
                self.best = Some((point, f));
                accepted = true;
            }
        }
        if self.evals >= self.cfg.max_evals {
            self.finished = true;
            return None;
        }
        let next = match &mut self.search {
            Search::Grid { points, next } => {
                let p = points.get(*next).cloned();
                *next += 1;
                p
            }
            Search::Coordinate { center, steps, var, dir, improved, started } => {
                if !*started {
                    *started = true;
                    Some(center.clone())
                } else {
                    // the first evaluation only establishes the baseline
                    if accepted && self.evals > 1 {
                        *center = self.best.as_ref().expect("accepted implies best").0.clone();
                        *improved = true;
                        // move on to the next variable after an accepted move
                        *dir = 2;
                    }
                    next_coordinate_candidate(&self.cfg.variables, self.cfg.tol, center, steps, var, dir, improved)
                }
            }
        };
        match next {
            Some(p) => {
                self.pending = Some(p.clone());
                Some(p)
            }
            None => {
                self.finished = true;
                None
            }
        }
    }

    pub fn report(&self) -> String {
        let strategy = match self.cfg.strategy {
            Strategy::Grid => "grid",
            Strategy::CoordinateDescent => "coordinate_descent",
        };
        let (point, value) = match &self.best {
            Some((p, f)) => {
                let named: serde_json::Map<_, _> =
                    self.cfg.variables.iter().zip(p).map(|(v, x)| (v.name.clone(), json!(x))).collect();
                (Value::Object(named), json!(f))
            }
            None => (Value::Null, Value::Null),
        };
        json!({ "strategy": strategy, "point": point, "value": value, "evaluations": self.evals }).to_string()
    }
}

fn clamp(v: &Variable, x: f64) -> f64 {
    x.clamp(v.lower, v.upper)
}

/// Next trial of the coordinate search, advancing `var`/`dir` and halving
/// steps after a cycle without improvement.
fn next_coordinate_candidate(
    vars: &[Variable],
    tol: f64,
    center: &[f64],
    steps: &mut [f64],
    var: &mut usize,
    dir: &mut usize,
    improved: &mut bool,
) -> Option<Vec<f64>> {
    loop {
        if *dir >= 2 {
            *dir = 0;
            *var += 1;
            if *var >= vars.len() {
                *var = 0;
                if !*improved {
                    steps.iter_mut().for_each(|s| *s /= 2.0);
                }
                *improved = false;
            }
        }
        if steps.iter().all(|s| *s <= tol) {
            return None;
        }
        let i = *var;
        let sign = if *dir == 0 { 1.0 } else { -1.0 };
        *dir += 1;
        let trial = clamp(&vars[i], center[i] + sign * steps[i]);
        if trial != center[i] {
            let mut p = center.to_vec();
            p[i] = trial;
            return Some(p);
        }
    }
}

fn grid_points(vars: &[Variable]) -> Vec<Vec<f64>> {
    let axes: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| {
            let n = ((v.upper - v.lower) / v.initial_step + 1e-9).floor() as usize;
            (0..=n).map(|k| v.lower + k as f64 * v.initial_step).collect()
        })
        .collect();
    let mut points = vec![Vec::new()];
    for axis in &axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |x| {
                    let mut q = p.clone();
                    q.push(*x);
                    q
                })
            })
            .collect();
    }
    points
}

impl Behavior for Optimizer {
    fn self_starting(&self) -> bool {
        true
    }

    fn fire(&mut self, ctx: &mut FireContext<'_>, inputs: &BTreeMap<String, Datum>) -> Result<Emission, BehaviorError> {
        let objective = match inputs.get("objective") {
            Some(d) => Some(d.as_f64().ok_or_else(|| BehaviorError::new("BAD_INPUTS", "objective must be numeric"))?),
            None => None,
        };
        if objective.is_some() && self.pending.is_none() {
            return Err(BehaviorError::new("BAD_INPUTS", "objective received without a pending candidate"));
        }
        let mut emission = Emission::new();
        match self.advance(objective) {
            Some(point) => {
                for (v, x) in self.cfg.variables.iter().zip(point) {
                    emission.insert(v.name.clone(), vec![Datum::Float(x)]);
                }
            }
            None => {
                let report = self.report();
                ctx.log.push_str(&report);
                ctx.log.push('\n');
                emission.insert("optimum".into(), vec![Datum::Text(report)]);
            }
        }
        Ok(emission)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{parse_workflow, validate_graph};

    fn instance(component: &str, config: Value) -> ComponentInstance {
        let mut i = ComponentInstance::new("i", ComponentRef::new(component, "1"));
        i.config = serde_json::from_value(config).unwrap();
        i
    }

    fn ctx(blobs: &BlobStore, index: u32) -> FireContext<'_> {
        FireContext { instance_id: "w", execution_index: index, blobs, log: String::new() }
    }

    fn blobs() -> (tempfile::TempDir, BlobStore) {
        let d = tempfile::tempdir().unwrap();
        let b = BlobStore::open(d.path().join("blobs")).unwrap();
        (d, b)
    }

    fn run_optimizer(cfg: Value, f: impl Fn(&[f64]) -> f64) -> Optimizer {
        let mut opt = Optimizer::new(serde_json::from_value(cfg).unwrap()).unwrap();
        let mut candidate = opt.advance(None);
        let mut guard = 0;
        while let Some(p) = candidate {
            let (lo, hi) = (opt.cfg.variables[0].lower, opt.cfg.variables[0].upper);
            assert!(p[0] >= lo && p[0] <= hi, "candidate {p:?} out of bounds");
            candidate = opt.advance(Some(f(&p)));
            guard += 1;
            assert!(guard < 10_000);
        }
        opt
    }

    #[test]
    fn switch_examples() {
        let (_d, b) = blobs();
        let mut s = Switch::from_instance(&instance(SWITCH, json!({"condition": "< 10"}))).unwrap();
        let out = s.fire(&mut ctx(&b, 1), &BTreeMap::from([("value".into(), Datum::Float(3.0))])).unwrap();
        assert_eq!(out, Emission::from([("true".into(), vec![Datum::Float(3.0)])]));
        let out = s.fire(&mut ctx(&b, 2), &BTreeMap::from([("value".into(), Datum::Float(10.0))])).unwrap();
        assert_eq!(out, Emission::from([("false".into(), vec![Datum::Float(10.0)])]));
        let err = s.fire(&mut ctx(&b, 3), &BTreeMap::from([("value".into(), Datum::Text("a".into()))])).unwrap_err();
        assert_eq!(err.code, "TYPE_MISMATCH");
    }

    #[test]
    fn condition_parsing() {
        assert_eq!(parse_condition("<= 2.5").unwrap(), (CmpOp::Le, json!(2.5)));
        assert_eq!(parse_condition("≠ \"x\"").unwrap(), (CmpOp::Ne, json!("x")));
        assert_eq!(parse_condition(">3").unwrap(), (CmpOp::Gt, json!(3)));
        assert!(parse_condition("<").is_err());
        assert!(parse_condition("< [1]").is_err());
    }

    #[test]
    fn converger_examples() {
        let mut c = Converger::new(1e-9, 100).unwrap();
        assert_eq!(c.step(1.0), vec![("loop", Datum::Float(1.0))]);
        assert_eq!(c.step(1.0), vec![("converged", Datum::Float(1.0)), ("done", Datum::Boolean(true))]);

        let mut capped = Converger::new(1e-9, 3).unwrap();
        assert_eq!(capped.step(1.0).len(), 1);
        assert_eq!(capped.step(2.0).len(), 1);
        assert_eq!(capped.step(3.0), vec![("converged", Datum::Float(3.0)), ("done", Datum::Boolean(false))]);

        assert!(Converger::new(0.0, 3).is_err());
        assert!(Converger::new(1.0, 0).is_err());
    }

    #[test]
    fn converger_babylonian() {
        let mut c = Converger::new(1e-6, 100).unwrap();
        let mut x = 1.0f64;
        let result = loop {
            let out = c.step(x);
            if let Some((_, Datum::Float(v))) = out.iter().find(|(n, _)| *n == "converged") {
                break *v;
            }
            x = (x + 2.0 / x) / 2.0;
        };
        // bisection as an independent route to sqrt(2)
        let (mut lo, mut hi) = (1.0f64, 2.0f64);
        for _ in 0..200 {
            let mid = (lo + hi) / 2.0;
            if mid * mid < 2.0 {
                lo = mid
            } else {
                hi = mid
            }
        }
        assert!((result - lo).abs() <= 1e-6);
    }

    #[test]
    fn grid_finds_three() {
        let cfg = json!({"strategy":"grid","variables":[{"name":"x","lower":0,"upper":10,"initial_step":1}],"tol":1e-3,"max_evals":100});
        let opt = run_optimizer(cfg, |p| (p[0] - 3.0).powi(2));
        // brute force over the 11 grid points
        let oracle = (0..=10).map(|k| k as f64).min_by(|a, b| ((a - 3.0).powi(2)).total_cmp(&(b - 3.0).powi(2))).unwrap();
        assert_eq!(opt.best().unwrap(), (&[oracle][..], 0.0));
        assert_eq!(opt.evaluations(), 11);
    }

    #[test]
    fn coordinate_descent_converges() {
        let cfg = json!({"strategy":"coordinate_descent","variables":[{"name":"x","lower":0,"upper":10,"initial_step":1}],
            "tol":1e-3,"max_evals":200});
        let opt = run_optimizer(cfg, |p| (p[0] - 3.0).powi(2));
        let (p, f) = opt.best().unwrap();
        assert!((p[0] - 3.0).abs() <= 1e-3);
        assert!(f <= 1e-6);
        assert!(opt.evaluations() <= 200);
    }

    #[test]
    fn constant_objective_keeps_initial_point() {
        let cfg = json!({"strategy":"coordinate_descent","variables":[{"name":"x","lower":0,"upper":10,"initial_step":1}],
            "tol":1e-3,"max_evals":200});
        let opt = run_optimizer(cfg, |_| 5.0);
        assert_eq!(opt.best().unwrap(), (&[0.0][..], 5.0));
    }

    #[test]
    fn two_variable_descent_stays_in_bounds() {
        let cfg = json!({"strategy":"coordinate_descent","variables":[
            {"name":"a","lower":-1,"upper":1,"initial_step":0.5},
            {"name":"b","lower":0,"upper":4,"initial_step":1,"initial":2}],"tol":1e-4,"max_evals":500});
        let opt = run_optimizer(cfg, |p| (p[0] - 2.0).powi(2) + (p[1] - 0.5).powi(2));
        let (p, _) = opt.best().unwrap();
        assert!((p[0] - 1.0).abs() < 1e-3);
        assert!((p[1] - 0.5).abs() < 1e-3);
    }

    #[test]
    fn optimizer_config_errors() {
        let bad = |v: Value| Optimizer::new(serde_json::from_value(v).unwrap()).unwrap_err().code;
        assert_eq!(
            bad(json!({"strategy":"grid","variables":[{"name":"x","lower":1,"upper":1,"initial_step":1}],"tol":1,"max_evals":1})),
            "BAD_BOUNDS"
        );
        assert_eq!(
            bad(json!({"strategy":"grid","variables":[{"name":"x","lower":0,"upper":1,"initial_step":1}],"tol":0,"max_evals":1})),
            "TOL_NONPOSITIVE"
        );
    }

    #[test]
    fn input_provider_values_and_missing_file() {
        let (d, b) = blobs();
        let mut p = InputProvider::from_instance(&instance(INPUT_PROVIDER, json!({"values": {"x": 2.5}}))).unwrap();
        assert_eq!(p.interface().outputs, vec![Endpoint::output("x", DatumType::Float)]);
        p.prepare(&b).unwrap();
        assert_eq!(p.fire(&mut ctx(&b, 1), &BTreeMap::new()).unwrap()["x"], vec![Datum::Float(2.5)]);

        let path = d.path().join("a.dat");
        fs::write(&path, b"abc").unwrap();
        let mut f = InputProvider::from_instance(&instance(INPUT_PROVIDER, json!({"files": {"f": path}}))).unwrap();
        f.prepare(&b).unwrap();
        let out = f.fire(&mut ctx(&b, 1), &BTreeMap::new()).unwrap();
        assert_eq!(out["f"][0].file_ref().unwrap().digest, crate::store::sha256_hex(b"abc"));

        let mut missing = InputProvider::from_instance(&instance(INPUT_PROVIDER, json!({"files": {"f": d.path().join("nope")}}))).unwrap();
        assert_eq!(missing.prepare(&b).unwrap_err().code, "FILE_NOT_FOUND");
    }

    #[test]
    fn output_writer_never_overwrites() {
        let (d, b) = blobs();
        let target = d.path().join("out");
        let mut inst = instance(OUTPUT_WRITER, json!({"target": target}));
        inst.inputs = serde_json::from_value(json!([{"name":"v","type":"Integer"},{"name":"f","type":"FileRef"}])).unwrap();
        let mut w = OutputWriter::from_instance(&inst).unwrap();
        let blob = b.put(b"payload").unwrap();
        let file = Datum::FileRef(FileRef { digest: blob.digest, size: blob.size, filename: "r.txt".into() });
        for idx in 1..=2 {
            let inputs = BTreeMap::from([("v".into(), Datum::Integer(7)), ("f".into(), file.clone())]);
            w.fire(&mut ctx(&b, idx), &inputs).unwrap();
        }
        assert!(target.join("w-f-1-r.txt").is_file());
        assert!(target.join("w-f-2-r.txt").is_file());
        let log = fs::read_to_string(target.join("values.log")).unwrap();
        let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert_eq!(first, json!({"instance":"w","endpoint":"v","index":1,"value":7}));

        let inputs = BTreeMap::from([("v".into(), Datum::Integer(7)), ("f".into(), file)]);
        assert_eq!(w.fire(&mut ctx(&b, 1), &inputs).unwrap_err().code, "IO");
    }

    #[test]
    fn builtins_validate_through_catalog() {
        let mut cat = Catalog::new();
        register_builtins(&mut cat);
        let text = r#"{"name":"loop","components":[
            {"id":"opt","component":"std.optimizer@1","config":{"strategy":"grid",
              "variables":[{"name":"x","lower":0,"upper":10,"initial_step":1}],"tol":0.001,"max_evals":50}},
            {"id":"f","component":"std.script@1","config":{"command":"true"},
              "inputs":[{"name":"x","type":"Float"}],"outputs":[{"name":"y","type":"Float"}]}],
            "connections":[{"from":"opt.x","to":"f.x"},{"from":"f.y","to":"opt.objective"}]}"#;
        assert!(validate_graph(&parse_workflow(text).unwrap(), &cat).is_empty());

        let bad = text.replace("\"upper\":10", "\"upper\":0");
        let diags = validate_graph(&parse_workflow(&bad).unwrap(), &cat);
        assert_eq!(diags.len(), 1);
        assert!(diags[0].message.contains("BAD_BOUNDS"), "{}", diags[0]);
    }
}
