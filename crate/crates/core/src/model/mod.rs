//! Workflow graph: component instances, typed endpoints and connections.
//!
//! Workflows are authored as JSON documents:
//!
//! ```json
//! {
//!   "name": "evaluation",
//!   "components": [
//!     { "id": "sim", "component": "scenario-simulation@1.0",
//!       "config": { "seeds": { "scenario": 0.78 } } },
//!     { "id": "perf", "component": "performance-evaluation@1.0", "placement": "auto" }
//!   ],
//!   "connections": [ { "from": "sim.trajectory", "to": "perf.trajectory" } ],
//!   "labels": [ { "text": "evaluations", "members": ["perf"] } ]
//! }
//! ```

mod placement;
mod validate;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::datum::DatumType;

pub use placement::{plan_placement, PlacementError, PlacementPlan};
pub use validate::{validate_graph, Diagnostic, DiagnosticCode, Severity};

/// Config key under which input seed values are declared.
pub const SEEDS_KEY: &str = "seeds";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Input,
    Output,
}

/// How an input consumes data: one datum per firing, or the latest value retained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Handling {
    #[default]
    Queued,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Endpoint {
    pub name: String,
    pub direction: Direction,
    pub datum_type: DatumType,
    /// Always `Some` for inputs and `None` for outputs.
    pub handling: Option<Handling>,
}

impl Endpoint {
    pub fn input(name: impl Into<String>, datum_type: DatumType, handling: Handling) -> Self {
        Endpoint { name: name.into(), direction: Direction::Input, datum_type, handling: Some(handling) }
    }

    pub fn output(name: impl Into<String>, datum_type: DatumType) -> Self {
        Endpoint { name: name.into(), direction: Direction::Output, datum_type, handling: None }
    }

    pub fn is_constant(&self) -> bool {
        self.handling == Some(Handling::Constant)
    }
}

/// JSON shape of an endpoint declaration; the direction is implied by the list it sits in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointDecl {
    pub name: String,
    #[serde(rename = "type")]
    pub datum_type: DatumType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub handling: Option<Handling>,
}

impl EndpointDecl {
    pub fn from_endpoint(e: &Endpoint) -> Self {
        EndpointDecl { name: e.name.clone(), datum_type: e.datum_type, handling: e.handling }
    }
}

/// Converts declarations into endpoints, enforcing per-direction name uniqueness
/// and the rule that outputs carry no handling.
pub fn endpoints_from_decls(decls: &[EndpointDecl], direction: Direction) -> Result<Vec<Endpoint>, EndpointError> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(decls.len());
    for d in decls {
        if !is_identifier(&d.name) {
            return Err(EndpointError::InvalidName(d.name.clone()));
        }
        if !seen.insert(d.name.as_str()) {
            return Err(EndpointError::Duplicate(d.name.clone()));
        }
        let endpoint = match direction {
            Direction::Input => Endpoint::input(&d.name, d.datum_type, d.handling.unwrap_or_default()),
            Direction::Output => {
                if d.handling.is_some() {
                    return Err(EndpointError::OutputHandling(d.name.clone()));
                }
                Endpoint::output(&d.name, d.datum_type)
            }
        };
        out.push(endpoint);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EndpointError {
    #[error("duplicate endpoint `{0}`")]
    Duplicate(String),
    #[error("invalid endpoint name `{0}`")]
    InvalidName(String),
    #[error("output `{0}` must not declare a handling")]
    OutputHandling(String),
}

/// Identifiers: ASCII letters, digits, `_` and `-`, not starting with `-`.
pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphanumeric() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Input and output endpoints of a component.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ComponentInterface {
    pub inputs: Vec<Endpoint>,
    pub outputs: Vec<Endpoint>,
}

impl ComponentInterface {
    pub fn input(&self, name: &str) -> Option<&Endpoint> {
        self.inputs.iter().find(|e| e.name == name)
    }

    pub fn output(&self, name: &str) -> Option<&Endpoint> {
        self.outputs.iter().find(|e| e.name == name)
    }
}

/// `(name, version)`, written `name@version`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ComponentRef {
    pub name: String,
    pub version: String,
}

impl ComponentRef {
    pub fn new(name: impl Into<String>, version: impl Into<String>) -> Self {
        ComponentRef { name: name.into(), version: version.into() }
    }
}

impl fmt::Display for ComponentRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.name, self.version)
    }
}

impl FromStr for ComponentRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.rsplit_once('@') {
            Some((name, version)) if !name.is_empty() && !version.is_empty() && !name.contains(char::is_whitespace) => {
                Ok(ComponentRef::new(name, version))
            }
            _ => Err(format!("invalid component reference `{s}` (expected name@version)")),
        }
    }
}

impl Serialize for ComponentRef {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ComponentRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Where an instance should run.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub enum Placement {
    #[default]
    Auto,
    Node(String),
}

impl Serialize for Placement {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Placement::Auto => s.serialize_str("auto"),
            Placement::Node(n) => s.serialize_str(n),
        }
    }
}

impl<'de> Deserialize<'de> for Placement {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(match s.as_str() {
            "auto" | "" => Placement::Auto,
            _ => Placement::Node(s),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentInstance {
    pub id: String,
    pub component: ComponentRef,
    pub config: BTreeMap<String, Value>,
    pub placement: Placement,
    /// Instance-level endpoint declarations, used by components whose
    /// endpoints are configured per instance.
    pub inputs: Vec<EndpointDecl>,
    pub outputs: Vec<EndpointDecl>,
}

impl ComponentInstance {
    pub fn new(id: impl Into<String>, component: ComponentRef) -> Self {
        ComponentInstance {
            id: id.into(),
            component,
            config: BTreeMap::new(),
            placement: Placement::Auto,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Seed values declared for inputs, as raw JSON.
    pub fn seeds(&self) -> Option<&serde_json::Map<String, Value>> {
        self.config.get(SEEDS_KEY).and_then(Value::as_object)
    }
}

/// `instance.endpoint`
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PortRef {
    pub instance: String,
    pub endpoint: String,
}

impl PortRef {
    pub fn new(instance: impl Into<String>, endpoint: impl Into<String>) -> Self {
        PortRef { instance: instance.into(), endpoint: endpoint.into() }
    }
}

impl fmt::Display for PortRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.instance, self.endpoint)
    }
}

impl FromStr for PortRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once('.') {
            Some((i, e)) if is_identifier(i) && is_identifier(e) => Ok(PortRef::new(i, e)),
            _ => Err(format!("invalid endpoint reference `{s}` (expected instance.endpoint)")),
        }
    }
}

impl Serialize for PortRef {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PortRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Connection {
    pub from: PortRef,
    pub to: PortRef,
}

impl Connection {
    pub fn new(from: PortRef, to: PortRef) -> Self {
        Connection { from, to }
    }
}

/// Inert annotation grouping instances; never consulted by execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Label {
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub members: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WorkflowGraph {
    pub name: String,
    pub components: Vec<ComponentInstance>,
    pub connections: Vec<Connection>,
    pub labels: Vec<Label>,
}

impl WorkflowGraph {
    pub fn instance(&self, id: &str) -> Option<&ComponentInstance> {
        self.components.iter().find(|c| c.id == id)
    }

    pub fn incoming<'a>(&'a self, port: &'a PortRef) -> impl Iterator<Item = &'a Connection> + 'a {
        self.connections.iter().filter(move |c| &c.to == port)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("unknown field `{field}` at line {line}, column {column}")]
    UnknownField { field: String, line: usize, column: usize },
    #[error("duplicate instance id `{0}`")]
    DuplicateInstance(String),
    #[error("invalid instance id `{0}`")]
    InvalidInstanceId(String),
}

impl ModelError {
    pub fn code(&self) -> &'static str {
        match self {
            ModelError::Syntax { .. } => "SYNTAX",
            ModelError::UnknownField { .. } => "UNKNOWN_FIELD",
            ModelError::DuplicateInstance(_) => "DUPLICATE_INSTANCE",
            ModelError::InvalidInstanceId(_) => "INVALID_INSTANCE_ID",
        }
    }
}

impl From<serde_json::Error> for ModelError {
    fn from(e: serde_json::Error) -> Self {
        let (line, column) = (e.line(), e.column());
        let message = e.to_string();
        if let Some(rest) = message.strip_prefix("unknown field `") {
            if let Some((field, _)) = rest.split_once('`') {
                return ModelError::UnknownField { field: field.to_owned(), line, column };
            }
        }
        // serde_json appends " at line X column Y"; positions are kept separately.
        let message = match message.rfind(" at line ") {
            Some(idx) => message[..idx].to_owned(),
            None => message,
        };
        ModelError::Syntax { line, column, message }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDoc {
    name: String,
    #[serde(default)]
    components: Vec<InstanceDoc>,
    #[serde(default)]
    connections: Vec<Connection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    labels: Vec<Label>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceDoc {
    id: String,
    component: ComponentRef,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    config: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "is_auto")]
    placement: Placement,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    inputs: Vec<EndpointDecl>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    outputs: Vec<EndpointDecl>,
}

fn is_auto(p: &Placement) -> bool {
    *p == Placement::Auto
}

/// Parses a workflow document, preserving declaration order.
pub fn parse_workflow(text: &str) -> Result<WorkflowGraph, ModelError> {
    let doc: GraphDoc = serde_json::from_str(text)?;
    let mut seen = HashSet::new();
    let mut components = Vec::with_capacity(doc.components.len());
    for c in doc.components {
        if !is_identifier(&c.id) {
            return Err(ModelError::InvalidInstanceId(c.id));
        }
        if !seen.insert(c.id.clone()) {
            return Err(ModelError::DuplicateInstance(c.id));
        }
        components.push(ComponentInstance {
            id: c.id,
            component: c.component,
            config: c.config,
            placement: c.placement,
            inputs: c.inputs,
            outputs: c.outputs,
        });
    }
    Ok(WorkflowGraph { name: doc.name, components, connections: doc.connections, labels: doc.labels })
}

/// Serializes a graph into the workflow document format.
pub fn serialize_workflow(graph: &WorkflowGraph) -> String {
    let doc = GraphDoc {
        name: graph.name.clone(),
        components: graph
            .components
            .iter()
            .map(|c| InstanceDoc {
                id: c.id.clone(),
                component: c.component.clone(),
                config: c.config.clone(),
                placement: c.placement.clone(),
                inputs: c.inputs.clone(),
                outputs: c.outputs.clone(),
            })
            .collect(),
        connections: graph.connections.clone(),
        labels: graph.labels.clone(),
    };
    serde_json::to_string_pretty(&doc).expect("workflow documents always serialize")
}

/// Resolves the endpoints of instances whose interface depends on their config.
pub type InterfaceResolver = fn(&ComponentInstance) -> Result<ComponentInterface, String>;

#[derive(Debug, Clone)]
pub enum CatalogEntry {
    Fixed(ComponentInterface),
    Dynamic(InterfaceResolver),
}

/// The components available to a workflow, keyed by reference.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    entries: BTreeMap<ComponentRef, CatalogEntry>,
}

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, component: ComponentRef, interface: ComponentInterface) {
        self.entries.insert(component, CatalogEntry::Fixed(interface));
    }

    pub fn insert_dynamic(&mut self, component: ComponentRef, resolver: InterfaceResolver) {
        self.entries.insert(component, CatalogEntry::Dynamic(resolver));
    }

    pub fn contains(&self, component: &ComponentRef) -> bool {
        self.entries.contains_key(component)
    }

    pub fn refs(&self) -> impl Iterator<Item = &ComponentRef> {
        self.entries.keys()
    }

    /// Effective interface of an instance; `None` when the component is unknown.
    pub fn interface_for(&self, instance: &ComponentInstance) -> Option<Result<ComponentInterface, String>> {
        let entry = self.entries.get(&instance.component)?;
        Some(match entry {
            CatalogEntry::Fixed(iface) => {
                if instance.inputs.is_empty() && instance.outputs.is_empty() {
                    Ok(iface.clone())
                } else {
                    Err(format!("endpoints of {} are fixed by its descriptor", instance.component))
                }
            }
            CatalogEntry::Dynamic(resolve) => resolve(instance),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO: &str = r#"{
        "name": "w",
        "components": [
            {"id": "a", "component": "gen@1"},
            {"id": "b", "component": "sink@2", "placement": "node-x"}
        ],
        "connections": [{"from": "a.out", "to": "b.in"}],
        "labels": [{"text": "group", "members": ["a", "b"]}]
    }"#;

    #[test]
    fn parses_in_declaration_order() {
        let g = parse_workflow(TWO).unwrap();
        assert_eq!(g.name, "w");
        assert_eq!(g.components.iter().map(|c| c.id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(g.components[1].placement, Placement::Node("node-x".into()));
        assert_eq!(g.connections[0].from, PortRef::new("a", "out"));
        assert_eq!(g.labels.len(), 1);
    }

    #[test]
    fn empty_document() {
        let g = parse_workflow(r#"{"name": "empty", "components": []}"#).unwrap();
        assert!(g.components.is_empty());
        assert!(g.connections.is_empty());
        assert!(g.labels.is_empty());
    }

    #[test]
    fn duplicate_instance_is_named() {
        let text = r#"{"name":"d","components":[{"id":"sim","component":"s@1"},{"id":"sim","component":"t@1"}]}"#;
        assert_eq!(parse_workflow(text).unwrap_err(), ModelError::DuplicateInstance("sim".into()));
    }

    #[test]
    fn unknown_field_reports_position() {
        let text = "{\"name\":\"d\",\n \"colour\": 1}";
        match parse_workflow(text).unwrap_err() {
            ModelError::UnknownField { field, line, .. } => {
                assert_eq!(field, "colour");
                assert_eq!(line, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn syntax_error_has_line() {
        match parse_workflow("{\"name\": \"x\",\n\n \"components\": [ }").unwrap_err() {
            ModelError::Syntax { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_port_ref_is_syntax_error() {
        let text = r#"{"name":"d","connections":[{"from":"nodot","to":"b.in"}]}"#;
        assert!(matches!(parse_workflow(text), Err(ModelError::Syntax { .. })));
    }

    #[test]
    fn component_ref_splits_on_last_at() {
        let r: ComponentRef = "A::tool@1.2".parse().unwrap();
        assert_eq!(r, ComponentRef::new("A::tool", "1.2"));
        assert!("noversion".parse::<ComponentRef>().is_err());
        assert!("x@".parse::<ComponentRef>().is_err());
    }

    #[test]
    fn endpoint_decls_checked() {
        let d = |n: &str| EndpointDecl { name: n.into(), datum_type: DatumType::Float, handling: None };
        assert_eq!(
            endpoints_from_decls(&[d("x"), d("x")], Direction::Input),
            Err(EndpointError::Duplicate("x".into()))
        );
        let mut h = d("y");
        h.handling = Some(Handling::Constant);
        assert_eq!(endpoints_from_decls(&[h], Direction::Output), Err(EndpointError::OutputHandling("y".into())));
        let ins = endpoints_from_decls(&[d("x")], Direction::Input).unwrap();
        assert_eq!(ins[0].handling, Some(Handling::Queued));
    }

    #[test]
    fn serialize_roundtrip() {
        let g = parse_workflow(TWO).unwrap();
        assert_eq!(parse_workflow(&serialize_workflow(&g)).unwrap(), g);
    }
}
