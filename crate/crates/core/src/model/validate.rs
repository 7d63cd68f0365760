use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Catalog, ComponentInterface, PortRef, WorkflowGraph};
use crate::datum::Datum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DiagnosticCode {
    UnknownComponent,
    InvalidConfig,
    UnknownInstance,
    UnknownEndpoint,
    TypeMismatch,
    MultipleIncoming,
    UnconnectedInput,
    BadSeed,
}

impl DiagnosticCode {
    pub fn as_str(self) -> &'static str {
        match self {
            DiagnosticCode::UnknownComponent => "UNKNOWN_COMPONENT",
            DiagnosticCode::InvalidConfig => "INVALID_CONFIG",
            DiagnosticCode::UnknownInstance => "UNKNOWN_INSTANCE",
            DiagnosticCode::UnknownEndpoint => "UNKNOWN_ENDPOINT",
            DiagnosticCode::TypeMismatch => "TYPE_MISMATCH",
            DiagnosticCode::MultipleIncoming => "MULTIPLE_INCOMING",
            DiagnosticCode::UnconnectedInput => "UNCONNECTED_INPUT",
            DiagnosticCode::BadSeed => "BAD_SEED",
        }
    }
}

impl fmt::Display for DiagnosticCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub code: DiagnosticCode,
    pub location: String,
    pub message: String,
}

impl Diagnostic {
    fn error(code: DiagnosticCode, location: impl Into<String>, message: impl Into<String>) -> Self {
        Diagnostic { severity: Severity::Error, code, location: location.into(), message: message.into() }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{sev}[{}] {}: {}", self.code, self.location, self.message)
    }
}

/// Checks that a graph is executable against the given catalog.
///
/// The result is empty iff every component resolves, every connection is
/// type-compatible, no input has two incoming connections and every input is
/// either connected or seeded.
pub fn validate_graph(graph: &WorkflowGraph, catalog: &Catalog) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut interfaces: HashMap<&str, ComponentInterface> = HashMap::new();

    for (idx, inst) in graph.components.iter().enumerate() {
        let loc = format!("components[{idx}] ({})", inst.id);
        match catalog.interface_for(inst) {
            None => out.push(Diagnostic::error(
                DiagnosticCode::UnknownComponent,
                loc,
                format!("component {} is not available", inst.component),
            )),
            Some(Err(msg)) => out.push(Diagnostic::error(DiagnosticCode::InvalidConfig, loc, msg)),
            Some(Ok(iface)) => {
                if let Some(seeds) = inst.seeds() {
                    for (name, value) in seeds {
                        match iface.input(name) {
                            None => out.push(Diagnostic::error(
                                DiagnosticCode::BadSeed,
                                loc.clone(),
                                format!("seed `{name}` does not name an input"),
                            )),
                            Some(ep) => {
                                if Datum::from_scalar_json(value, ep.datum_type).is_none() {
                                    out.push(Diagnostic::error(
                                        DiagnosticCode::BadSeed,
                                        loc.clone(),
                                        format!("seed `{name}` is not a {} value", ep.datum_type),
                                    ));
                                }
                            }
                        }
                    }
                }
                interfaces.insert(inst.id.as_str(), iface);
            }
        }
    }

    let mut incoming: BTreeMap<&PortRef, usize> = BTreeMap::new();
    for (idx, conn) in graph.connections.iter().enumerate() {
        let loc = format!("connections[{idx}] ({} -> {})", conn.from, conn.to);
        *incoming.entry(&conn.to).or_default() += 1;

        let mut resolve = |port: &PortRef, output: bool| -> Option<crate::datum::DatumType> {
            if graph.instance(&port.instance).is_none() {
                out.push(Diagnostic::error(
                    DiagnosticCode::UnknownInstance,
                    loc.clone(),
                    format!("no instance `{}`", port.instance),
                ));
                return None;
            }
            let iface = interfaces.get(port.instance.as_str())?;
            let ep = if output { iface.output(&port.endpoint) } else { iface.input(&port.endpoint) };
            match ep {
                Some(ep) => Some(ep.datum_type),
                None => {
                    let kind = if output { "output" } else { "input" };
                    out.push(Diagnostic::error(
                        DiagnosticCode::UnknownEndpoint,
                        loc.clone(),
                        format!("`{}` has no {kind} `{}`", port.instance, port.endpoint),
                    ));
                    None
                }
            }
        };
        let from_ty = resolve(&conn.from, true);
        let to_ty = resolve(&conn.to, false);
        if let (Some(from), Some(to)) = (from_ty, to_ty) {
            if !to.accepts(from) {
                out.push(Diagnostic::error(
                    DiagnosticCode::TypeMismatch,
                    loc.clone(),
                    format!("{from} output cannot feed {to} input"),
                ));
            }
        }
    }

    for (port, count) in &incoming {
        if *count > 1 {
            out.push(Diagnostic::error(
                DiagnosticCode::MultipleIncoming,
                port.to_string(),
                format!("input has {count} incoming connections"),
            ));
        }
    }

    for inst in &graph.components {
        let Some(iface) = interfaces.get(inst.id.as_str()) else { continue };
        let seeds = inst.seeds();
        for input in &iface.inputs {
            let port = PortRef::new(&inst.id, &input.name);
            let seeded = seeds.is_some_and(|s| s.contains_key(&input.name));
            if !seeded && !incoming.contains_key(&port) {
                out.push(Diagnostic::error(
                    DiagnosticCode::UnconnectedInput,
                    port.to_string(),
                    "input is neither connected nor seeded by config",
                ));
            }
        }
    }

    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datum::DatumType;
    use crate::model::{parse_workflow, ComponentRef, Endpoint, Handling};

    fn catalog() -> Catalog {
        let mut c = Catalog::new();
        c.insert(
            ComponentRef::new("float-src", "1"),
            ComponentInterface { inputs: vec![], outputs: vec![Endpoint::output("y", DatumType::Float)] },
        );
        c.insert(
            ComponentRef::new("int-src", "1"),
            ComponentInterface { inputs: vec![], outputs: vec![Endpoint::output("y", DatumType::Integer)] },
        );
        c.insert(
            ComponentRef::new("int-sink", "1"),
            ComponentInterface {
                inputs: vec![Endpoint::input("x", DatumType::Integer, Handling::Queued)],
                outputs: vec![],
            },
        );
        c.insert(
            ComponentRef::new("float-sink", "1"),
            ComponentInterface {
                inputs: vec![Endpoint::input("x", DatumType::Float, Handling::Queued)],
                outputs: vec![],
            },
        );
        c
    }

    fn codes(text: &str) -> Vec<DiagnosticCode> {
        validate_graph(&parse_workflow(text).unwrap(), &catalog()).into_iter().map(|d| d.code).collect()
    }

    #[test]
    fn float_into_integer_is_mismatch() {
        let text = r#"{"name":"t","components":[{"id":"a","component":"float-src@1"},{"id":"b","component":"int-sink@1"}],
            "connections":[{"from":"a.y","to":"b.x"}]}"#;
        assert_eq!(codes(text), vec![DiagnosticCode::TypeMismatch]);
    }

    #[test]
    fn integer_into_float_is_fine() {
        let text = r#"{"name":"t","components":[{"id":"a","component":"int-src@1"},{"id":"b","component":"float-sink@1"}],
            "connections":[{"from":"a.y","to":"b.x"}]}"#;
        assert!(codes(text).is_empty());
    }

    #[test]
    fn missing_component() {
        let text = r#"{"name":"t","components":[{"id":"a","component":"missing-tool@1.0"}]}"#;
        assert_eq!(codes(text), vec![DiagnosticCode::UnknownComponent]);
    }

    #[test]
    fn unconnected_and_seeded_inputs() {
        let text = r#"{"name":"t","components":[{"id":"b","component":"float-sink@1"}]}"#;
        assert_eq!(codes(text), vec![DiagnosticCode::UnconnectedInput]);
        let seeded = r#"{"name":"t","components":[{"id":"b","component":"float-sink@1","config":{"seeds":{"x":1}}}]}"#;
        assert!(codes(seeded).is_empty());
        let bad = r#"{"name":"t","components":[{"id":"b","component":"float-sink@1","config":{"seeds":{"x":"one"}}}]}"#;
        assert_eq!(codes(bad), vec![DiagnosticCode::BadSeed]);
    }

    #[test]
    fn two_incoming_connections() {
        let text = r#"{"name":"t","components":[
            {"id":"a","component":"float-src@1"},{"id":"c","component":"float-src@1"},{"id":"b","component":"float-sink@1"}],
            "connections":[{"from":"a.y","to":"b.x"},{"from":"c.y","to":"b.x"}]}"#;
        assert_eq!(codes(text), vec![DiagnosticCode::MultipleIncoming]);
    }

    #[test]
    fn unknown_instance_and_endpoint() {
        let text = r#"{"name":"t","components":[{"id":"a","component":"float-src@1"},{"id":"b","component":"float-sink@1"}],
            "connections":[{"from":"a.nope","to":"b.x"},{"from":"ghost.y","to":"b.x"}]}"#;
        let c = codes(text);
        assert!(c.contains(&DiagnosticCode::UnknownEndpoint));
        assert!(c.contains(&DiagnosticCode::UnknownInstance));
    }

    #[test]
    fn validation_is_pure() {
        let text = r#"{"name":"t","components":[{"id":"a","component":"float-src@1"},{"id":"b","component":"int-sink@1"}],
            "connections":[{"from":"a.y","to":"b.x"}]}"#;
        let g = parse_workflow(text).unwrap();
        let cat = catalog();
        assert_eq!(validate_graph(&g, &cat), validate_graph(&g, &cat));
    }
}
