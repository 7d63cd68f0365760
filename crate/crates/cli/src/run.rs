//! `run` and `validate`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::mpsc::Receiver;

use serde_json::json;
use toolweave_core::components::register_builtins;
use toolweave_core::model::{parse_workflow, validate_graph, Catalog, Diagnostic};
use toolweave_core::store::{RunEvent, RunState};
use toolweave_net::node::{finished_state, SubmitError};

use crate::config::{connect_peers, ephemeral_id, ConfigDir};
use crate::{print_json, CliError, CliResult, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};

pub const LOCAL: &str = "local";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// `local` or a controller address.
    pub controller: String,
    pub place: Vec<(String, String)>,
    pub watch: bool,
    /// Return as soon as the controller accepts the run.
    pub detach: bool,
    pub json: bool,
}

pub fn parse_placement(arg: &str) -> Result<(String, String), String> {
    match arg.split_once('=') {
        Some((i, n)) if !i.is_empty() && !n.is_empty() => Ok((i.to_owned(), n.to_owned())),
        _ => Err(format!("expected <instance>=<node-id>, got `{arg}`")),
    }
}

fn read_workflow(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn is_user_error(code: &str) -> bool {
    matches!(
        code,
        "SYNTAX"
            | "UNKNOWN_FIELD"
            | "DUPLICATE_INSTANCE"
            | "INVALID_INSTANCE_ID"
            | "INVALID_WORKFLOW"
            | "OVERRIDE_INVALID"
            | "NO_PROVIDER"
            | "UNKNOWN_INSTANCE"
    )
}

fn print_diagnostics(diags: &[Diagnostic]) {
    for d in diags {
        eprintln!("{d}");
    }
}

fn rejected(e: SubmitError, json: bool) -> CliError {
    if json {
        print_json(&json!({"error": e.code, "message": e.message, "diagnostics": e.diagnostics}));
    }
    print_diagnostics(&e.diagnostics);
    let message = format!("run rejected: {}: {}", e.code, e.message);
    if is_user_error(&e.code) {
        CliError::usage(message)
    } else if matches!(e.code.as_str(), "TRANSPORT" | "NODE_UNREACHABLE" | "TIMEOUT" | "CLOSED" | "IO") {
        CliError::environment(message)
    } else {
        CliError::failure(message)
    }
}

pub fn run(dir: &ConfigDir, workflow: &Path, opts: &RunOptions) -> CliResult<u8> {
    let text = read_workflow(workflow)?;
    let overrides: BTreeMap<String, String> = opts.place.iter().cloned().collect();
    let cfg = dir.load()?;
    let (node, run_id, events) = if opts.controller == LOCAL {
        let node = dir.open_node(None)?;
        connect_peers(&node, &cfg);
        let handle = node.submit(&text, &overrides).map_err(|e| rejected(e, opts.json))?;
        let events = handle.subscribe();
        (node, handle.run_id().to_owned(), Some(events))
    } else {
        let node = dir.open_node(Some(ephemeral_id()))?;
        let peer = node
            .connect_tcp(opts.controller.as_str())
            .map_err(|e| CliError::environment(format!("controller {}: {e}", opts.controller)))?;
        let run = node.submit_remote(&peer.node_id, &text, &overrides, !opts.detach).map_err(|e| rejected(e, opts.json))?;
        (node, run.run_id, run.events)
    };
    let code = follow(&run_id, events, opts);
    node.shutdown();
    code
}

/// Prints run events and maps the final state to an exit code.
fn follow(run_id: &str, events: Option<Receiver<RunEvent>>, opts: &RunOptions) -> CliResult<u8> {
    if !opts.json {
        println!("run {run_id} submitted");
    }
    let Some(events) = events.filter(|_| !opts.detach) else {
        if opts.json {
            print_json(&json!({"run_id": run_id, "state": "SUBMITTED"}));
        }
        return Ok(EXIT_OK);
    };
    let mut last = None;
    for e in events.iter() {
        if opts.watch {
            println!("{}", serde_json::to_string(&e).expect("event serializes"));
        }
        last = Some(e);
    }
    let Some((state, detail)) = last.as_ref().and_then(|e| Some((finished_state(e)?, e.detail.clone()))) else {
        return Err(CliError::environment(format!("run {run_id}: lost contact with the controller before the run finished")));
    };
    let diagnostic = detail.and_then(|d| d.split_once(": ").map(|(_, rest)| rest.to_owned()));
    if opts.json {
        print_json(&json!({"run_id": run_id, "state": state, "diagnostic": diagnostic}));
    } else {
        println!("run {run_id} {state}");
    }
    match state {
        RunState::Completed => Ok(EXIT_OK),
        RunState::Stalled => {
            eprintln!("run stalled: {}", diagnostic.as_deref().unwrap_or("no component can fire"));
            Ok(EXIT_FAILURE)
        }
        RunState::Failed => {
            eprintln!("run failed: {}", diagnostic.as_deref().unwrap_or("a component failed"));
            Ok(EXIT_FAILURE)
        }
        other => {
            eprintln!("run ended {other}");
            Ok(EXIT_FAILURE)
        }
    }
}

/// Validates a workflow against the local tools and built-in components.
pub fn validate(dir: &ConfigDir, workflow: &Path, json: bool) -> CliResult<u8> {
    let text = read_workflow(workflow)?;
    let graph = parse_workflow(&text).map_err(|e| CliError::usage(format!("{}: {}: {e}", workflow.display(), e.code())))?;
    let mut catalog = Catalog::new();
    register_builtins(&mut catalog);
    for (_, d) in dir.tools()? {
        catalog.insert(d.component_ref(), d.interface());
    }
    let diags = validate_graph(&graph, &catalog);
    if json {
        print_json(&diags);
    } else if diags.is_empty() {
        println!("{}: ok ({} instances, {} connections)", workflow.display(), graph.components.len(), graph.connections.len());
    } else {
        print_diagnostics(&diags);
    }
    Ok(if diags.is_empty() { EXIT_OK } else { EXIT_USAGE })
}
