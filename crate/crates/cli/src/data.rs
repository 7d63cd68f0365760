//! `data runs | show | export`: browse a controller's store, locally or over
//! a LAN connection.

use std::path::Path;

use serde_json::Value;
use toolweave_core::store::{DataStore, RunRecord, RunReport};
use toolweave_net::wire::DataQueryKind;

use crate::config::{ephemeral_id, ConfigDir};
use crate::{print_json, CliError, CliResult, EXIT_OK};

fn open_store(dir: &ConfigDir) -> CliResult<DataStore> {
    DataStore::open(dir.store_dir()).map_err(|e| CliError::environment(format!("store: {e}")))
}

fn remote_query(dir: &ConfigDir, addr: &str, query: DataQueryKind) -> CliResult<Value> {
    let node = dir.open_node(Some(ephemeral_id()))?;
    let peer = node.connect_tcp(addr).map_err(|e| CliError::environment(format!("controller {addr}: {e}")))?;
    let result = node.data_query(&peer.node_id, query);
    node.shutdown();
    result.map_err(|e| match e.code.as_str() {
        "NOT_FOUND" => CliError::failure(e.message),
        _ => CliError::environment(format!("{}: {}", e.code, e.message)),
    })
}

fn decode<T: serde::de::DeserializeOwned>(v: Value) -> CliResult<T> {
    serde_json::from_value(v).map_err(|e| CliError::environment(format!("malformed response: {e}")))
}

pub fn runs(dir: &ConfigDir, controller: Option<&str>, json: bool) -> CliResult<u8> {
    let runs: Vec<RunRecord> = match controller {
        Some(addr) => decode(remote_query(dir, addr, DataQueryKind::Runs)?)?,
        None => open_store(dir)?.list_runs(),
    };
    if json {
        print_json(&runs);
        return Ok(EXIT_OK);
    }
    if runs.is_empty() {
        println!("no runs");
    }
    for r in runs {
        let took = r.finished_at.map(|f| format!("{} ms", f - r.started_at)).unwrap_or_else(|| "-".into());
        println!("{}  {:<10} {:<24} {took}", r.run_id, r.final_state.to_string(), r.workflow_name);
    }
    Ok(EXIT_OK)
}

pub fn show(dir: &ConfigDir, run_id: &str, controller: Option<&str>, json: bool) -> CliResult<u8> {
    let report: RunReport = match controller {
        Some(addr) => decode(remote_query(dir, addr, DataQueryKind::Show { run_id: run_id.to_owned() })?)?,
        None => open_store(dir)?.query_run(run_id).map_err(|e| match e.code() {
            "NOT_FOUND" => CliError::failure(format!("unknown run `{run_id}`")),
            _ => CliError::environment(e.to_string()),
        })?,
    };
    if json {
        print_json(&report);
        return Ok(EXIT_OK);
    }
    let r = &report.run;
    println!("run {} ({}) {} on controller {}", r.run_id, r.workflow_name, r.final_state, r.controller_node);
    println!("{:<20} {:>4} {:<10} {:>6} {:>9}", "instance", "#", "node", "exit", "ms");
    for e in &report.executions {
        let node = &e.node_id[..e.node_id.len().min(10)];
        println!("{:<20} {:>4} {:<10} {:>6} {:>9}", e.instance_id, e.execution_index, node, e.exit_status, e.finished_at - e.started_at);
        if let Some(err) = &e.error {
            println!("{:<20} error: {err}", "");
        }
    }
    Ok(EXIT_OK)
}

pub fn export(dir: &ConfigDir, run_id: &str, target: &Path) -> CliResult<u8> {
    let store = open_store(dir)?;
    let path = store.export_run(run_id, target).map_err(|e| match e.code() {
        "NOT_FOUND" => CliError::failure(format!("unknown run `{run_id}`")),
        "RUN_NOT_TERMINAL" => CliError::failure(format!("run `{run_id}` has not finished")),
        _ => CliError::environment(e.to_string()),
    })?;
    println!("{}", path.display());
    Ok(EXIT_OK)
}
