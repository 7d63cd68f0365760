#![cfg(unix)]

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde_json::Value;
use toolweave_core::components::register_builtins;
use toolweave_core::datum::Datum;
use toolweave_core::engine::{local_providers, Controller, EngineOptions, LocalTools, RunHandle};
use toolweave_core::model::{parse_workflow, plan_placement, validate_graph, Catalog};
use toolweave_core::store::{DataStore, ExportManifest, RunState};
use toolweave_core::tool::{parse_descriptor, ToolRunner};
use toolweave_fixtures::{fig1a_workflow, Fixtures, FIG1A_INSTANCES};

const WAIT: Duration = Duration::from_secs(60);

struct Node {
    dir: tempfile::TempDir,
    fx: Fixtures,
    tools: Arc<LocalTools>,
    ctl: Controller,
}

fn node() -> Node {
    let dir = tempfile::tempdir().unwrap();
    let fx = Fixtures::install(&dir.path().join("fixtures")).unwrap();
    let store = Arc::new(DataStore::open(dir.path().join("store")).unwrap());
    let runner = Arc::new(ToolRunner::new(dir.path().join("work"), store.blobs().clone()));
    let tools = Arc::new(LocalTools::new("local", runner.clone()));
    for d in fx.fig1a_descriptors().iter().chain([&fx.identity_descriptor(), &fx.failing_descriptor()]) {
        tools.install(parse_descriptor(d).unwrap());
    }
    let ctl = Controller::new("local", store, tools.clone(), runner, EngineOptions::default());
    Node { dir, fx, tools, ctl }
}

impl Node {
    fn catalog(&self) -> Catalog {
        let mut c = Catalog::new();
        register_builtins(&mut c);
        for d in self.tools.list() {
            c.insert(d.component_ref(), d.interface());
        }
        c
    }

    fn start(&self, text: &str) -> RunHandle {
        let g = parse_workflow(text).unwrap();
        let catalog = self.catalog();
        assert_eq!(validate_graph(&g, &catalog), vec![]);
        let plan = plan_placement(&g, &local_providers("local", &self.tools), &BTreeMap::new()).unwrap();
        self.ctl.start_run(&g, &plan, &catalog).unwrap()
    }
}

#[test]
fn fig1a_runs_in_dataflow_order() {
    let n = node();
    let h = n.start(&fig1a_workflow(&BTreeMap::new()));
    assert_eq!(h.wait(WAIT), RunState::Completed);
    let report = n.ctl.store().query_run(h.run_id()).unwrap();
    assert_eq!(report.executions.len(), 5);
    for id in FIG1A_INSTANCES {
        assert_eq!(report.executions.iter().filter(|r| r.instance_id == id).count(), 1, "{id}");
    }
    let by_id = |id: &str| report.executions.iter().find(|r| r.instance_id == id).unwrap();
    let sim = by_id("simulation");
    let summary = by_id("summary");
    assert_eq!(report.executions.first().unwrap().instance_id, "simulation");
    assert_eq!(report.executions.last().unwrap().instance_id, "summary");
    for eval in ["performance", "economics", "ecology"] {
        let r = by_id(eval);
        assert!(r.started_at >= sim.finished_at);
        assert!(summary.started_at >= r.finished_at);
        assert_eq!(r.inputs["trajectory"], sim.outputs["trajectory"][0]);
    }
    assert_eq!(summary.inputs.len(), 3);
    let producers: Vec<_> = summary.upstream_edges.values().map(|e| e.producer.as_str()).collect();
    assert_eq!(producers, ["economics", "ecology", "performance"]);
    assert!(n.ctl.store().check_closure().is_empty());
}

#[test]
fn fig1b_coordinate_descent_and_grid() {
    let n = node();
    let h = n.start(&n.fx.fig1b_workflow("coordinate_descent", 1e-3, 200));
    assert_eq!(h.wait(WAIT), RunState::Completed);
    let report = n.ctl.store().query_run(h.run_id()).unwrap();
    let evaluations = report.executions.iter().filter(|r| r.instance_id == "objective").count();
    assert!(evaluations <= 200);
    let last = report.executions.iter().filter(|r| r.instance_id == "optimizer").max_by_key(|r| r.execution_index).unwrap();
    let Datum::Text(text) = &last.outputs["optimum"][0] else { panic!("optimum is text") };
    let optimum: Value = serde_json::from_str(text).unwrap();
    assert!((optimum["point"]["x"].as_f64().unwrap() - 3.0).abs() <= 1e-3);
    assert_eq!(optimum["evaluations"].as_u64().unwrap() as usize, evaluations);

    let h = n.start(&n.fx.fig1b_workflow("grid", 1e-3, 200));
    assert_eq!(h.wait(WAIT), RunState::Completed);
    let report = n.ctl.store().query_run(h.run_id()).unwrap();
    assert_eq!(report.executions.iter().filter(|r| r.instance_id == "objective").count(), 11);
    let last = report.executions.iter().filter(|r| r.instance_id == "optimizer").max_by_key(|r| r.execution_index).unwrap();
    let Datum::Text(text) = &last.outputs["optimum"][0] else { panic!("optimum is text") };
    let optimum: Value = serde_json::from_str(text).unwrap();
    assert_eq!(optimum["point"]["x"].as_f64(), Some(3.0));
}

#[test]
fn converger_loop_completes() {
    let n = node();
    let h = n.start(&n.fx.converger_workflow(1e-6, 100));
    assert_eq!(h.wait(WAIT), RunState::Completed);
    let report = n.ctl.store().query_run(h.run_id()).unwrap();
    let last = report.executions.iter().filter(|r| r.instance_id == "converger").max_by_key(|r| r.execution_index).unwrap();
    assert_eq!(last.outputs["done"], vec![Datum::Boolean(true)]);
    let x = last.outputs["converged"][0].as_f64().unwrap();
    assert!((x - 2f64.sqrt()).abs() <= 1e-6);
}

#[test]
fn stalled_run_names_endpoint() {
    let n = node();
    let h = n.start(&n.fx.stall_workflow());
    assert_eq!(h.wait(WAIT), RunState::Stalled);
    assert!(h.diagnostic().unwrap().contains("join.b"));
    assert_eq!(n.ctl.store().query_run(h.run_id()).unwrap().run.final_state, RunState::Stalled);
}

#[test]
fn missing_input_file_fails_before_firing() {
    let n = node();
    let text = format!(
        r#"{{"name":"m","components":[{{"id":"p","component":"std.input-provider@1","config":{{"files":{{"f":"{}"}}}}}}]}}"#,
        n.dir.path().join("absent.dat").display()
    );
    let h = n.start(&text);
    assert_eq!(h.wait(WAIT), RunState::Failed);
    assert!(h.diagnostic().unwrap().contains("FILE_NOT_FOUND"));
    assert!(n.ctl.store().query_run(h.run_id()).unwrap().executions.is_empty());
}

#[test]
fn script_and_writer_components() {
    let n = node();
    let out = n.dir.path().join("results");
    let input = n.dir.path().join("a.dat");
    std::fs::write(&input, b"payload bytes").unwrap();
    let text = serde_json::json!({
        "name": "scripts",
        "components": [
            {"id": "src", "component": "std.input-provider@1", "config": {"values": {"x": 4}, "files": {"f": input}}},
            {"id": "inc", "component": "std.script@1", "config": {"command": n.fx.increment_command()},
             "inputs": [{"name": "x", "type": "Integer"}], "outputs": [{"name": "y", "type": "Integer"}]},
            {"id": "copy", "component": "std.script@1", "config": {"command": n.fx.copy_file_command()},
             "inputs": [{"name": "f", "type": "FileRef"}], "outputs": [{"name": "g", "type": "FileRef"}]},
            {"id": "sink", "component": "std.output-writer@1", "config": {"target": out},
             "inputs": [{"name": "y", "type": "Integer"}, {"name": "g", "type": "FileRef"}]}
        ],
        "connections": [
            {"from": "src.x", "to": "inc.x"}, {"from": "src.f", "to": "copy.f"},
            {"from": "inc.y", "to": "sink.y"}, {"from": "copy.g", "to": "sink.g"}
        ]
    })
    .to_string();
    let h = n.start(&text);
    assert_eq!(h.wait(WAIT), RunState::Completed);
    let report = n.ctl.store().query_run(h.run_id()).unwrap();
    let inc = report.executions.iter().find(|r| r.instance_id == "inc").unwrap();
    assert_eq!(inc.outputs["y"], vec![Datum::Integer(5)]);
    let copy = report.executions.iter().find(|r| r.instance_id == "copy").unwrap();
    assert_eq!(copy.inputs["f"].file_ref().unwrap().digest, copy.outputs["g"][0].file_ref().unwrap().digest);
    assert_eq!(std::fs::read(out.join("sink-g-1-copy")).unwrap(), b"payload bytes");
    assert!(std::fs::read_to_string(out.join("values.log")).unwrap().contains("\"value\":5"));
}

#[test]
fn failing_script_fails_run() {
    let n = node();
    let text = serde_json::json!({
        "name": "fails",
        "components": [
            {"id": "src", "component": "std.input-provider@1", "config": {"values": {"x": 1}}},
            {"id": "bad", "component": "std.script@1", "config": {"command": n.fx.fail_command()},
             "inputs": [{"name": "x", "type": "Integer"}], "outputs": [{"name": "y", "type": "Integer"}]}
        ],
        "connections": [{"from": "src.x", "to": "bad.x"}]
    })
    .to_string();
    let h = n.start(&text);
    assert_eq!(h.wait(WAIT), RunState::Failed);
    let report = n.ctl.store().query_run(h.run_id()).unwrap();
    let bad = report.executions.iter().find(|r| r.instance_id == "bad").unwrap();
    assert_eq!(bad.exit_status, 3);
    assert!(bad.error.as_deref().unwrap().contains("TOOL_FAILED"));
}

#[test]
fn deterministic_runs_export_identically() {
    let n = node();
    let a = n.start(&fig1a_workflow(&BTreeMap::new()));
    let b = n.start(&fig1a_workflow(&BTreeMap::new()));
    assert_eq!(a.wait(WAIT), RunState::Completed);
    assert_eq!(b.wait(WAIT), RunState::Completed);
    let store = n.ctl.store();
    let (ma, mb) = (store.export_manifest(a.run_id()).unwrap(), store.export_manifest(b.run_id()).unwrap());
    assert_eq!(normalize(&ma), normalize(&mb));
    assert_eq!(ma.blobs, mb.blobs);
    assert!(store.check_closure().is_empty());
    assert!(store.blobs().verify_all().unwrap().is_empty());

    let path = store.export_run(a.run_id(), &n.dir.path().join("export")).unwrap();
    let other = DataStore::open(n.dir.path().join("other")).unwrap();
    other.import_run(path.parent().unwrap()).unwrap();
    assert_eq!(other.query_run(a.run_id()).unwrap(), store.query_run(a.run_id()).unwrap());
}

/// Blanks out run ids and timestamps.
fn normalize(m: &ExportManifest) -> Value {
    let mut v = serde_json::to_value(m).unwrap();
    fn scrub(v: &mut Value) {
        match v {
            Value::Object(map) => {
                for (k, val) in map.iter_mut() {
                    if matches!(k.as_str(), "run_id" | "started_at" | "finished_at") {
                        *val = Value::Null;
                    } else {
                        scrub(val);
                    }
                }
            }
            Value::Array(items) => items.iter_mut().for_each(scrub),
            _ => {}
        }
    }
    scrub(&mut v);
    v
}
