#![cfg(unix)]

use std::collections::BTreeMap;
use std::fs;

use toolweave_core::datum::{Datum, FileRef};
use toolweave_core::store::BlobStore;
use toolweave_core::tool::{discard_logs, execute_tool, parse_descriptor, LogStream, Stage, ToolError, ToolRunner};
use toolweave_fixtures::Fixtures;

struct Env {
    dir: tempfile::TempDir,
    fx: Fixtures,
    blobs: BlobStore,
}

fn env() -> Env {
    let dir = tempfile::tempdir().unwrap();
    let fx = Fixtures::install(&dir.path().join("fixtures")).unwrap();
    let blobs = BlobStore::open(dir.path().join("blobs")).unwrap();
    Env { dir, fx, blobs }
}

fn inputs(pairs: &[(&str, Datum)]) -> BTreeMap<String, Datum> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

#[test]
fn identity_tool_copies_value() {
    let e = env();
    let desc = parse_descriptor(&e.fx.identity_descriptor()).unwrap();
    let out = execute_tool(&desc, &inputs(&[("x", Datum::Integer(7))]), &e.dir.path().join("work"), &e.blobs).unwrap();
    assert_eq!(out.exit_status, 0);
    assert_eq!(out.outputs, BTreeMap::from([("y".to_string(), vec![Datum::Integer(7)])]));
    assert!(out.finished_at >= out.started_at);
}

#[test]
fn failing_main_stage_reports_status() {
    let e = env();
    let desc = parse_descriptor(&e.fx.failing_descriptor()).unwrap();
    let err = execute_tool(&desc, &inputs(&[("x", Datum::Integer(1))]), &e.dir.path().join("work"), &e.blobs).unwrap_err();
    assert_eq!(err.error, ToolError::ToolFailed { stage: Stage::Main, status: 3 });
    let stderr = e.blobs.get(&err.stderr_ref.unwrap().digest).unwrap();
    assert_eq!(stderr, b"failing on purpose\n");
}

#[test]
fn pre_stage_rewrites_inputs() {
    let e = env();
    let desc = parse_descriptor(&e.fx.square_descriptor()).unwrap();
    let out = execute_tool(&desc, &inputs(&[("x", Datum::Float(2.0))]), &e.dir.path().join("work"), &e.blobs).unwrap();
    // (2 * 2)^2
    assert_eq!(out.outputs["y"], vec![Datum::Float(16.0)]);
}

#[test]
fn working_directories_are_fresh_and_disjoint() {
    let e = env();
    let root = e.dir.path().join("work");
    let desc = parse_descriptor(&e.fx.identity_descriptor()).unwrap();
    let runner = ToolRunner::new(&root, e.blobs.clone());
    std::thread::scope(|s| {
        for i in 0..4 {
            let (runner, desc) = (&runner, &desc);
            s.spawn(move || runner.execute(desc, &inputs(&[("x", Datum::Integer(i))]), &discard_logs).unwrap());
        }
    });
    assert_eq!(fs::read_dir(&root).unwrap().count(), 4);
    assert_eq!(runner.spawn_count(), 4);
}

#[test]
fn repeated_execution_is_byte_identical() {
    let e = env();
    let root = e.dir.path().join("work");
    let descs: Vec<_> = e.fx.fig1a_descriptors().iter().map(|d| parse_descriptor(d).unwrap()).collect();
    let runner = ToolRunner::new(&root, e.blobs.clone());
    let a = runner.execute(&descs[0], &inputs(&[("scenario", Datum::Float(0.78))]), &discard_logs).unwrap();
    let b = runner.execute(&descs[0], &inputs(&[("scenario", Datum::Float(0.78))]), &discard_logs).unwrap();
    assert_eq!(a.outputs, b.outputs);
    let outputs_json: Vec<Vec<u8>> = fs::read_dir(&root)
        .unwrap()
        .map(|d| fs::read(d.unwrap().path().join("outputs.json")).unwrap())
        .collect();
    assert_eq!(outputs_json[0], outputs_json[1]);
}

#[test]
fn file_inputs_are_materialized() {
    let e = env();
    let descs: Vec<_> = e.fx.fig1a_descriptors().iter().map(|d| parse_descriptor(d).unwrap()).collect();
    let csv = b"0,0,250\n1,100,249\n";
    let blob = e.blobs.put(csv).unwrap();
    let file = Datum::FileRef(FileRef { digest: blob.digest, size: blob.size, filename: "trajectory.csv".into() });
    let seen = std::sync::Mutex::new(Vec::new());
    let sink = |stream: LogStream, chunk: &[u8]| seen.lock().unwrap().push((stream, chunk.to_vec()));
    let runner = ToolRunner::new(e.dir.path().join("work"), e.blobs.clone());
    let out = runner.execute(&descs[1], &inputs(&[("trajectory", file)]), &sink).unwrap();
    assert_eq!(out.outputs["performance"], vec![Datum::Float(50.0)]);
}

#[test]
fn missing_or_mistyped_outputs() {
    let e = env();
    let mut desc = parse_descriptor(&e.fx.identity_descriptor()).unwrap();
    desc.outputs[0].name = "z".into();
    let err = execute_tool(&desc, &inputs(&[("x", Datum::Integer(1))]), &e.dir.path().join("w1"), &e.blobs).unwrap_err();
    assert_eq!(err.error.code(), "OUTPUT_MISSING");

    let mut desc = parse_descriptor(&e.fx.identity_descriptor()).unwrap();
    desc.outputs[0].datum_type = toolweave_core::datum::DatumType::Boolean;
    let err = execute_tool(&desc, &inputs(&[("x", Datum::Integer(1))]), &e.dir.path().join("w2"), &e.blobs).unwrap_err();
    assert_eq!(err.error.code(), "OUTPUT_TYPE_MISMATCH");
}

#[test]
fn spawn_failure_and_bad_inputs() {
    let e = env();
    let mut desc = parse_descriptor(&e.fx.identity_descriptor()).unwrap();
    desc.commands.linux = Some("/nonexistent/tool-binary".into());
    let err = execute_tool(&desc, &inputs(&[("x", Datum::Integer(1))]), &e.dir.path().join("w"), &e.blobs).unwrap_err();
    assert_eq!(err.error.code(), "SPAWN_FAILED");
    let err = execute_tool(&desc, &inputs(&[("x", Datum::Text("a".into()))]), &e.dir.path().join("w"), &e.blobs).unwrap_err();
    assert_eq!(err.error.code(), "BAD_INPUTS");
}
