#![cfg(unix)]

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde_json::json;
use toolweave_core::datum::{Datum, FileRef};
use toolweave_core::model::ComponentRef;
use toolweave_core::store::{sha256_hex, RunState};
use toolweave_core::tool::{discard_logs, parse_descriptor};
use toolweave_fixtures::{fig1a_workflow, Fixtures};
use toolweave_net::announce::PUBLIC;
use toolweave_net::crypto::GroupKey;
use toolweave_net::harness::{link, Cluster};
use toolweave_net::node::finished_state;
use toolweave_net::wire::DataQueryKind;
use toolweave_net::Node;

const A: &str = "aaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaa";
const B: &str = "bbbbbbbbbbbbbbbbbbbbbbbbbbbbbbbb";
const C: &str = "cccccccccccccccccccccccccccccccc";

struct Env {
    _dir: tempfile::TempDir,
    fx: Fixtures,
    cluster: Cluster,
}

fn env() -> Env {
    let dir = tempfile::tempdir().unwrap();
    let fx = Fixtures::install(&dir.path().join("fixtures")).unwrap();
    let cluster = Cluster::new(dir.path().join("nodes"));
    Env { _dir: dir, fx, cluster }
}

fn identity() -> ComponentRef {
    ComponentRef::new("identity", "1.0")
}

fn install(node: &Node, descriptor: &str) -> ComponentRef {
    let d = parse_descriptor(descriptor).unwrap();
    let r = d.component_ref();
    node.install_tool(d);
    r
}

fn names(node: &Node) -> Vec<String> {
    node.remote_components().iter().map(|c| format!("{}@{}", c.component, c.publisher)).collect()
}

/// Waits until `f` holds; announcements travel asynchronously.
fn eventually(what: &str, f: impl Fn() -> bool) {
    let deadline = Instant::now() + Duration::from_secs(10);
    while !f() {
        assert!(Instant::now() < deadline, "timed out waiting for {what}");
        std::thread::sleep(Duration::from_millis(10));
    }
}

#[test]
fn group_publication_is_visible_to_members_only() {
    let e = env();
    let g = GroupKey::generate("wind-tunnel");
    let a = e.cluster.node(A, &[&g]);
    let member = e.cluster.node(B, &[&g]);
    let outsider = e.cluster.node(C, &[]);
    install(&a, &e.fx.identity_descriptor());
    link(&a, &member).unwrap();
    link(&a, &outsider).unwrap();
    a.publish(&identity(), Some("wind-tunnel")).unwrap();
    eventually("member listing", || member.remote_components().len() == 1);
    let rc = &member.remote_components()[0];
    assert_eq!(rc.component, identity());
    assert_eq!(rc.publisher, A);
    assert_eq!(rc.group, g.to_string());
    outsider.sync().unwrap();
    assert!(outsider.remote_components().is_empty());

    // a key imported later makes the stored announcement readable
    outsider.add_key(g.clone());
    assert_eq!(names(&outsider), [format!("identity@1.0@{A}")]);
}

#[test]
fn version_update_supersedes_and_unpublish_retracts() {
    let e = env();
    let g = GroupKey::generate("g");
    let a = e.cluster.node(A, &[&g]);
    let b = e.cluster.node(B, &[&g]);
    install(&a, &e.fx.identity_descriptor());
    link(&a, &b).unwrap();
    a.publish(&identity(), Some("g")).unwrap();
    eventually("v1", || b.remote_components().len() == 1);

    let mut v2 = parse_descriptor(&e.fx.identity_descriptor()).unwrap();
    v2.version = "2.0".into();
    a.install_tool(v2);
    a.publish(&ComponentRef::new("identity", "2.0"), Some("g")).unwrap();
    eventually("v2 only", || names(&b) == [format!("identity@2.0@{A}")]);

    a.unpublish(&ComponentRef::new("identity", "2.0"), Some("g")).unwrap();
    eventually("retraction", || b.remote_components().is_empty());
    b.sync().unwrap();
    assert!(b.remote_components().is_empty());
}

#[test]
fn public_tools_reach_every_peer_and_merge_with_group_tools() {
    let e = env();
    let g = GroupKey::generate("g");
    let a = e.cluster.node(A, &[&g]);
    let b = e.cluster.node(B, &[&g]);
    let c = e.cluster.node(C, &[&g]);
    let d = e.cluster.node("dddddddddddddddddddddddddddddddd", &[]);
    for n in [&a, &b] {
        install(n, &e.fx.identity_descriptor());
        n.publish(&identity(), Some("g")).unwrap();
    }
    install(&a, &e.fx.square_descriptor());
    a.publish(&ComponentRef::new("square", "1.0"), None).unwrap();
    link(&a, &c).unwrap();
    link(&b, &c).unwrap();
    link(&a, &d).unwrap();
    let listed = c.remote_components();
    let ids: Vec<_> = listed.iter().filter(|r| r.component == identity()).map(|r| r.publisher.as_str()).collect();
    assert_eq!(ids, [A, B]);
    assert!(listed.iter().any(|r| r.component.name == "square" && r.group == PUBLIC));
    assert_eq!(names(&d), [format!("square@1.0@{A}")]);
}

#[test]
fn remote_execution_matches_local() {
    let e = env();
    let g = GroupKey::generate("g");
    let a = e.cluster.node(A, &[&g]);
    let b = e.cluster.node(B, &[&g]);
    install(&a, &e.fx.identity_descriptor());
    a.publish(&identity(), Some("g")).unwrap();
    link(&a, &b).unwrap();
    let inputs = BTreeMap::from([("x".to_string(), Datum::Integer(7))]);
    let local = a.tools().execute_local(&identity(), &inputs, &discard_logs).unwrap();
    let remote = b.remote_execute(A, &identity(), g.key_id(), &inputs, &discard_logs).unwrap();
    assert_eq!(remote.outputs, local.outputs);
    assert_eq!(remote.outputs["y"], vec![Datum::Integer(7)]);
    assert_eq!(remote.stdout_ref, local.stdout_ref);
    assert!(b.store().blobs().contains(&remote.stdout_ref.digest));
}

#[test]
fn non_member_is_refused_before_spawn() {
    let e = env();
    let g = GroupKey::generate("g");
    let a = e.cluster.node(A, &[&g]);
    let b = e.cluster.node(B, &[]);
    install(&a, &e.fx.identity_descriptor());
    a.publish(&identity(), Some("g")).unwrap();
    link(&a, &b).unwrap();
    let inputs = BTreeMap::from([("x".to_string(), Datum::Integer(7))]);
    let err = b.remote_execute(A, &identity(), g.key_id(), &inputs, &discard_logs).unwrap_err();
    assert_eq!(err.error.code(), "AUTH_FAILED");
    // a wrong key fails the same way
    let c = e.cluster.node(C, &[&GroupKey::from_secret("g", &[9; 32]).unwrap()]);
    link(&a, &c).unwrap();
    let err = c.remote_execute(A, &identity(), g.key_id(), &inputs, &discard_logs).unwrap_err();
    assert_eq!(err.error.code(), "AUTH_FAILED");
    assert_eq!(a.runner().spawn_count(), 0);

    let unpublished = b.remote_execute(A, &ComponentRef::new("identity", "9"), PUBLIC, &inputs, &discard_logs).unwrap_err();
    assert_eq!(unpublished.error.code(), "UNKNOWN_COMPONENT");
}

#[test]
fn large_file_survives_the_link() {
    let e = env();
    let a = e.cluster.node(A, &[]);
    let b = e.cluster.node(B, &[]);
    let desc = json!({
        "name": "copy", "version": "1.0",
        "commands": {"linux": e.fx.copy_file_command()},
        "inputs": [{"name": "f", "type": "FileRef"}],
        "outputs": [{"name": "g", "type": "FileRef"}],
    });
    let copy = install(&a, &desc.to_string());
    a.publish(&copy, None).unwrap();
    link(&a, &b).unwrap();
    let bytes: Vec<u8> = (0..5 * 1024 * 1024u32).map(|i| (i.wrapping_mul(2_654_435_761) >> 13) as u8).collect();
    let blob = b.store().put_blob(&bytes).unwrap();
    let inputs =
        BTreeMap::from([("f".to_string(), Datum::FileRef(FileRef { digest: blob.digest.clone(), size: blob.size, filename: "big.bin".into() }))]);
    let out = b.remote_execute(A, &copy, PUBLIC, &inputs, &discard_logs).unwrap();
    assert!(a.store().blobs().contains(&blob.digest), "input arrived at the host");
    let g = out.outputs["g"][0].file_ref().unwrap();
    assert_eq!(g.digest, sha256_hex(&bytes));
    assert_eq!(b.store().blobs().get(&g.digest).unwrap(), bytes);
}

#[test]
fn remote_failure_carries_code_and_logs() {
    let e = env();
    let a = e.cluster.node(A, &[]);
    let b = e.cluster.node(B, &[]);
    let failing = install(&a, &e.fx.failing_descriptor());
    a.publish(&failing, None).unwrap();
    link(&a, &b).unwrap();
    let inputs = BTreeMap::from([("x".to_string(), Datum::Integer(1))]);
    let err = b.remote_execute(A, &failing, PUBLIC, &inputs, &discard_logs).unwrap_err();
    assert_eq!(err.error.code(), "TOOL_FAILED");
    assert_eq!(err.exit_status, 3);
    let stderr = err.stderr_ref.unwrap();
    assert!(!b.store().blobs().get(&stderr.digest).unwrap().is_empty());
}

#[test]
fn documentation_and_ping() {
    let e = env();
    let a = e.cluster.node(A, &[]);
    let b = e.cluster.node(B, &[]);
    install(&a, &e.fx.identity_descriptor());
    a.publish(&identity(), None).unwrap();
    link(&a, &b).unwrap();
    assert_eq!(b.fetch_documentation(A, &identity()).unwrap(), "identity test fixture");
    assert_eq!(b.fetch_documentation(A, &ComponentRef::new("nope", "1")).unwrap_err().code, "UNKNOWN_COMPONENT");
    b.ping(A).unwrap();
    assert_eq!(b.ping(C).unwrap_err().code, "NODE_UNREACHABLE");
}

#[test]
fn disconnect_drops_remote_listing() {
    let e = env();
    let a = e.cluster.node(A, &[]);
    let b = e.cluster.node(B, &[]);
    install(&a, &e.fx.identity_descriptor());
    a.publish(&identity(), None).unwrap();
    link(&a, &b).unwrap();
    assert_eq!(b.remote_components().len(), 1);
    b.disconnect(A);
    eventually("listing cleared", || b.remote_components().is_empty() && a.peers().is_empty());
}

#[test]
fn submitted_run_survives_client_detachment() {
    let e = env();
    let controller = e.cluster.node(C, &[]);
    for d in e.fx.fig1a_descriptors() {
        install(&controller, &d);
    }
    let client = e.cluster.node(A, &[]);
    link(&client, &controller).unwrap();
    let run = client.submit_remote(C, &fig1a_workflow(&BTreeMap::new()), &BTreeMap::new(), false).unwrap();
    client.disconnect(C);
    let handle = controller.controller().run(&run.run_id).unwrap();
    assert_eq!(handle.wait(Duration::from_secs(60)), RunState::Completed);
    assert_eq!(controller.store().query_run(&run.run_id).unwrap().executions.len(), 5);

    // reconnect and browse the controller's store
    link(&client, &controller).unwrap();
    let shown = client.data_query(C, DataQueryKind::Show { run_id: run.run_id.clone() }).unwrap();
    assert_eq!(shown["executions"].as_array().unwrap().len(), 5);
    let runs = client.data_query(C, DataQueryKind::Runs).unwrap();
    assert_eq!(runs.as_array().unwrap().len(), 1);
    assert_eq!(client.data_query(C, DataQueryKind::Show { run_id: "nope".into() }).unwrap_err().code, "NOT_FOUND");
}

#[test]
fn watched_submission_streams_events() {
    let e = env();
    let controller = e.cluster.node(C, &[]);
    for d in e.fx.fig1a_descriptors() {
        install(&controller, &d);
    }
    let client = e.cluster.node(A, &[]);
    link(&client, &controller).unwrap();
    let run = client.submit_remote(C, &fig1a_workflow(&BTreeMap::new()), &BTreeMap::new(), true).unwrap();
    let events: Vec<_> = run.events.unwrap().iter().collect();
    assert_eq!(events.first().unwrap().kind, "run_started");
    assert_eq!(finished_state(events.last().unwrap()), Some(RunState::Completed));
    assert_eq!(events.iter().filter(|e| e.kind == "firing_finished").count(), 5);

    let bad = client.submit_remote(C, "{not json", &BTreeMap::new(), false).unwrap_err();
    assert_eq!(bad.code, "SYNTAX");
}

#[test]
fn placement_prefers_smaller_node_id_unless_overridden() {
    let e = env();
    let controller = e.cluster.node(C, &[]);
    let a = e.cluster.node(A, &[]);
    let b = e.cluster.node(B, &[]);
    for d in e.fx.fig1a_descriptors() {
        install(&controller, &d);
    }
    for n in [&a, &b] {
        let sim = install(n, &e.fx.fig1a_descriptors()[0]);
        n.publish(&sim, None).unwrap();
        link(n, &controller).unwrap();
    }
    // the controller also hosts the tool, so pin placement to remote providers only
    controller.tools().remove(&ComponentRef::new("scenario-simulation", "1.0"));
    let workflow = fig1a_workflow(&BTreeMap::new());
    let node_of_sim = |overrides: BTreeMap<String, String>| {
        let h = controller.submit(&workflow, &overrides).unwrap();
        assert_eq!(h.wait(Duration::from_secs(60)), RunState::Completed);
        let report = controller.store().query_run(h.run_id()).unwrap();
        report.executions.iter().find(|r| r.instance_id == "simulation").unwrap().node_id.clone()
    };
    assert_eq!(node_of_sim(BTreeMap::new()), A);
    assert_eq!(node_of_sim(BTreeMap::from([("simulation".to_string(), B.to_string())])), B);
    assert_eq!(b.runner().spawn_count(), 1);
}
