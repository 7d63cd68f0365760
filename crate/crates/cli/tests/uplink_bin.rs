#![cfg(unix)]

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver};
use std::thread;
use std::time::{Duration, Instant};

use toolweave_core::datum::Datum;
use toolweave_core::model::ComponentRef;
use toolweave_core::tool::discard_logs;
use toolweave_fixtures::Fixtures;
use toolweave_net::harness::Cluster;

const UPLINK: &str = env!("CARGO_BIN_EXE_uplink");
const TOOLWEAVE: &str = env!("CARGO_BIN_EXE_toolweave");

struct Proc {
    child: Child,
    lines: Receiver<String>,
}

impl Proc {
    fn spawn(cmd: &mut Command) -> Proc {
        let mut child = cmd.stdout(Stdio::piped()).stderr(Stdio::null()).spawn().unwrap();
        let (tx, lines) = mpsc::channel();
        let out = BufReader::new(child.stdout.take().unwrap());
        thread::spawn(move || {
            for l in out.lines().map_while(Result::ok) {
                let _ = tx.send(l);
            }
        });
        Proc { child, lines }
    }

    fn line(&self, prefix: &str) -> String {
        let deadline = Instant::now() + Duration::from_secs(20);
        loop {
            match self.lines.recv_timeout(deadline.saturating_duration_since(Instant::now())) {
                Ok(l) if l.starts_with(prefix) => return l,
                Ok(_) => {}
                Err(_) => panic!("no line starting with `{prefix}`"),
            }
        }
    }
}

impl Drop for Proc {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[test]
fn relay_binary_carries_a_connected_clients_tool() {
    let dir = tempfile::tempdir().unwrap();
    let tokens = dir.path().join("tokens");
    fs::write(&tokens, "acme:t-acme\nbeta:t-beta\n").unwrap();
    let relay = Proc::spawn(Command::new(UPLINK).args(["serve", "--listen", "127.0.0.1:0", "--tokens"]).arg(&tokens));
    let addr = relay.line("relay listening on ").trim_start_matches("relay listening on ").to_owned();

    let home = dir.path().join("acme");
    let fx = Fixtures::install(&dir.path().join("fixtures")).unwrap();
    let desc = dir.path().join("identity.json");
    fs::write(&desc, fx.identity_descriptor()).unwrap();
    let run = |args: &[&str]| Command::new(TOOLWEAVE).args(args).env("TOOLWEAVE_HOME", &home).output().unwrap();
    assert!(run(&["tool", "integrate", "--from", desc.to_str().unwrap()]).status.success());
    assert!(run(&["tool", "publish", "identity@1.0"]).status.success());

    let wrong = Command::new(UPLINK)
        .args(["connect", "--relay", &addr, "--id", "acme", "--token", "nope"])
        .env("TOOLWEAVE_HOME", &home)
        .output()
        .unwrap();
    assert_eq!(wrong.status.code(), Some(1));

    let client = Proc::spawn(
        Command::new(UPLINK).args(["connect", "--relay", &addr, "--id", "acme", "--token", "t-acme"]).env("TOOLWEAVE_HOME", &home),
    );
    client.line("ready");

    let b = Cluster::new(dir.path().join("nodes")).node("bbbbbbbbbbbbbbbbbbbbbbbbbbbbbbbb", &[]);
    b.uplink_attach(Box::new(TcpStream::connect(&addr).unwrap()), "beta", "t-beta").unwrap();
    let names: Vec<String> = b.remote_components().iter().map(|r| r.component.to_string()).collect();
    assert_eq!(names, ["acme::identity@1.0"]);
    let inputs = BTreeMap::from([("x".to_string(), Datum::Integer(7))]);
    let out = b
        .remote_execute("uplink:acme", &ComponentRef::new("acme::identity", "1.0"), "PUBLIC", &inputs, &discard_logs)
        .unwrap();
    assert_eq!(out.outputs["y"], vec![Datum::Integer(7)]);
    b.shutdown();
}

#[test]
fn relay_rejects_a_bad_token_file() {
    let dir = tempfile::tempdir().unwrap();
    let tokens = dir.path().join("tokens");
    fs::write(&tokens, "acme-without-token\n").unwrap();
    let out = Command::new(UPLINK).args(["serve", "--listen", "127.0.0.1:0", "--tokens"]).arg(&tokens).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
