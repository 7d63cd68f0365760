//! In-process multi-node setups: nodes and relays wired with pipes, each
//! node with its own store and working directory under one root.

use std::path::{Path, PathBuf};
use std::thread;

use toolweave_core::engine::EngineOptions;

use crate::crypto::{GroupKey, KeyRing};
use crate::node::{Node, NodeSetup, PeerInfo};
use crate::relay::Relay;
use crate::transport::pipe;
use crate::NetError;

pub struct Cluster {
    root: PathBuf,
}

impl Cluster {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Cluster { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// A node whose id is `id` and whose key ring holds `keys`.
    pub fn node(&self, id: &str, keys: &[&GroupKey]) -> Node {
        let mut ring = KeyRing::new();
        for k in keys {
            ring.insert((*k).clone());
        }
        let dir = self.root.join(id);
        Node::new(NodeSetup {
            node_id: id.to_owned(),
            display_name: id.to_owned(),
            store_dir: dir.join("store"),
            work_dir: dir.join("work"),
            keys: ring,
            engine: EngineOptions::default(),
        })
        .expect("node setup in a fresh directory")
    }
}

/// Connects two nodes over an in-process pipe.
pub fn link(a: &Node, b: &Node) -> Result<(PeerInfo, PeerInfo), NetError> {
    let (ea, eb) = pipe();
    let b2 = b.clone();
    let other = thread::spawn(move || b2.connect(Box::new(eb)));
    let pa = a.connect(Box::new(ea));
    let pb = other.join().expect("handshake thread");
    Ok((pa?, pb?))
}

/// Attaches `node` to `relay` as `client_id` over an in-process pipe.
pub fn attach_uplink(relay: &Relay, node: &Node, client_id: &str, token: &str) -> Result<PeerInfo, NetError> {
    let (client, server) = pipe();
    let relay = relay.clone();
    let accept = thread::spawn(move || relay.accept(Box::new(server)));
    let res = node.uplink_attach(Box::new(client), client_id, token);
    let accepted = accept.join().expect("relay accept thread");
    match (res, accepted) {
        (Ok(p), Ok(_)) => Ok(p),
        (Err(e), _) => Err(e),
        (Ok(_), Err(e)) => Err(NetError::new(e.code, e.message)),
    }
}
