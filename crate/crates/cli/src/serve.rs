//! Long-running node: listens, keeps peer and uplink sessions up, and
//! follows changes to the configuration directory while running.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::net::TcpStream;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use toolweave_core::model::ComponentRef;
use toolweave_net::transport::Duplex;
use toolweave_net::Node;

use crate::config::{ConfigDir, NodeConfig, Publication, UplinkConfig};
use crate::{CliError, CliResult, EXIT_OK};

const RELOAD_INTERVAL: Duration = Duration::from_millis(250);
const MAX_BACKOFF: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, Default)]
pub struct ServeOptions {
    pub listen: Option<String>,
    pub uplink: Option<UplinkConfig>,
}

/// Runs a node until `stop` is set. Prints `listening on <addr>` once the
/// socket is bound and `ready` once configured sessions are started.
pub fn serve(dir: &ConfigDir, opts: ServeOptions, stop: Arc<AtomicBool>) -> CliResult<u8> {
    let mut cfg = dir.load()?;
    if opts.listen.is_some() {
        cfg.listen = opts.listen;
    }
    if opts.uplink.is_some() {
        cfg.uplink = opts.uplink;
    }
    cfg.check(&dir.keys()?)?;
    let node = dir.open_node(None)?;
    println!("node {} ({})", node.id(), node.display_name());

    if let Some(addr) = cfg.listen_addr()? {
        let bound = node.listen(addr).map_err(|e| CliError::environment(format!("cannot bind {addr}: {}", e.message)))?;
        println!("listening on {bound}");
    }

    let mut applied = BTreeSet::new();
    for (i, p) in cfg.published.iter().enumerate() {
        node.publish(&p.component, p.group_name())
            .map_err(|e| CliError::usage(format!("node.json: `published[{i}]`: {}", e.message)))?;
        applied.insert(p.clone());
    }

    for addr in cfg.peers.clone() {
        let (node, stop) = (node.clone(), stop.clone());
        thread::Builder::new()
            .name(format!("peer-{addr}"))
            .spawn(move || maintain_peer(&node, &addr, &stop))
            .map_err(|e| CliError::environment(e.to_string()))?;
    }

    let _uplink = match &cfg.uplink {
        Some(u) => Some(start_uplink(&node, u, stop.clone())?),
        None => None,
    };

    println!("ready");
    let mut watcher = Watcher { applied, tools: installed_tools(dir) };
    while !stop.load(Ordering::SeqCst) {
        thread::sleep(RELOAD_INTERVAL);
        watcher.reload(dir, &node);
    }
    node.shutdown();
    println!("stopped");
    Ok(EXIT_OK)
}

fn installed_tools(dir: &ConfigDir) -> BTreeMap<ComponentRef, String> {
    dir.tools().unwrap_or_default().into_iter().map(|(_, d)| (d.component_ref(), d.to_json())).collect()
}

/// Picks up tools, keys and publications changed by other commands.
struct Watcher {
    applied: BTreeSet<Publication>,
    tools: BTreeMap<ComponentRef, String>,
}

impl Watcher {
    fn reload(&mut self, dir: &ConfigDir, node: &Node) {
        match dir.keys() {
            Ok(keys) => {
                let held = node.keys();
                for k in keys.iter().filter(|k| held.get(&k.name) != Some(*k)) {
                    log::info!("group key {k} added");
                    node.add_key(k.clone());
                }
            }
            Err(e) => log::warn!("keys: {e}"),
        }
        match dir.tools() {
            Ok(tools) => {
                let mut now = BTreeMap::new();
                for (_, desc) in tools {
                    let r = desc.component_ref();
                    let text = desc.to_json();
                    if self.tools.get(&r) != Some(&text) {
                        log::info!("tool {r} installed");
                        node.install_tool(desc);
                    }
                    now.insert(r, text);
                }
                for r in self.tools.keys().filter(|r| !now.contains_key(*r)) {
                    log::info!("tool {r} removed");
                    node.tools().remove(r);
                }
                self.tools = now;
            }
            Err(e) => log::warn!("tools: {e}"),
        }
        let cfg: NodeConfig = match dir.load() {
            Ok(c) => c,
            Err(e) => {
                log::warn!("{e}");
                return;
            }
        };
        let wanted: BTreeSet<Publication> = cfg.published.into_iter().collect();
        for p in self.applied.difference(&wanted) {
            match node.unpublish(&p.component, p.group_name()) {
                Ok(_) => log::info!("unpublished {} from {}", p.component, p.group),
                Err(e) => log::warn!("unpublish {}: {e}", p.component),
            }
        }
        let mut applied: BTreeSet<Publication> = self.applied.intersection(&wanted).cloned().collect();
        for p in wanted.difference(&self.applied) {
            match node.publish(&p.component, p.group_name()) {
                Ok(_) => {
                    log::info!("published {} to {}", p.component, p.group);
                    applied.insert(p.clone());
                }
                Err(e) => log::warn!("publish {}: {e}", p.component),
            }
        }
        self.applied = applied;
    }
}

fn maintain_peer(node: &Node, addr: &str, stop: &AtomicBool) {
    let mut backoff = Duration::from_millis(100);
    let mut session = None;
    while !stop.load(Ordering::SeqCst) {
        if session.is_some_and(|s| node.peers().iter().any(|p| p.session == s)) {
            thread::sleep(Duration::from_millis(100));
            continue;
        }
        match node.connect_tcp(addr) {
            Ok(p) => {
                println!("connected to {} ({}) at {addr}", p.node_id, p.display_name);
                session = Some(p.session);
                backoff = Duration::from_millis(100);
            }
            Err(e) => {
                log::debug!("peer {addr}: {e}");
                thread::sleep(backoff);
                backoff = (backoff * 2).min(MAX_BACKOFF);
            }
        }
    }
}

fn tcp_connector(addr: String) -> Box<dyn Fn() -> io::Result<Box<dyn Duplex>> + Send> {
    Box::new(move || {
        let s = TcpStream::connect(addr.as_str())?;
        let _ = s.set_nodelay(true);
        Ok(Box::new(s) as Box<dyn Duplex>)
    })
}

/// Refusals by the relay end the command; transport failures are retried
/// in the background.
fn start_uplink(node: &Node, u: &UplinkConfig, stop: Arc<AtomicBool>) -> CliResult<thread::JoinHandle<()>> {
    let first = node.uplink_maintain(tcp_connector(u.relay.clone()), &u.client_id, &u.token);
    let pending = match first {
        Ok(link) => {
            println!("uplink {} attached to {}", u.client_id, u.relay);
            Some(link)
        }
        Err(e) if matches!(e.code.as_str(), "AUTH_FAILED" | "DUPLICATE_CLIENT" | "VERSION_MISMATCH") => {
            return Err(CliError::failure(format!("uplink refused by {}: {e}", u.relay)));
        }
        Err(e) => {
            log::warn!("uplink {}: {e}; retrying", u.relay);
            None
        }
    };
    let (node, u) = (node.clone(), u.clone());
    thread::Builder::new()
        .name("uplink".into())
        .spawn(move || {
            let mut link = pending;
            let mut backoff = Duration::from_millis(100);
            while link.is_none() && !stop.load(Ordering::SeqCst) {
                thread::sleep(backoff);
                match node.uplink_maintain(tcp_connector(u.relay.clone()), &u.client_id, &u.token) {
                    Ok(l) => {
                        println!("uplink {} attached to {}", u.client_id, u.relay);
                        link = Some(l);
                    }
                    Err(e) if e.code == "AUTH_FAILED" => {
                        log::error!("uplink {}: {e}; giving up", u.relay);
                        return;
                    }
                    Err(e) => {
                        log::debug!("uplink {}: {e}", u.relay);
                        backoff = (backoff * 2).min(MAX_BACKOFF);
                    }
                }
            }
            while !stop.load(Ordering::SeqCst) {
                thread::sleep(Duration::from_millis(100));
            }
            drop(link);
        })
        .map_err(|e| CliError::environment(e.to_string()))
}
