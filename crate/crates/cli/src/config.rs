//! The node configuration directory:
//!
//! ```text
//! <dir>/node.json      display name, listen address, peers, uplink, publications
//! <dir>/node-id        32 hex chars, created on first use
//! <dir>/tools/         one descriptor per file, `<name>@<version>.json`
//! <dir>/keys/          one hex group secret per file, `<group>.key`
//! <dir>/store/         data management store
//! <dir>/work/          tool working directories
//! ```

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toolweave_core::engine::EngineOptions;
use toolweave_core::model::ComponentRef;
use toolweave_core::tool::{parse_descriptor, ToolDescriptor};
use toolweave_net::crypto::{random_bytes, KeyRing};
use toolweave_net::{Node, NodeSetup};

use crate::{CliError, CliResult};

pub const HOME_ENV: &str = "TOOLWEAVE_HOME";
pub const PUBLIC_GROUP: &str = "public";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub display_name: Option<String>,
    /// Absent for a client-only node.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub listen: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub peers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uplink: Option<UplinkConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub published: Vec<Publication>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UplinkConfig {
    pub relay: String,
    pub client_id: String,
    pub token: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Publication {
    pub component: ComponentRef,
    /// A group name or `public`.
    pub group: String,
}

impl Publication {
    /// Group argument for [`Node::publish`].
    pub fn group_name(&self) -> Option<&str> {
        (self.group != PUBLIC_GROUP).then_some(self.group.as_str())
    }
}

impl NodeConfig {
    pub fn listen_addr(&self) -> CliResult<Option<SocketAddr>> {
        self.listen
            .as_deref()
            .map(|s| s.parse().map_err(|e| CliError::usage(format!("node.json: `listen`: `{s}` is not a socket address ({e})"))))
            .transpose()
    }

    /// Checks references into the key ring.
    pub fn check(&self, keys: &KeyRing) -> CliResult {
        self.listen_addr()?;
        for (i, p) in self.peers.iter().enumerate() {
            if p.trim().is_empty() {
                return Err(CliError::usage(format!("node.json: `peers[{i}]` is empty")));
            }
        }
        if let Some(u) = &self.uplink {
            if u.client_id.is_empty() || u.token.is_empty() {
                return Err(CliError::usage("node.json: `uplink` needs `client_id` and `token`"));
            }
        }
        for (i, p) in self.published.iter().enumerate() {
            if p.group != PUBLIC_GROUP && keys.get(&p.group).is_none() {
                return Err(CliError::usage(format!("node.json: `published[{i}].group`: unknown group `{}`", p.group)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ConfigDir {
    root: PathBuf,
}

impl ConfigDir {
    /// `explicit`, else `$TOOLWEAVE_HOME`, else `~/.toolweave`.
    pub fn resolve(explicit: Option<PathBuf>) -> Self {
        let root = explicit
            .or_else(|| std::env::var_os(HOME_ENV).map(PathBuf::from))
            .or_else(|| std::env::var_os("HOME").map(|h| PathBuf::from(h).join(".toolweave")))
            .unwrap_or_else(|| PathBuf::from(".toolweave"));
        ConfigDir { root }
    }

    pub fn at(root: impl Into<PathBuf>) -> Self {
        ConfigDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn node_json(&self) -> PathBuf {
        self.root.join("node.json")
    }

    pub fn tools_dir(&self) -> PathBuf {
        self.root.join("tools")
    }

    pub fn keys_dir(&self) -> PathBuf {
        self.root.join("keys")
    }

    pub fn store_dir(&self) -> PathBuf {
        self.root.join("store")
    }

    pub fn work_dir(&self) -> PathBuf {
        self.root.join("work")
    }

    pub fn tool_path(&self, component: &ComponentRef) -> PathBuf {
        self.tools_dir().join(format!("{}@{}.json", component.name, component.version))
    }

    /// The configuration, or defaults when `node.json` does not exist.
    pub fn load(&self) -> CliResult<NodeConfig> {
        let path = self.node_json();
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(NodeConfig::default()),
            Err(e) => Err(CliError::environment(format!("{}: {e}", path.display()))),
        }
    }

    pub fn save(&self, cfg: &NodeConfig) -> CliResult {
        fs::create_dir_all(&self.root).map_err(|e| io_error(&self.root, e))?;
        let path = self.node_json();
        let text = serde_json::to_string_pretty(cfg).expect("config serializes") + "\n";
        fs::write(&path, text).map_err(|e| io_error(&path, e))
    }

    /// This node's persistent id, generated on first use.
    pub fn node_id(&self) -> CliResult<String> {
        let path = self.root.join("node-id");
        match fs::read_to_string(&path) {
            Ok(text) => {
                let id = text.trim().to_owned();
                if id.len() != 32 || !id.bytes().all(|b| b.is_ascii_hexdigit()) {
                    return Err(CliError::usage(format!("{}: expected 32 hex characters", path.display())));
                }
                Ok(id.to_ascii_lowercase())
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                let id = ephemeral_id();
                fs::create_dir_all(&self.root).map_err(|e| io_error(&self.root, e))?;
                fs::write(&path, format!("{id}\n")).map_err(|e| io_error(&path, e))?;
                Ok(id)
            }
            Err(e) => Err(io_error(&path, e)),
        }
    }

    pub fn keys(&self) -> CliResult<KeyRing> {
        KeyRing::load_dir(&self.keys_dir()).map_err(|e| match e.code() {
            "IO" => CliError::environment(e.to_string()),
            _ => CliError::usage(e.to_string()),
        })
    }

    /// Installed descriptors, ordered by file name.
    pub fn tools(&self) -> CliResult<Vec<(PathBuf, ToolDescriptor)>> {
        let dir = self.tools_dir();
        let mut paths: Vec<PathBuf> = match fs::read_dir(&dir) {
            Ok(entries) => entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("json"))
                .collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => vec![],
            Err(e) => return Err(io_error(&dir, e)),
        };
        paths.sort();
        paths
            .into_iter()
            .map(|p| {
                let text = fs::read_to_string(&p).map_err(|e| io_error(&p, e))?;
                let desc = parse_descriptor(&text).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
                Ok((p, desc))
            })
            .collect()
    }

    /// Opens a node on this directory's store with its tools installed.
    /// `node_id` defaults to the persistent id.
    pub fn open_node(&self, node_id: Option<String>) -> CliResult<Node> {
        let cfg = self.load()?;
        let keys = self.keys()?;
        let node_id = match node_id {
            Some(id) => id,
            None => self.node_id()?,
        };
        let node = Node::new(NodeSetup {
            display_name: cfg.display_name.clone().unwrap_or_else(|| format!("node {}", &node_id[..8.min(node_id.len())])),
            node_id,
            store_dir: self.store_dir(),
            work_dir: self.work_dir(),
            keys,
            engine: EngineOptions::default(),
        })
        .map_err(|e| CliError::environment(format!("opening node: {e}")))?;
        for (_, desc) in self.tools()? {
            node.install_tool(desc);
        }
        Ok(node)
    }
}

/// A fresh random node id for short-lived client processes.
pub fn ephemeral_id() -> String {
    hex::encode(random_bytes::<16>())
}

pub fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::environment(format!("{}: {e}", path.display()))
}

/// Connects `node` to each configured peer, returning the ids reached.
/// Unreachable peers are reported and skipped.
pub fn connect_peers(node: &Node, cfg: &NodeConfig) -> Vec<String> {
    let mut reached = Vec::new();
    for addr in &cfg.peers {
        match node.connect_tcp(addr.as_str()) {
            Ok(p) => reached.push(p.node_id),
            Err(e) => log::warn!("peer {addr}: {e}"),
        }
    }
    reached
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ConfigDir::at(dir.path());
        fs::write(cfg.node_json(), r#"{"lisen": "127.0.0.1:1"}"#).unwrap();
        let err = cfg.load().unwrap_err();
        assert_eq!(err.exit, crate::EXIT_USAGE);
        assert!(err.message.contains("lisen"), "{}", err.message);
    }

    #[test]
    fn bad_listen_and_group_are_named() {
        let keys = KeyRing::new();
        let cfg = NodeConfig { listen: Some("nowhere".into()), ..Default::default() };
        assert!(cfg.check(&keys).unwrap_err().message.contains("`listen`"));
        let cfg = NodeConfig {
            published: vec![Publication { component: ComponentRef::new("t", "1"), group: "g".into() }],
            ..Default::default()
        };
        assert!(cfg.check(&keys).unwrap_err().message.contains("published[0].group"));
    }

    #[test]
    fn node_id_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ConfigDir::at(dir.path());
        let id = cfg.node_id().unwrap();
        assert_eq!(id.len(), 32);
        assert_eq!(cfg.node_id().unwrap(), id);
        fs::write(dir.path().join("node-id"), "xyz").unwrap();
        assert_eq!(cfg.node_id().unwrap_err().exit, crate::EXIT_USAGE);
    }
}
