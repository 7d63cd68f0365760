//! Component announcements and the registry of what peers publish.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use toolweave_core::model::{endpoints_from_decls, ComponentInterface, ComponentRef, Direction, EndpointDecl};
use toolweave_core::store::sha256_hex;
use toolweave_core::tool::ToolDescriptor;

use crate::crypto::{announcement_slot, decrypt_announcement, encrypt_announcement, GroupKey, KeyRing};

pub const PUBLIC: &str = "PUBLIC";
/// Publisher prefix the relay assigns to announcements of uplink clients.
pub const UPLINK_PREFIX: &str = "uplink:";

/// What an announcement reveals about a published tool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolSummary {
    pub name: String,
    pub version: String,
    pub inputs: Vec<EndpointDecl>,
    pub outputs: Vec<EndpointDecl>,
    pub documentation_digest: String,
}

impl ToolSummary {
    pub fn of(desc: &ToolDescriptor) -> Self {
        ToolSummary {
            name: desc.name.clone(),
            version: desc.version.clone(),
            inputs: desc.inputs.iter().map(EndpointDecl::from_endpoint).collect(),
            outputs: desc.outputs.iter().map(EndpointDecl::from_endpoint).collect(),
            documentation_digest: sha256_hex(desc.documentation.as_deref().unwrap_or_default().as_bytes()),
        }
    }

    pub fn interface(&self) -> Result<ComponentInterface, String> {
        Ok(ComponentInterface {
            inputs: endpoints_from_decls(&self.inputs, Direction::Input).map_err(|e| e.to_string())?,
            outputs: endpoints_from_decls(&self.outputs, Direction::Output).map_err(|e| e.to_string())?,
        })
    }
}

/// Envelope sent in ANNOUNCE and RETRACT frames. A retraction carries
/// neither `payload` nor `sealed`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Announcement {
    pub publisher: String,
    pub group: String,
    pub slot: String,
    pub sequence: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<ToolSummary>,
    /// base64 of `nonce || ciphertext`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sealed: Option<String>,
}

impl Announcement {
    pub fn publish(publisher: &str, group: Option<&GroupKey>, summary: &ToolSummary, sequence: u64) -> Self {
        let mut a = Self::retract(publisher, group, &summary.name, sequence);
        match group {
            None => a.payload = Some(summary.clone()),
            Some(k) => {
                let plain = serde_json::to_vec(summary).expect("summary serializes");
                a.sealed = Some(B64.encode(encrypt_announcement(&plain, &k.material().enc_key)));
            }
        }
        a
    }

    pub fn retract(publisher: &str, group: Option<&GroupKey>, tool_name: &str, sequence: u64) -> Self {
        Announcement {
            publisher: publisher.to_owned(),
            group: group.map_or(PUBLIC.to_owned(), |k| k.key_id().to_owned()),
            slot: announcement_slot(group.map(|k| &k.material().mac_key), tool_name),
            sequence,
            payload: None,
            sealed: None,
        }
    }

    pub fn is_tombstone(&self) -> bool {
        self.payload.is_none() && self.sealed.is_none()
    }

    pub fn is_public(&self) -> bool {
        self.group == PUBLIC
    }

    /// The plaintext summary, if this node can read it.
    pub fn open(&self, keys: &KeyRing) -> Option<ToolSummary> {
        if self.is_public() {
            return self.payload.clone();
        }
        let key = keys.by_key_id(&self.group)?;
        let sealed = B64.decode(self.sealed.as_deref()?).ok()?;
        let plain = decrypt_announcement(&sealed, &key.material().enc_key).ok()?;
        serde_json::from_slice(&plain).ok()
    }
}

/// A component visible to this node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteComponent {
    pub component: ComponentRef,
    pub publisher: String,
    /// `PUBLIC` or a group display form `<name>/<key_id>`.
    pub group: String,
    pub summary: ToolSummary,
}

/// Namespace under which tools of `publisher` are listed: `<client_id>::`
/// for uplink clients, none for LAN peers.
pub fn namespaced_name(publisher: &str, name: &str) -> String {
    match publisher.strip_prefix(UPLINK_PREFIX) {
        Some(cid) => format!("{cid}::{name}"),
        None => name.to_owned(),
    }
}

/// Announcements received from peers, superseded per `(publisher, slot)`.
#[derive(Debug, Default, Clone)]
pub struct Registry {
    entries: BTreeMap<(String, String), Announcement>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies an announcement or tombstone; returns false if it is stale.
    pub fn apply(&mut self, a: Announcement) -> bool {
        let key = (a.publisher.clone(), a.slot.clone());
        match self.entries.get(&key) {
            Some(old) if old.sequence >= a.sequence => false,
            _ => {
                self.entries.insert(key, a);
                true
            }
        }
    }

    pub fn remove_publisher(&mut self, publisher: &str) {
        self.entries.retain(|(p, _), _| p != publisher);
    }

    pub fn retain_publishers(&mut self, keep: impl Fn(&str) -> bool) {
        self.entries.retain(|(p, _), _| keep(p));
    }

    /// All entries including tombstones.
    pub fn entries(&self) -> impl Iterator<Item = &Announcement> {
        self.entries.values()
    }

    /// Live (non-tombstone) announcements.
    pub fn announcements(&self) -> impl Iterator<Item = &Announcement> {
        self.entries.values().filter(|a| !a.is_tombstone())
    }

    pub fn len(&self) -> usize {
        self.announcements().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn list(&self, keys: &KeyRing) -> Vec<RemoteComponent> {
        let mut out: Vec<_> = self
            .announcements()
            .filter_map(|a| {
                let summary = a.open(keys)?;
                let group = if a.is_public() {
                    PUBLIC.to_owned()
                } else {
                    keys.by_key_id(&a.group).map(ToString::to_string)?
                };
                Some(RemoteComponent {
                    component: ComponentRef::new(namespaced_name(&a.publisher, &summary.name), summary.version.clone()),
                    publisher: a.publisher.clone(),
                    group,
                    summary,
                })
            })
            .collect();
        out.sort_by(|a, b| (&a.component, &a.publisher, &a.group).cmp(&(&b.component, &b.publisher, &b.group)));
        out
    }
}

pub fn list_remote_components(registry: &Registry, keys: &KeyRing) -> Vec<RemoteComponent> {
    registry.list(keys)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(name: &str, version: &str) -> ToolSummary {
        ToolSummary { name: name.into(), version: version.into(), inputs: vec![], outputs: vec![], documentation_digest: String::new() }
    }

    #[test]
    fn later_sequence_supersedes() {
        let g = GroupKey::generate("g");
        let mut keys = KeyRing::new();
        keys.insert(g.clone());
        let mut reg = Registry::new();
        assert!(reg.apply(Announcement::publish("p", Some(&g), &summary("t", "1"), 1)));
        assert!(reg.apply(Announcement::publish("p", Some(&g), &summary("t", "2"), 2)));
        assert!(!reg.apply(Announcement::publish("p", Some(&g), &summary("t", "1"), 1)));
        let listed = reg.list(&keys);
        assert_eq!(listed.len(), 1);
        assert_eq!(listed[0].component, ComponentRef::new("t", "2"));
        assert_eq!(listed[0].group, g.to_string());
        assert!(reg.apply(Announcement::retract("p", Some(&g), "t", 3)));
        assert!(reg.list(&keys).is_empty());
        assert!(!reg.apply(Announcement::publish("p", Some(&g), &summary("t", "2"), 2)));
    }

    #[test]
    fn listing_needs_keys() {
        let g = GroupKey::generate("g");
        let mut reg = Registry::new();
        reg.apply(Announcement::publish("a", Some(&g), &summary("t", "1"), 1));
        reg.apply(Announcement::publish("b", Some(&g), &summary("t", "1"), 1));
        reg.apply(Announcement::publish("a", None, &summary("open", "1"), 2));
        let none = reg.list(&KeyRing::new());
        assert_eq!(none.len(), 1);
        assert_eq!(none[0].group, PUBLIC);
        let mut keys = KeyRing::new();
        keys.insert(g);
        let all = reg.list(&keys);
        assert_eq!(all.len(), 3);
        let t: Vec<_> = all.iter().filter(|c| c.component.name == "t").map(|c| c.publisher.as_str()).collect();
        assert_eq!(t, ["a", "b"]);
    }

    #[test]
    fn uplink_publishers_are_namespaced() {
        assert_eq!(namespaced_name("uplink:acme", "t"), "acme::t");
        assert_eq!(namespaced_name("0123", "t"), "t");
    }
}
