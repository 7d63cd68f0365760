//! JSON bodies of the protocol messages.
//!
//! Messages that may cross an uplink relay carry an optional `peer` field:
//! the sender names the destination client, and the relay rewrites it to the
//! source client before forwarding.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use toolweave_core::datum::Datum;
use toolweave_core::model::{ComponentRef, Diagnostic};
use toolweave_core::store::{BlobRef, RunEvent};
use toolweave_core::tool::LogStream;

use crate::announce::Announcement;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub protocol_version: u32,
    pub node_id: String,
    pub display_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl ErrorBody {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        ErrorBody { code: code.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ping {
    #[serde(default)]
    pub req: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peer: Option<String>,
}

/// A request when `announcements` is absent, otherwise the reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct List {
    pub req: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub announcements: Option<Vec<Announcement>>,
}

/// `nonce` is absent for PUBLIC components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Challenge {
    pub req: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nonce: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proof {
    pub req: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecRequest {
    pub req: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peer: Option<String>,
    pub component: ComponentRef,
    /// `PUBLIC` or the key id of the group the caller executes under.
    pub group: String,
    pub inputs: BTreeMap<String, Datum>,
}

impl ExecRequest {
    /// The bytes a membership proof covers: the request without its routing field.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut c = self.clone();
        c.peer = None;
        serde_json::to_vec(&c).expect("request serializes")
    }
}

/// One slice of a blob; the bytes travel in the binary section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobChunk {
    pub req: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peer: Option<String>,
    /// True for caller-to-host input uploads, false for results.
    pub input: bool,
    pub digest: String,
    pub offset: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogChunk {
    pub req: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peer: Option<String>,
    pub stream: LogStream,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub exit_status: i32,
    pub outputs: BTreeMap<String, Vec<Datum>>,
    pub stdout_ref: BlobRef,
    pub stderr_ref: BlobRef,
    pub started_at: u64,
    pub finished_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub code: String,
    pub message: String,
    pub exit_status: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stdout_ref: Option<BlobRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stderr_ref: Option<BlobRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecResult {
    pub req: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<Outcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<Failure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocRequest {
    pub req: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peer: Option<String>,
    pub component: ComponentRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocResponse {
    pub req: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub documentation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSubmit {
    pub req: u64,
    pub workflow: String,
    #[serde(default)]
    pub overrides: BTreeMap<String, String>,
    #[serde(default)]
    pub watch: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAccepted {
    pub req: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<Diagnostic>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEventMsg {
    pub req: u64,
    pub event: RunEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "query", rename_all = "snake_case")]
pub enum DataQueryKind {
    Runs,
    Show { run_id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataQuery {
    pub req: u64,
    #[serde(flatten)]
    pub query: DataQueryKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataResponse {
    pub req: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

/// Request id of any message that carries one.
pub fn req_of(body: &[u8]) -> Option<u64> {
    #[derive(Deserialize)]
    struct R {
        req: u64,
    }
    serde_json::from_slice::<R>(body).ok().map(|r| r.req)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_form_ignores_routing() {
        let mut r = ExecRequest {
            req: 4,
            peer: Some("uplink:a".into()),
            component: ComponentRef::new("t", "1"),
            group: "PUBLIC".into(),
            inputs: BTreeMap::from([("x".into(), Datum::Float(0.1))]),
        };
        let a = r.canonical_bytes();
        r.peer = Some("uplink:b".into());
        assert_eq!(a, r.canonical_bytes());
        let back: ExecRequest = serde_json::from_slice(&a).unwrap();
        assert_eq!(back.canonical_bytes(), a);
    }

    #[test]
    fn data_query_shape() {
        let q = DataQuery { req: 1, query: DataQueryKind::Show { run_id: "r".into() } };
        let v = serde_json::to_value(&q).unwrap();
        assert_eq!(v, serde_json::json!({"req": 1, "query": "show", "run_id": "r"}));
        assert_eq!(serde_json::from_value::<DataQuery>(v).unwrap(), q);
    }
}
