//! Peer networking: frames, group keys, announcements, remote execution
//! and the uplink relay.

pub mod announce;
pub mod crypto;
pub mod frame;
pub mod harness;
pub mod node;
pub mod relay;
pub mod transport;
pub mod wire;

pub use node::{Node, NodeSetup, NetError};
