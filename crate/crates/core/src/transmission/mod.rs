//! The transmission layer: builds the tree-shaped connecting network and
//! moves messages through it.
//!
//! Every node runs a router activity (sole consumer of its inbound queue)
//! and an actor activity (sole consumer of the delivered-message list).
//! Non-Master nodes run a transient configurer for the CONFIG handshake;
//! the Master keeps a control activity that drives HELLO sweeps and EXIT.
//! Messages that do not belong to this layer are handed to the installed
//! [`UpperLayer`].

mod list;
mod node;
mod routing;
mod runtime;

use std::collections::BTreeMap;
use std::fmt;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::Serialize;
use thiserror::Error;

use crate::message::{Address, Message};

pub(crate) use list::{MessageList, Pop};
pub use node::Node;
pub(crate) use node::{child_deadline, deadline_param, decode_addrs, encode_addrs, parse_deadline};
pub use routing::{NodeEndpoint, RoutingSnapshot, RoutingTable};
pub use runtime::{
    ConnectReport, DetachReport, Runtime, ShutdownReport, TickReport, TopologyNode,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum NodeRole {
    Master,
    Server,
    Router,
}

impl NodeRole {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeRole::Master => "MASTER",
            NodeRole::Server => "SERVER",
            NodeRole::Router => "ROUTER",
        }
    }
}

impl fmt::Display for NodeRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for NodeRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "MASTER" => Ok(NodeRole::Master),
            "SERVER" => Ok(NodeRole::Server),
            "ROUTER" => Ok(NodeRole::Router),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

/// Lifecycle of a node. Progresses in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[repr(u8)]
pub enum NodeState {
    Initializing = 0,
    Configured = 1,
    Connected = 2,
    Exiting = 3,
    Terminated = 4,
}

impl NodeState {
    pub(crate) fn from_u8(v: u8) -> Self {
        match v {
            0 => NodeState::Initializing,
            1 => NodeState::Configured,
            2 => NodeState::Connected,
            3 => NodeState::Exiting,
            _ => NodeState::Terminated,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NodeState::Initializing => "INITIALIZING",
            NodeState::Configured => "CONFIGURED",
            NodeState::Connected => "CONNECTED",
            NodeState::Exiting => "EXITING",
            NodeState::Terminated => "TERMINATED",
        }
    }
}

impl fmt::Display for NodeState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for NodeState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            NodeState::Initializing,
            NodeState::Configured,
            NodeState::Connected,
            NodeState::Exiting,
            NodeState::Terminated,
        ]
        .into_iter()
        .find(|st| st.as_str() == s)
        .ok_or_else(|| format!("unknown state {s:?}"))
    }
}

/// Why a router gave up on a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum DropReason {
    UnknownDestination,
    Expired,
    DeadNextHop,
    UnhandledLayer,
    Terminated,
    Invalid,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::UnknownDestination => "unknown-destination",
            DropReason::Expired => "expired",
            DropReason::DeadNextHop => "dead-next-hop",
            DropReason::UnhandledLayer => "unhandled-layer",
            DropReason::Terminated => "terminated",
            DropReason::Invalid => "invalid",
        }
    }
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Outcome of one routing step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteDecision {
    Delivered,
    Forwarded(Address),
    Dropped(DropReason),
}

/// Per-runtime drop counters.
#[derive(Default)]
pub struct DropStats {
    counts: Mutex<BTreeMap<DropReason, u64>>,
}

impl DropStats {
    pub(crate) fn count(&self, reason: DropReason) {
        *self.counts.lock().entry(reason).or_default() += 1;
    }

    pub fn get(&self, reason: DropReason) -> u64 {
        self.counts.lock().get(&reason).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.lock().values().sum()
    }

    pub fn snapshot(&self) -> BTreeMap<DropReason, u64> {
        self.counts.lock().clone()
    }
}

#[derive(Debug, Clone)]
pub struct RuntimeConfig {
    pub handshake_timeout: Duration,
    pub sweep_timeout: Duration,
    pub tick_timeout: Duration,
    pub teardown_timeout: Duration,
    /// Record protocol events into the runtime's trace log.
    pub trace: bool,
    /// Stack size for node activities.
    pub stack_size: usize,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            handshake_timeout: Duration::from_secs(5),
            sweep_timeout: Duration::from_secs(5),
            tick_timeout: Duration::from_secs(5),
            teardown_timeout: Duration::from_secs(5),
            trace: true,
            stack_size: 256 * 1024,
        }
    }
}

impl RuntimeConfig {
    /// Sets every protocol timeout to `timeout`.
    pub fn with_timeouts(mut self, timeout: Duration) -> Self {
        self.handshake_timeout = timeout;
        self.sweep_timeout = timeout;
        self.tick_timeout = timeout;
        self.teardown_timeout = timeout;
        self
    }

    pub fn with_trace(mut self, trace: bool) -> Self {
        self.trace = trace;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransmissionError {
    #[error("configuration handshake of {0} timed out")]
    ConfigTimeout(Address),
    #[error("a parent endpoint is required for non-Master nodes and forbidden for the Master")]
    InvalidParent,
    #[error("the network already has a Master")]
    DuplicateMaster,
    #[error("the network has no Master")]
    NoMaster,
    #[error("connecting sweep {sweep_id} timed out; unresponsive subtrees: {unresponsive:?}")]
    SweepTimeout {
        sweep_id: u64,
        reached: usize,
        unresponsive: Vec<Address>,
    },
    #[error("node {target} is unreachable: {reason}")]
    Unreachable { target: Address, reason: String },
    #[error("node {0} is not a child")]
    NoSuchChild(Address),
    #[error("no node with address {0}")]
    UnknownNode(Address),
    #[error("delivery to {0} failed: node terminated")]
    Delivery(Address),
    #[error("node {0} has terminated")]
    NodeTerminated(Address),
    #[error("teardown timed out; forced termination of {forced:?}")]
    TeardownTimeout { forced: Vec<Address> },
    #[error("failed to start node activity: {0}")]
    Spawn(String),
}

/// The layer above transmission, installed on a node at spawn time.
///
/// `outlet`, `on_start`, `on_exit` and `on_timer` run on the node's actor
/// activity. `transit` and `undeliverable` run on the router activity.
pub trait UpperLayer: Send + Sync + 'static {
    fn on_start(&self, _node: &Node) {}

    /// Handles a delivered message of a non-transmission layer.
    fn outlet(&self, node: &Node, msg: Message);

    /// Inspects a message passing through the router before the routing
    /// decision; may redirect it.
    fn transit(&self, _node: &Node, msg: Message) -> Message {
        msg
    }

    /// Builds the response owed to the creator of a dropped message that
    /// asked for one.
    fn undeliverable(&self, _node: &Node, _msg: &Message, _reason: DropReason) -> Option<Message> {
        None
    }

    /// Called after a child subtree has been detached.
    fn on_detach(&self, _node: &Node, _removed: &[Address]) {}

    /// Called once the node's children confirmed EXIT and before the node
    /// confirms to its parent; must finish outstanding work.
    fn on_exit(&self, _node: &Node) {}

    /// Called when the node is forcibly stopped; must not block.
    fn on_abort(&self) {}

    fn next_deadline(&self) -> Option<Instant> {
        None
    }

    fn on_timer(&self, _node: &Node, _now: Instant) {}
}
