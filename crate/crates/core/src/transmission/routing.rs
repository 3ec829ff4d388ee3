use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU8, Ordering};
use std::sync::Arc;

use crossbeam_channel::Sender;
use serde::Serialize;

use super::{NodeState, TransmissionError};
use crate::message::{Address, Message};

pub(crate) enum Inbound {
    Message(Message),
    Stop,
}

/// The capability other nodes use to post messages into a node's inbound
/// queue. The queue is unbounded, so posting never blocks.
#[derive(Clone)]
pub struct NodeEndpoint {
    address: Address,
    tx: Sender<Inbound>,
    state: Arc<AtomicU8>,
}

impl std::fmt::Debug for NodeEndpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NodeEndpoint").field("address", &self.address).finish()
    }
}

impl NodeEndpoint {
    pub(crate) fn new(address: Address, tx: Sender<Inbound>, state: Arc<AtomicU8>) -> Self {
        NodeEndpoint { address, tx, state }
    }

    pub fn address(&self) -> Address {
        self.address
    }

    pub fn state(&self) -> NodeState {
        NodeState::from_u8(self.state.load(Ordering::Acquire))
    }

    /// Posts a message to the node. Fails once the node has terminated.
    pub fn enqueue(&self, msg: Message) -> Result<(), TransmissionError> {
        self.try_enqueue(msg).map_err(|_| TransmissionError::Delivery(self.address))
    }

    /// Like [`NodeEndpoint::enqueue`] but hands the message back on failure.
    pub(crate) fn try_enqueue(&self, msg: Message) -> Result<(), Message> {
        if self.state() == NodeState::Terminated {
            return Err(msg);
        }
        self.tx.send(Inbound::Message(msg)).map_err(|e| match e.0 {
            Inbound::Message(m) => m,
            Inbound::Stop => unreachable!(),
        })
    }

    /// Posts bypassing the terminated check; used by the node itself while
    /// it winds down.
    pub(crate) fn post_internal(&self, inbound: Inbound) -> bool {
        self.tx.send(inbound).is_ok()
    }

    pub(crate) fn inbound_len(&self) -> usize {
        self.tx.len()
    }
}

pub(crate) enum NextHop {
    Down(NodeEndpoint),
    Up(NodeEndpoint),
    Unknown,
}

/// Upward-default routing with downward shortcuts.
#[derive(Default)]
pub struct RoutingTable {
    parent: Option<NodeEndpoint>,
    children: BTreeMap<Address, NodeEndpoint>,
    descendants: HashMap<Address, Address>,
}

impl RoutingTable {
    pub(crate) fn with_parent(parent: Option<NodeEndpoint>) -> Self {
        RoutingTable {
            parent,
            ..Default::default()
        }
    }

    pub fn parent(&self) -> Option<&NodeEndpoint> {
        self.parent.as_ref()
    }

    pub fn children(&self) -> impl Iterator<Item = &NodeEndpoint> {
        self.children.values()
    }

    pub fn has_child(&self, child: Address) -> bool {
        self.children.contains_key(&child)
    }

    pub(crate) fn add_child(&mut self, child: NodeEndpoint) {
        self.descendants.remove(&child.address());
        self.children.insert(child.address(), child);
    }

    /// Records that `addrs` are reachable through `child`. Ignored when
    /// `child` is not a current child.
    pub(crate) fn learn<'a>(&mut self, child: Address, addrs: impl IntoIterator<Item = &'a Address>) {
        if !self.children.contains_key(&child) {
            return;
        }
        for &a in addrs {
            if a != child && !self.children.contains_key(&a) {
                self.descendants.insert(a, child);
            }
        }
    }

    /// Removes a child and every descendant routed through it.
    pub(crate) fn remove_child(&mut self, child: Address) -> Option<(NodeEndpoint, Vec<Address>)> {
        let ep = self.children.remove(&child)?;
        let mut removed = vec![child];
        self.descendants.retain(|&addr, &mut via| {
            if via == child {
                removed.push(addr);
                false
            } else {
                true
            }
        });
        removed.sort();
        Some((ep, removed))
    }

    /// Where a message for `dest` goes next. A message that came down from
    /// the parent is never sent back up.
    pub(crate) fn next_hop(&self, dest: Address, from_parent: bool) -> NextHop {
        if let Some(ep) = self.children.get(&dest) {
            return NextHop::Down(ep.clone());
        }
        if let Some(ep) = self.descendants.get(&dest).and_then(|c| self.children.get(c)) {
            return NextHop::Down(ep.clone());
        }
        match &self.parent {
            Some(p) if !from_parent => NextHop::Up(p.clone()),
            _ => NextHop::Unknown,
        }
    }

    pub fn snapshot(&self) -> RoutingSnapshot {
        RoutingSnapshot {
            parent: self.parent.as_ref().map(NodeEndpoint::address),
            children: self.children.keys().copied().collect(),
            descendants: self.descendants.iter().map(|(&a, &c)| (a, c)).collect(),
        }
    }
}

/// Plain-data copy of a routing table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RoutingSnapshot {
    pub parent: Option<Address>,
    pub children: Vec<Address>,
    pub descendants: BTreeMap<Address, Address>,
}

impl RoutingSnapshot {
    pub fn next_hop_for(&self, dest: Address) -> Option<Address> {
        if self.children.contains(&dest) {
            return Some(dest);
        }
        self.descendants.get(&dest).copied().or(self.parent)
    }
}
