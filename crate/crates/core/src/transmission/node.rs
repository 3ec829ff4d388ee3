use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicU8, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, Sender};
use parking_lot::Mutex;

use super::list::PauseGate;
use super::routing::{Inbound, NextHop};
use super::runtime::Shared;
use super::{
    DropReason, MessageList, NodeEndpoint, NodeRole, NodeState, Pop, RouteDecision,
    RoutingSnapshot, RoutingTable, RuntimeConfig, TransmissionError, UpperLayer,
};
use crate::message::{Action, Address, CorrelationId, Layer, Message, Timestamp};
use crate::trace::TraceKind;

pub(crate) const ECHO_HELLO: &str = "HELLO";
pub(crate) const ECHO_EXIT: &str = "EXIT";
pub(crate) const ECHO_TICK: &str = "TICK";
pub(crate) const ECHO_UNDELIVERABLE: &str = "UNDELIVERABLE";

/// Time a node keeps back from the deadline it hands to its children, so it
/// can still answer its parent when a grandchild stays silent. Capped per
/// level so deep trees are not starved.
const CHILD_SLACK_SHARE: f64 = 0.2;
const CHILD_SLACK_MAX: Duration = Duration::from_millis(25);

pub(crate) enum ControlEvent {
    Swept {
        sweep_id: u64,
        members: Vec<Address>,
        missing: Vec<Address>,
    },
    Exited {
        forced: Vec<Address>,
    },
}

pub(crate) struct NodeCore {
    address: Address,
    role: NodeRole,
    state: Arc<AtomicU8>,
    endpoint: NodeEndpoint,
    delivered: MessageList,
    routing: Mutex<RoutingTable>,
    master: Mutex<Option<Address>>,
    pending: Mutex<HashMap<CorrelationId, Sender<Message>>>,
    upper: Option<Arc<dyn UpperLayer>>,
    router_gate: PauseGate,
    actor_gate: PauseGate,
    config_ack: Mutex<Option<Sender<()>>>,
    control: Mutex<Option<Sender<ControlEvent>>>,
    threads: Mutex<Vec<JoinHandle<()>>>,
    shared: Arc<Shared>,
}

/// Handle to a node of the connecting network.
#[derive(Clone)]
pub struct Node {
    core: Arc<NodeCore>,
}

impl std::fmt::Debug for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Node")
            .field("address", &self.core.address)
            .field("role", &self.core.role)
            .field("state", &self.state())
            .finish()
    }
}

pub(crate) fn encode_addrs(addrs: &[Address]) -> String {
    addrs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub(crate) fn decode_addrs(s: &str) -> Vec<Address> {
    s.split(',').filter(|t| !t.is_empty()).filter_map(|t| t.parse().ok()).collect()
}

pub(crate) fn child_deadline(own: Instant) -> Instant {
    let now = Instant::now();
    let remaining = own.saturating_duration_since(now);
    now + remaining - remaining.mul_f64(CHILD_SLACK_SHARE).min(CHILD_SLACK_MAX)
}

pub(crate) fn parse_deadline(msg: &Message, index: usize, fallback: Duration) -> Instant {
    msg.param(index)
        .and_then(|s| s.parse::<u64>().ok())
        .map(|n| Timestamp(n).to_instant())
        .unwrap_or_else(|| Instant::now() + fallback)
}

pub(crate) fn deadline_param(at: Instant) -> String {
    Timestamp::from_instant(at).nanos().to_string()
}

impl Node {
    pub(crate) fn create(
        address: Address,
        role: NodeRole,
        parent: Option<NodeEndpoint>,
        upper: Option<Arc<dyn UpperLayer>>,
        shared: Arc<Shared>,
    ) -> (Node, Receiver<Inbound>) {
        let (tx, rx) = crossbeam_channel::unbounded();
        let state = Arc::new(AtomicU8::new(NodeState::Initializing as u8));
        let endpoint = NodeEndpoint::new(address, tx, state.clone());
        let core = NodeCore {
            address,
            role,
            state,
            endpoint,
            delivered: MessageList::new(),
            routing: Mutex::new(RoutingTable::with_parent(parent)),
            master: Mutex::new(None),
            pending: Mutex::new(HashMap::new()),
            upper,
            router_gate: PauseGate::new(),
            actor_gate: PauseGate::new(),
            config_ack: Mutex::new(None),
            control: Mutex::new(None),
            threads: Mutex::new(Vec::new()),
            shared,
        };
        (Node { core: Arc::new(core) }, rx)
    }

    pub fn address(&self) -> Address {
        self.core.address
    }

    pub fn role(&self) -> NodeRole {
        self.core.role
    }

    pub fn state(&self) -> NodeState {
        NodeState::from_u8(self.core.state.load(Ordering::Acquire))
    }

    pub fn endpoint(&self) -> NodeEndpoint {
        self.core.endpoint.clone()
    }

    pub fn routing(&self) -> RoutingSnapshot {
        self.core.routing.lock().snapshot()
    }

    pub fn parent_address(&self) -> Option<Address> {
        self.core.routing.lock().parent().map(NodeEndpoint::address)
    }

    pub fn children(&self) -> Vec<Address> {
        self.core.routing.lock().children().map(NodeEndpoint::address).collect()
    }

    /// Address of the Master, known once the node is configured.
    pub fn master_address(&self) -> Option<Address> {
        *self.core.master.lock()
    }

    pub fn inbound_len(&self) -> usize {
        self.core.endpoint.inbound_len()
    }

    pub fn delivered_len(&self) -> usize {
        self.core.delivered.len()
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.core.shared.config
    }

    pub fn upper(&self) -> Option<&Arc<dyn UpperLayer>> {
        self.core.upper.as_ref()
    }

    /// Posts a message through this node's own router.
    pub fn post(&self, msg: Message) -> Result<(), TransmissionError> {
        if self.state() == NodeState::Terminated {
            return Err(TransmissionError::NodeTerminated(self.address()));
        }
        if self.core.endpoint.post_internal(Inbound::Message(msg)) {
            Ok(())
        } else {
            Err(TransmissionError::NodeTerminated(self.address()))
        }
    }

    /// Suspends or resumes the router activity (fault injection).
    pub fn set_router_suspended(&self, suspended: bool) {
        self.core.router_gate.set(suspended);
    }

    /// Suspends or resumes the actor activity (fault injection).
    pub fn set_actor_suspended(&self, suspended: bool) {
        self.core.actor_gate.set(suspended);
    }

    /// Registers interest in the response carrying `id`.
    pub fn expect_reply(&self, id: CorrelationId) -> Receiver<Message> {
        let (tx, rx) = crossbeam_channel::bounded(1);
        self.core.pending.lock().insert(id, tx);
        rx
    }

    /// Hands a response to whoever waits on its correlation id. Returns
    /// false when nobody does.
    pub fn complete_reply(&self, msg: Message) -> bool {
        let waiter = self.core.pending.lock().remove(&msg.correlation_id());
        match waiter {
            Some(tx) => tx.send(msg).is_ok(),
            None => false,
        }
    }

    pub fn cancel_reply(&self, id: CorrelationId) {
        self.core.pending.lock().remove(&id);
    }

    pub fn learn_descendants(&self, child: Address, addrs: &[Address]) {
        self.core.routing.lock().learn(child, addrs);
    }

    pub fn trace(&self, kind: TraceKind, detail: impl FnOnce() -> String) {
        self.core.shared.trace.record(self.address(), kind, detail);
    }

    pub(crate) fn set_state(&self, state: NodeState) {
        let prev = self.core.state.swap(state as u8, Ordering::AcqRel);
        if prev != state as u8 {
            self.trace(TraceKind::State, || state.as_str().to_string());
        }
    }

    pub(crate) fn set_master(&self, master: Address) {
        *self.core.master.lock() = Some(master);
    }

    pub(crate) fn set_config_waiter(&self, tx: Sender<()>) {
        *self.core.config_ack.lock() = Some(tx);
    }

    pub(crate) fn set_control(&self, tx: Sender<ControlEvent>) {
        *self.core.control.lock() = Some(tx);
    }

    pub(crate) fn add_thread(&self, handle: JoinHandle<()>) {
        self.core.threads.lock().push(handle);
    }

    pub(crate) fn take_threads(&self) -> Vec<JoinHandle<()>> {
        std::mem::take(&mut *self.core.threads.lock())
    }

    /// Removes a child and its subtree from the routing table.
    pub(crate) fn detach_child(&self, child: Address) -> Result<(NodeEndpoint, Vec<Address>), TransmissionError> {
        let (ep, removed) = self
            .core
            .routing
            .lock()
            .remove_child(child)
            .ok_or(TransmissionError::NoSuchChild(child))?;
        if let Some(upper) = &self.core.upper {
            upper.on_detach(self, &removed);
        }
        Ok((ep, removed))
    }

    /// Stops the node without the EXIT protocol. Safe to call from any thread.
    pub(crate) fn force_stop(&self) {
        self.set_state(NodeState::Terminated);
        if let Some(upper) = &self.core.upper {
            upper.on_abort();
        }
        self.core.pending.lock().clear();
        self.core.delivered.close();
        self.core.endpoint.post_internal(Inbound::Stop);
        self.core.router_gate.set(false);
        self.core.actor_gate.set(false);
    }

    /// Routes one message from this node: deliver locally, forward one hop,
    /// or drop.
    pub fn route(&self, msg: Message) -> RouteDecision {
        if msg.validate().is_err() {
            return self.drop_message(msg, DropReason::Invalid);
        }
        let msg = match (&self.core.upper, msg.layer()) {
            (Some(upper), layer) if layer != Layer::Transmission => upper.transit(self, msg),
            _ => msg,
        };
        let me = self.address();
        if msg.intend() == me {
            if self.state() == NodeState::Terminated {
                return self.drop_message(msg, DropReason::Terminated);
            }
            let cid = msg.correlation_id();
            self.trace(TraceKind::Route, || format!("deliver cid={cid}"));
            return match self.core.delivered.push(msg) {
                Ok(()) => RouteDecision::Delivered,
                Err(msg) => self.drop_message(msg, DropReason::Terminated),
            };
        }
        let from_parent = {
            let table = self.core.routing.lock();
            let parent = table.parent().map(NodeEndpoint::address);
            parent.is_some() && msg.route().last().copied() == parent
        };
        let next = self.core.routing.lock().next_hop(msg.intend(), from_parent);
        let next = match next {
            NextHop::Down(ep) | NextHop::Up(ep) => ep,
            NextHop::Unknown => return self.drop_message(msg, DropReason::UnknownDestination),
        };
        if msg.time_to_live() == 0 {
            return self.drop_message(msg, DropReason::Expired);
        }
        let msg = msg.hop(me).expect("ttl checked");
        let cid = msg.correlation_id();
        match next.try_enqueue(msg) {
            Ok(()) => {
                self.trace(TraceKind::Route, || {
                    format!("forward next={} cid={cid}", next.address())
                });
                RouteDecision::Forwarded(next.address())
            }
            Err(msg) => self.drop_message(msg, DropReason::DeadNextHop),
        }
    }

    fn drop_message(&self, msg: Message, reason: DropReason) -> RouteDecision {
        self.core.shared.stats.count(reason);
        log::debug!("{} dropped ({reason}): {msg}", self.address());
        self.trace(TraceKind::Drop, || {
            format!("reason={reason} cid={} {}/{}", msg.correlation_id(), msg.layer(), msg.action())
        });
        if msg.need_echo() {
            let bounce = match msg.layer() {
                Layer::Transmission => Some(Message::reply_to(
                    &msg,
                    Action::Echo,
                    self.address(),
                    vec![
                        ECHO_UNDELIVERABLE.into(),
                        reason.as_str().into(),
                        self.address().to_string(),
                    ],
                )),
                _ => self
                    .core
                    .upper
                    .as_ref()
                    .and_then(|u| u.undeliverable(self, &msg, reason)),
            };
            if let Some(bounce) = bounce {
                // bounces never ask for a response, so this cannot recurse further
                self.route(bounce.with_echo(false));
            }
        }
        RouteDecision::Dropped(reason)
    }
}

pub(crate) fn router_loop(node: Node, rx: Receiver<Inbound>) {
    while let Ok(inbound) = rx.recv() {
        node.core.router_gate.pass();
        match inbound {
            Inbound::Message(msg) => {
                node.route(msg);
            }
            Inbound::Stop => break,
        }
    }
    // late arrivals still get routed (or dropped with a bounce) before the
    // queue disappears
    while let Ok(Inbound::Message(msg)) = rx.try_recv() {
        node.route(msg);
    }
}

struct HelloState {
    sweep_id: u64,
    waiting: BTreeSet<Address>,
    members: Vec<Address>,
    missing: Vec<Address>,
    deadline: Option<Instant>,
    reply: Option<Vec<String>>,
}

struct ExitState {
    waiting: BTreeSet<Address>,
    forced: Vec<Address>,
    deadline: Instant,
}

pub(crate) struct Actor {
    node: Node,
    hello: HelloState,
    exit: Option<ExitState>,
    finished: bool,
}

impl Actor {
    pub fn new(node: Node) -> Self {
        Actor {
            node,
            hello: HelloState {
                sweep_id: 0,
                waiting: BTreeSet::new(),
                members: Vec::new(),
                missing: Vec::new(),
                deadline: None,
                reply: None,
            },
            exit: None,
            finished: false,
        }
    }

    pub fn run(mut self) {
        if let Some(upper) = self.node.core.upper.clone() {
            upper.on_start(&self.node);
        }
        while !self.finished {
            self.node.core.actor_gate.pass();
            let deadline = [
                self.hello.deadline,
                self.exit.as_ref().map(|e| e.deadline),
                self.node.core.upper.as_ref().and_then(|u| u.next_deadline()),
            ]
            .into_iter()
            .flatten()
            .min();
            match self.node.core.delivered.pop(deadline) {
                Pop::Message(msg) => {
                    // a suspension that began while waiting applies to this message too
                    self.node.core.actor_gate.pass();
                    if self.node.state() == NodeState::Terminated {
                        break;
                    }
                    self.handle(msg);
                }
                Pop::TimedOut => {}
                Pop::Closed => break,
            }
            self.check_timers();
        }
    }

    fn check_timers(&mut self) {
        let now = Instant::now();
        if self.hello.deadline.is_some_and(|d| d <= now) {
            let silent: Vec<Address> = std::mem::take(&mut self.hello.waiting).into_iter().collect();
            self.hello.missing.extend(silent);
            self.complete_hello();
        }
        if self.exit.as_ref().is_some_and(|e| e.deadline <= now) {
            if let Some(exit) = &mut self.exit {
                let silent: Vec<Address> = std::mem::take(&mut exit.waiting).into_iter().collect();
                exit.forced.extend(silent);
            }
            self.finish_exit();
            return;
        }
        if let Some(upper) = self.node.core.upper.clone() {
            if upper.next_deadline().is_some_and(|d| d <= now) {
                upper.on_timer(&self.node, now);
            }
        }
    }

    fn handle(&mut self, msg: Message) {
        if msg.layer() != Layer::Transmission {
            match self.node.core.upper.clone() {
                Some(upper) => {
                    self.node.trace(TraceKind::Outlet, || {
                        format!("{}/{} cid={}", msg.layer(), msg.action(), msg.correlation_id())
                    });
                    upper.outlet(&self.node, msg);
                }
                None => {
                    self.node.drop_message(msg, DropReason::UnhandledLayer);
                }
            }
            return;
        }
        match msg.action() {
            Action::Config => self.on_config(msg),
            Action::ConfigAck => self.on_config_ack(msg),
            Action::Hello => self.on_hello(msg),
            Action::Echo => self.on_echo(msg),
            Action::Tick => self.on_tick(msg),
            Action::Exit => self.on_exit(msg),
            _ => unreachable!("validated transmission action"),
        }
    }

    fn on_config(&mut self, msg: Message) {
        let child = msg.creator();
        let node = &self.node;
        node.trace(TraceKind::Config, || format!("from={child}"));
        let Some(ep) = node.core.shared.endpoint_of(child) else {
            log::warn!("{} got CONFIG from unknown node {child}", node.address());
            return;
        };
        node.core.routing.lock().add_child(ep);
        let master = node.master_address().unwrap_or(node.address());
        let ack = Message::reply_to(&msg, Action::ConfigAck, node.address(), vec![master.to_string()]);
        let _ = node.post(ack);
    }

    fn on_config_ack(&mut self, msg: Message) {
        if let Some(master) = msg.param(0).and_then(|s| s.parse().ok()) {
            self.node.set_master(master);
        }
        self.node.trace(TraceKind::ConfigAck, || format!("from={}", msg.creator()));
        if let Some(tx) = self.node.core.config_ack.lock().take() {
            let _ = tx.send(());
        }
    }

    fn on_hello(&mut self, msg: Message) {
        let Some(sweep_id) = msg.param(0).and_then(|s| s.parse::<u64>().ok()) else {
            return;
        };
        let node = self.node.clone();
        node.trace(TraceKind::Hello, || format!("sweep={sweep_id} from={}", msg.creator()));
        if sweep_id < self.hello.sweep_id {
            return;
        }
        if sweep_id == self.hello.sweep_id {
            // duplicate of the current sweep: answer again if done, never re-forward
            if let Some(reply) = self.hello.reply.clone() {
                self.send_echo(reply, sweep_id);
            }
            return;
        }
        let deadline = parse_deadline(&msg, 1, node.config().sweep_timeout);
        let children = node.children();
        self.hello = HelloState {
            sweep_id,
            waiting: children.iter().copied().collect(),
            members: Vec::new(),
            missing: Vec::new(),
            deadline: Some(deadline),
            reply: None,
        };
        let down = deadline_param(child_deadline(deadline));
        for child in children {
            let hello = Message::of(
                Action::Hello,
                child,
                node.address(),
                vec![sweep_id.to_string(), down.clone()],
            );
            let _ = node.post(hello);
        }
        if self.hello.waiting.is_empty() {
            self.complete_hello();
        }
    }

    fn complete_hello(&mut self) {
        self.hello.deadline = None;
        let node = self.node.clone();
        if node.state() == NodeState::Configured {
            node.set_state(NodeState::Connected);
        }
        let mut members = vec![node.address()];
        members.extend(self.hello.members.iter().copied());
        let missing = self.hello.missing.clone();
        let sweep_id = self.hello.sweep_id;
        if node.core.routing.lock().parent().is_some() {
            let reply = vec![
                ECHO_HELLO.to_string(),
                sweep_id.to_string(),
                encode_addrs(&members),
                encode_addrs(&missing),
            ];
            self.hello.reply = Some(reply.clone());
            self.send_echo(reply, sweep_id);
        } else {
            self.hello.reply = Some(Vec::new());
            node.trace(TraceKind::Echo, || format!("kind=HELLO sweep={sweep_id} to=control"));
            if let Some(tx) = node.core.control.lock().as_ref() {
                let _ = tx.send(ControlEvent::Swept {
                    sweep_id,
                    members,
                    missing,
                });
            }
        }
    }

    fn send_echo(&self, params: Vec<String>, sweep_id: u64) {
        let node = &self.node;
        let Some(parent) = node.parent_address() else {
            return;
        };
        node.trace(TraceKind::Echo, || format!("kind=HELLO sweep={sweep_id} to={parent}"));
        let _ = node.post(Message::of(Action::Echo, parent, node.address(), params));
    }

    fn on_echo(&mut self, msg: Message) {
        match msg.param(0) {
            Some(ECHO_HELLO) => {
                let child = msg.creator();
                let sweep_id = msg.param(1).and_then(|s| s.parse::<u64>().ok());
                if sweep_id != Some(self.hello.sweep_id) || !self.hello.waiting.remove(&child) {
                    return;
                }
                let members = decode_addrs(msg.param(2).unwrap_or(""));
                let missing = decode_addrs(msg.param(3).unwrap_or(""));
                self.node.learn_descendants(child, &members);
                self.hello.members.extend(members);
                self.hello.missing.extend(missing);
                if self.hello.waiting.is_empty() && self.hello.deadline.is_some() {
                    self.complete_hello();
                }
            }
            Some(ECHO_EXIT) => {
                let child = msg.creator();
                self.node.trace(TraceKind::Echo, || format!("kind=EXIT from={child}"));
                let Some(exit) = &mut self.exit else { return };
                if !exit.waiting.remove(&child) {
                    return;
                }
                exit.forced.extend(decode_addrs(msg.param(1).unwrap_or("")));
                if exit.waiting.is_empty() {
                    self.finish_exit();
                }
            }
            _ => {
                if !self.node.complete_reply(msg) {
                    log::debug!("{}: unmatched ECHO", self.node.address());
                }
            }
        }
    }

    fn on_tick(&mut self, msg: Message) {
        let node = &self.node;
        node.trace(TraceKind::Tick, || format!("from={} hops={}", msg.creator(), msg.hops()));
        let reply = Message::reply_to(
            &msg,
            Action::Echo,
            node.address(),
            vec![
                ECHO_TICK.into(),
                node.state().as_str().into(),
                node.inbound_len().to_string(),
                node.delivered_len().to_string(),
                msg.hops().to_string(),
            ],
        );
        let _ = node.post(reply);
    }

    fn on_exit(&mut self, msg: Message) {
        let node = self.node.clone();
        node.trace(TraceKind::Exit, || format!("from={}", msg.creator()));
        if self.exit.is_some() || node.state() >= NodeState::Exiting {
            return;
        }
        node.set_state(NodeState::Exiting);
        let deadline = parse_deadline(&msg, 0, node.config().teardown_timeout);
        let children = node.children();
        let down = deadline_param(child_deadline(deadline));
        for &child in &children {
            let exit = Message::of(Action::Exit, child, node.address(), vec![down.clone()]);
            let _ = node.post(exit);
        }
        self.exit = Some(ExitState {
            waiting: children.into_iter().collect(),
            forced: Vec::new(),
            deadline,
        });
        if self.exit.as_ref().is_some_and(|e| e.waiting.is_empty()) {
            self.finish_exit();
        }
    }

    fn finish_exit(&mut self) {
        let Some(exit) = self.exit.take() else { return };
        let node = self.node.clone();
        if let Some(upper) = &node.core.upper {
            upper.on_exit(&node);
        }
        node.set_state(NodeState::Terminated);
        for leftover in node.core.delivered.close_and_drain() {
            node.drop_message(leftover, DropReason::Terminated);
        }
        node.core.pending.lock().clear();
        let forced = exit.forced;
        match node.parent_address() {
            Some(parent) => {
                node.trace(TraceKind::Echo, || format!("kind=EXIT to={parent}"));
                let confirm = Message::of(
                    Action::Echo,
                    parent,
                    node.address(),
                    vec![ECHO_EXIT.into(), encode_addrs(&forced)],
                );
                node.core.endpoint.post_internal(Inbound::Message(confirm));
            }
            None => {
                node.trace(TraceKind::Echo, || "kind=EXIT to=control".to_string());
                if let Some(tx) = node.core.control.lock().as_ref() {
                    let _ = tx.send(ControlEvent::Exited { forced });
                }
            }
        }
        node.core.endpoint.post_internal(Inbound::Stop);
        self.finished = true;
    }
}
