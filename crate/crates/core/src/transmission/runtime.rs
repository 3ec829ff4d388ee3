use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};
use parking_lot::{Mutex, RwLock};
use serde::Serialize;

use super::node::{router_loop, Actor, ControlEvent, ECHO_TICK, ECHO_UNDELIVERABLE};
use super::{
    DropStats, Node, NodeEndpoint, NodeRole, NodeState, RuntimeConfig, TransmissionError,
    UpperLayer,
};
use crate::message::{Action, Address, Message, Timestamp};
use crate::trace::{TraceKind, TraceLog};

/// Slack the control activity allows beyond the Master's own deadline.
const CONTROL_GRACE: Duration = Duration::from_millis(500);

pub(crate) struct Shared {
    pub config: RuntimeConfig,
    pub trace: TraceLog,
    pub stats: DropStats,
    next_address: AtomicU64,
    nodes: RwLock<BTreeMap<Address, Node>>,
}

impl Shared {
    /// Resolves an address to its endpoint, the way a thread id resolves
    /// to a message queue.
    pub fn endpoint_of(&self, address: Address) -> Option<NodeEndpoint> {
        self.nodes.read().get(&address).map(Node::endpoint)
    }
}

enum Command {
    Connect(Sender<Result<ConnectReport, TransmissionError>>),
    Shutdown(Sender<Result<ShutdownReport, TransmissionError>>),
}

struct MasterControl {
    node: Node,
    commands: Sender<Command>,
    thread: Option<thread::JoinHandle<()>>,
}

/// Outcome of a completed connecting sweep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConnectReport {
    pub sweep_id: u64,
    pub node_count: usize,
    pub members: Vec<Address>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TickReport {
    pub target: Address,
    pub state: NodeState,
    pub inbound_len: usize,
    pub delivered_len: usize,
    /// Hops the TICK took to reach the target.
    pub request_hops: usize,
    /// Hops the reply took to come back.
    pub reply_hops: usize,
}

impl TickReport {
    pub fn round_trip_hops(&self) -> usize {
        self.request_hops + self.reply_hops
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ShutdownReport {
    /// Roots of subtrees that did not confirm EXIT in time and were stopped
    /// by force.
    pub forced: Vec<Address>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DetachReport {
    pub child: Address,
    pub removed: Vec<Address>,
}

/// Rendering of the connecting tree for dumps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TopologyNode {
    pub address: Address,
    pub role: NodeRole,
    pub state: NodeState,
    pub children: Vec<TopologyNode>,
}

impl TopologyNode {
    pub fn count(&self) -> usize {
        1 + self.children.iter().map(TopologyNode::count).sum::<usize>()
    }

    /// Indented text form, one node per line.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        self.render_into(&mut out, 0);
        out
    }

    fn render_into(&self, out: &mut String, depth: usize) {
        out.push_str(&format!(
            "{}{} {} {}\n",
            "  ".repeat(depth),
            self.address,
            self.role,
            self.state
        ));
        for c in &self.children {
            c.render_into(out, depth + 1);
        }
    }
}

/// One in-process connecting network.
pub struct Runtime {
    shared: Arc<Shared>,
    master: Mutex<Option<MasterControl>>,
}

impl Runtime {
    pub fn new(config: RuntimeConfig) -> Self {
        let trace = TraceLog::new(config.trace);
        Runtime {
            shared: Arc::new(Shared {
                config,
                trace,
                stats: DropStats::default(),
                next_address: AtomicU64::new(0),
                nodes: RwLock::new(BTreeMap::new()),
            }),
            master: Mutex::new(None),
        }
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.shared.config
    }

    pub fn trace(&self) -> &TraceLog {
        &self.shared.trace
    }

    pub fn drop_stats(&self) -> &DropStats {
        &self.shared.stats
    }

    pub fn master(&self) -> Option<Node> {
        self.master.lock().as_ref().map(|m| m.node.clone())
    }

    pub fn node(&self, address: Address) -> Option<Node> {
        self.shared.nodes.read().get(&address).cloned()
    }

    pub fn nodes(&self) -> Vec<Node> {
        self.shared.nodes.read().values().cloned().collect()
    }

    /// Spawns a node. Non-Master nodes complete the CONFIG handshake with
    /// `parent` before this returns.
    pub fn spawn_node(
        &self,
        role: NodeRole,
        parent: Option<&NodeEndpoint>,
        upper: Option<Arc<dyn UpperLayer>>,
    ) -> Result<Node, TransmissionError> {
        if (role == NodeRole::Master) != parent.is_none() {
            return Err(TransmissionError::InvalidParent);
        }
        let mut master_slot = self.master.lock();
        if role == NodeRole::Master && master_slot.is_some() {
            return Err(TransmissionError::DuplicateMaster);
        }
        let address = Address(self.shared.next_address.fetch_add(1, Ordering::Relaxed));
        let (node, rx) = Node::create(address, role, parent.cloned(), upper, self.shared.clone());
        self.shared.nodes.write().insert(address, node.clone());
        node.trace(TraceKind::Spawn, || {
            let parent = parent.map(|p| p.address().to_string()).unwrap_or_else(|| "-".into());
            format!("role={role} parent={parent}")
        });

        let stack = self.shared.config.stack_size;
        let started = (|| -> std::io::Result<()> {
            let n = node.clone();
            let router = thread::Builder::new()
                .name(format!("{address}-router"))
                .stack_size(stack)
                .spawn(move || router_loop(n, rx))?;
            node.add_thread(router);
            let n = node.clone();
            let actor = thread::Builder::new()
                .name(format!("{address}-actor"))
                .stack_size(stack)
                .spawn(move || Actor::new(n).run())?;
            node.add_thread(actor);
            Ok(())
        })();
        if let Err(e) = started {
            node.force_stop();
            self.shared.nodes.write().remove(&address);
            return Err(TransmissionError::Spawn(e.to_string()));
        }

        if role == NodeRole::Master {
            node.set_master(address);
            node.set_state(NodeState::Configured);
            let control = self.start_control(node.clone())?;
            *master_slot = Some(control);
            return Ok(node);
        }
        drop(master_slot);

        // configurer: posts CONFIG to the parent and waits for CONFIG_ACK
        let (ack_tx, ack_rx) = crossbeam_channel::bounded(1);
        node.set_config_waiter(ack_tx);
        let n = node.clone();
        let timeout = self.shared.config.handshake_timeout;
        let configurer = thread::Builder::new()
            .name(format!("{address}-config"))
            .stack_size(stack)
            .spawn(move || {
                let parent = n.parent_address().expect("non-Master has a parent");
                let config = Message::of(Action::Config, parent, n.address(), vec![n.address().to_string()]);
                if n.post(config).is_err() {
                    return false;
                }
                ack_rx.recv_timeout(timeout).is_ok()
            })
            .map_err(|e| TransmissionError::Spawn(e.to_string()))?;
        let configured = configurer.join().unwrap_or(false);
        if !configured {
            node.force_stop();
            self.shared.nodes.write().remove(&address);
            return Err(TransmissionError::ConfigTimeout(address));
        }
        node.set_state(NodeState::Configured);
        Ok(node)
    }

    /// Spawns a node under `parent` while the network is running. When the
    /// network is already connected a new sweep follows, so every ancestor
    /// learns the route to the newcomer and the newcomer becomes CONNECTED.
    pub fn attach(
        &self,
        parent: &Node,
        role: NodeRole,
        upper: Option<Arc<dyn UpperLayer>>,
    ) -> Result<Node, TransmissionError> {
        if parent.state() >= NodeState::Exiting {
            return Err(TransmissionError::NodeTerminated(parent.address()));
        }
        let node = self.spawn_node(role, Some(&parent.endpoint()), upper)?;
        if self.master().is_some_and(|m| m.state() == NodeState::Connected) {
            self.start_connect()?;
        }
        Ok(node)
    }

    /// Removes `child` and its subtree from `parent`'s routing table and
    /// tears the subtree down.
    pub fn detach(&self, parent: &Node, child: Address) -> Result<DetachReport, TransmissionError> {
        let (ep, removed) = parent.detach_child(child)?;
        let deadline = Instant::now() + self.shared.config.teardown_timeout;
        let exit = Message::of(
            Action::Exit,
            child,
            parent.address(),
            vec![Timestamp::from_instant(deadline).nanos().to_string()],
        );
        if ep.enqueue(exit).is_ok() {
            if let Some(child_node) = self.node(child) {
                while child_node.state() != NodeState::Terminated && Instant::now() < deadline + CONTROL_GRACE {
                    thread::sleep(Duration::from_millis(1));
                }
            }
        }
        for addr in &removed {
            if let Some(n) = self.node(*addr) {
                if n.state() != NodeState::Terminated {
                    n.force_stop();
                }
            }
        }
        Ok(DetachReport { child, removed })
    }

    fn start_control(&self, master: Node) -> Result<MasterControl, TransmissionError> {
        let (cmd_tx, cmd_rx) = crossbeam_channel::unbounded::<Command>();
        let (event_tx, event_rx) = crossbeam_channel::unbounded::<ControlEvent>();
        master.set_control(event_tx);
        let node = master.clone();
        let config = self.shared.config.clone();
        let thread = thread::Builder::new()
            .name(format!("{}-control", master.address()))
            .stack_size(self.shared.config.stack_size)
            .spawn(move || control_loop(node, config, cmd_rx, event_rx))
            .map_err(|e| TransmissionError::Spawn(e.to_string()))?;
        Ok(MasterControl {
            node: master,
            commands: cmd_tx,
            thread: Some(thread),
        })
    }

    fn command<T>(
        &self,
        make: impl FnOnce(Sender<Result<T, TransmissionError>>) -> Command,
    ) -> Result<T, TransmissionError> {
        let (tx, rx) = crossbeam_channel::bounded(1);
        {
            let guard = self.master.lock();
            let control = guard.as_ref().ok_or(TransmissionError::NoMaster)?;
            control
                .commands
                .send(make(tx))
                .map_err(|_| TransmissionError::NodeTerminated(control.node.address()))?;
        }
        rx.recv().unwrap_or(Err(TransmissionError::NoMaster))
    }

    /// Runs a HELLO/ECHO sweep from the Master. A timed-out sweep may simply
    /// be started again.
    pub fn start_connect(&self) -> Result<ConnectReport, TransmissionError> {
        self.command(Command::Connect)
    }

    /// Health check of `target` issued from node `from`.
    pub fn tick(&self, from: Address, target: Address) -> Result<TickReport, TransmissionError> {
        self.tick_with_timeout(from, target, self.shared.config.tick_timeout)
    }

    pub fn tick_with_timeout(
        &self,
        from: Address,
        target: Address,
        timeout: Duration,
    ) -> Result<TickReport, TransmissionError> {
        let origin = self.node(from).ok_or(TransmissionError::UnknownNode(from))?;
        let msg = Message::of(Action::Tick, target, from, vec![]).with_echo(true);
        let cid = msg.correlation_id();
        let reply = origin.expect_reply(cid);
        origin.post(msg)?;
        let unreachable = |reason: String| TransmissionError::Unreachable { target, reason };
        let echo = match reply.recv_timeout(timeout) {
            Ok(m) => m,
            Err(RecvTimeoutError::Timeout) => {
                origin.cancel_reply(cid);
                return Err(unreachable("timed out".into()));
            }
            Err(RecvTimeoutError::Disconnected) => return Err(unreachable("origin terminated".into())),
        };
        match echo.param(0) {
            Some(ECHO_TICK) => {
                let num = |i: usize| echo.param(i).and_then(|s| s.parse::<usize>().ok()).unwrap_or(0);
                Ok(TickReport {
                    target,
                    state: echo
                        .param(1)
                        .and_then(|s| s.parse().ok())
                        .unwrap_or(NodeState::Terminated),
                    inbound_len: num(2),
                    delivered_len: num(3),
                    request_hops: num(4),
                    reply_hops: echo.hops(),
                })
            }
            Some(ECHO_UNDELIVERABLE) => Err(unreachable(format!(
                "{} at {}",
                echo.param(1).unwrap_or("?"),
                echo.param(2).unwrap_or("?")
            ))),
            _ => Err(unreachable("malformed reply".into())),
        }
    }

    /// Floods EXIT from the Master and waits until the whole tree has
    /// terminated, leaves first.
    pub fn shutdown(&self) -> Result<ShutdownReport, TransmissionError> {
        let result = self.command(Command::Shutdown);
        if let Some(mut control) = self.master.lock().take() {
            if let Some(t) = control.thread.take() {
                let _ = t.join();
            }
        }
        let forced = match &result {
            Ok(r) => r.forced.clone(),
            Err(TransmissionError::TeardownTimeout { forced }) => forced.clone(),
            Err(_) => Vec::new(),
        };
        for root in forced {
            self.force_subtree(root);
        }
        // anything not reached by EXIT (e.g. a half-attached node) is stopped too
        for node in self.nodes() {
            if node.state() != NodeState::Terminated {
                node.force_stop();
            }
        }
        self.join_terminated();
        result
    }

    fn force_subtree(&self, root: Address) {
        let mut stack = vec![root];
        while let Some(a) = stack.pop() {
            if let Some(n) = self.node(a) {
                stack.extend(n.children());
                n.force_stop();
            }
        }
    }

    fn join_terminated(&self) {
        let me = thread::current().id();
        for node in self.nodes() {
            for h in node.take_threads() {
                if h.thread().id() != me {
                    let _ = h.join();
                }
            }
        }
    }

    pub fn topology(&self) -> Option<TopologyNode> {
        let root = self.master()?;
        Some(self.topology_of(&root))
    }

    fn topology_of(&self, node: &Node) -> TopologyNode {
        TopologyNode {
            address: node.address(),
            role: node.role(),
            state: node.state(),
            children: node
                .children()
                .into_iter()
                .filter_map(|c| self.node(c))
                .map(|c| self.topology_of(&c))
                .collect(),
        }
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        if let Some(control) = self.master.lock().take() {
            drop(control.commands);
            if let Some(t) = control.thread {
                let _ = t.join();
            }
        }
        let nodes: Vec<Node> = std::mem::take(&mut *self.shared.nodes.write()).into_values().collect();
        for node in &nodes {
            if node.state() != NodeState::Terminated {
                node.force_stop();
            }
        }
    }
}

fn control_loop(master: Node, config: RuntimeConfig, commands: Receiver<Command>, events: Receiver<ControlEvent>) {
    let mut sweep_id = 0u64;
    while let Ok(cmd) = commands.recv() {
        match cmd {
            Command::Connect(reply) => {
                sweep_id += 1;
                let deadline = Instant::now() + config.sweep_timeout;
                let hello = Message::of(
                    Action::Hello,
                    master.address(),
                    master.address(),
                    vec![sweep_id.to_string(), Timestamp::from_instant(deadline).nanos().to_string()],
                );
                let result = match master.post(hello) {
                    Err(e) => Err(e),
                    Ok(()) => wait_sweep(&events, sweep_id, deadline + CONTROL_GRACE, master.address()),
                };
                let _ = reply.send(result);
            }
            Command::Shutdown(reply) => {
                let deadline = Instant::now() + config.teardown_timeout;
                let exit = Message::of(
                    Action::Exit,
                    master.address(),
                    master.address(),
                    vec![Timestamp::from_instant(deadline).nanos().to_string()],
                );
                let result = match master.post(exit) {
                    Err(e) => Err(e),
                    Ok(()) => wait_exit(&events, deadline + CONTROL_GRACE, master.address()),
                };
                let _ = reply.send(result);
                return;
            }
        }
    }
}

fn wait_sweep(
    events: &Receiver<ControlEvent>,
    sweep_id: u64,
    give_up: Instant,
    master: Address,
) -> Result<ConnectReport, TransmissionError> {
    loop {
        match events.recv_deadline(give_up) {
            Ok(ControlEvent::Swept {
                sweep_id: id,
                members,
                missing,
            }) if id == sweep_id => {
                return if missing.is_empty() {
                    Ok(ConnectReport {
                        sweep_id,
                        node_count: members.len(),
                        members,
                    })
                } else {
                    Err(TransmissionError::SweepTimeout {
                        sweep_id,
                        reached: members.len(),
                        unresponsive: missing,
                    })
                };
            }
            Ok(_) => continue,
            Err(_) => {
                return Err(TransmissionError::SweepTimeout {
                    sweep_id,
                    reached: 0,
                    unresponsive: vec![master],
                })
            }
        }
    }
}

fn wait_exit(
    events: &Receiver<ControlEvent>,
    give_up: Instant,
    master: Address,
) -> Result<ShutdownReport, TransmissionError> {
    loop {
        match events.recv_deadline(give_up) {
            Ok(ControlEvent::Exited { forced }) => {
                return if forced.is_empty() {
                    Ok(ShutdownReport { forced })
                } else {
                    Err(TransmissionError::TeardownTimeout { forced })
                };
            }
            Ok(_) => continue,
            Err(_) => return Err(TransmissionError::TeardownTimeout { forced: vec![master] }),
        }
    }
}
