use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::Sender;
use parking_lot::Mutex;

use super::{
    ExecInterval, ExecutionLog, ExecutionMode, RegistrationReport, Reply, ServiceCall,
    ServiceDescription, ServiceError, ServiceHandler, ServiceRegistry, ACK_ERR, ACK_OK,
    ERR_FAILED, ERR_NO_PROVIDER,
};
use crate::message::{Action, Address, CorrelationId, Message, Timestamp};
use crate::trace::TraceKind;
use crate::transmission::{
    child_deadline, deadline_param, decode_addrs, encode_addrs, parse_deadline, DropReason,
    MessageList, Node, NodeRole, Pop, UpperLayer,
};

const REG_COLLECT: &str = "collect";
const REG_REPORT: &str = "report";
const REG_WITHDRAW: &str = "withdraw";

struct LocalService {
    desc: ServiceDescription,
    handler: Arc<dyn ServiceHandler>,
    worker: Mutex<Option<Sender<Message>>>,
}

#[derive(Default)]
struct RegRound {
    round: u64,
    waiting: BTreeSet<Address>,
    collected: Vec<ServiceDescription>,
    silent: Vec<Address>,
    deadline: Option<Instant>,
    report: Option<Vec<String>>,
}

struct Inner {
    role: NodeRole,
    local: Mutex<BTreeMap<String, Arc<LocalService>>>,
    registry: Mutex<ServiceRegistry>,
    service_list: MessageList,
    accepting: AtomicBool,
    node: Mutex<Option<Node>>,
    exec_log: ExecutionLog,
    reg: Mutex<RegRound>,
    next_round: AtomicU64,
    reg_waiter: Mutex<Option<(u64, Sender<Result<RegistrationReport, ServiceError>>)>>,
    executor: Mutex<Option<JoinHandle<()>>>,
    spawned: Mutex<Vec<JoinHandle<()>>>,
    issued: Mutex<HashMap<CorrelationId, Instant>>,
    unmatched_acks: AtomicU64,
}

/// The service layer installed on one node.
pub struct ServiceLayer {
    inner: Arc<Inner>,
}

impl ServiceLayer {
    pub fn new(role: NodeRole) -> Self {
        ServiceLayer {
            inner: Arc::new(Inner {
                role,
                local: Mutex::new(BTreeMap::new()),
                registry: Mutex::new(ServiceRegistry::new()),
                service_list: MessageList::new(),
                accepting: AtomicBool::new(true),
                node: Mutex::new(None),
                exec_log: ExecutionLog::default(),
                reg: Mutex::new(RegRound::default()),
                next_round: AtomicU64::new(0),
                reg_waiter: Mutex::new(None),
                executor: Mutex::new(None),
                spawned: Mutex::new(Vec::new()),
                issued: Mutex::new(HashMap::new()),
                unmatched_acks: AtomicU64::new(0),
            }),
        }
    }

    pub(crate) fn register_local(
        &self,
        desc: ServiceDescription,
        handler: Arc<dyn ServiceHandler>,
    ) -> Result<(), ServiceError> {
        if self.inner.role == NodeRole::Router {
            return Err(ServiceError::RouterCannotRegister);
        }
        if desc.name.is_empty() {
            return Err(ServiceError::EmptyName);
        }
        let mut local = self.inner.local.lock();
        if local.contains_key(&desc.name) {
            return Err(ServiceError::Duplicate {
                name: desc.name,
                provider: desc.provider,
            });
        }
        let desc = ServiceDescription {
            route: vec![desc.provider],
            ..desc
        };
        local.insert(
            desc.name.clone(),
            Arc::new(LocalService {
                desc,
                handler,
                worker: Mutex::new(None),
            }),
        );
        Ok(())
    }

    pub fn local_descriptions(&self) -> Vec<ServiceDescription> {
        self.inner.local.lock().values().map(|s| s.desc.clone()).collect()
    }

    pub fn registry_snapshot(&self) -> ServiceRegistry {
        self.inner.registry.lock().clone()
    }

    pub fn execution_log(&self) -> ExecutionLog {
        self.inner.exec_log.clone()
    }

    pub fn unmatched_acks(&self) -> u64 {
        self.inner.unmatched_acks.load(Ordering::Relaxed)
    }

    /// Requests currently queued for execution on this node.
    pub fn pending_executions(&self) -> usize {
        self.inner.service_list.len()
    }

    pub(crate) fn note_issued(&self, id: CorrelationId) {
        self.inner.issued.lock().insert(id, Instant::now());
    }

    pub(crate) fn run_registration(&self, node: &Node) -> Result<RegistrationReport, ServiceError> {
        let round = self.inner.next_round.fetch_add(1, Ordering::Relaxed) + 1;
        let (tx, rx) = crossbeam_channel::bounded(1);
        *self.inner.reg_waiter.lock() = Some((round, tx));
        let timeout = node.config().sweep_timeout;
        let deadline = Instant::now() + timeout;
        let collect = Message::of(
            Action::Reg,
            node.address(),
            node.address(),
            vec![REG_COLLECT.into(), round.to_string(), deadline_param(deadline)],
        );
        node.post(collect)?;
        match rx.recv_timeout(timeout + Duration::from_millis(500)) {
            Ok(result) => result,
            Err(_) => Err(ServiceError::PartialRegistration {
                silent: vec![node.address()],
            }),
        }
    }
}

impl Inner {
    fn execute(self: &Arc<Self>, node: &Node, msg: Message) {
        let name = msg.param(0).unwrap_or_default().to_string();
        let service = self.local.lock().get(&name).cloned();
        let Some(service) = service else {
            self.reply_error(node, &msg, ERR_NO_PROVIDER, &name);
            return;
        };
        if service.desc.reentrant {
            let inner = self.clone();
            let n = node.clone();
            let spawned = thread::Builder::new()
                .name(format!("{}-{}", node.address(), name))
                .stack_size(node.config().stack_size)
                .spawn(move || inner.run_handler(&n, &service, msg));
            match spawned {
                Ok(h) => {
                    let mut all = self.spawned.lock();
                    all.retain(|h| !h.is_finished());
                    all.push(h);
                }
                Err(e) => log::error!("{}: cannot start execution: {e}", node.address()),
            }
            return;
        }
        match service.desc.mode {
            ExecutionMode::Function => self.run_handler(node, &service, msg),
            ExecutionMode::Worker => {
                let mut worker = service.worker.lock();
                if worker.is_none() {
                    let (tx, rx) = crossbeam_channel::unbounded::<Message>();
                    let inner = self.clone();
                    let n = node.clone();
                    let svc = service.clone();
                    let h = thread::Builder::new()
                        .name(format!("{}-{}-worker", node.address(), name))
                        .stack_size(node.config().stack_size)
                        .spawn(move || {
                            for m in rx {
                                inner.run_handler(&n, &svc, m);
                            }
                        });
                    match h {
                        Ok(h) => {
                            self.spawned.lock().push(h);
                            *worker = Some(tx);
                        }
                        Err(e) => {
                            drop(worker);
                            log::error!("{}: cannot start worker: {e}", node.address());
                            self.run_handler(node, &service, msg);
                            return;
                        }
                    }
                }
                if let Some(tx) = worker.as_ref() {
                    let _ = tx.send(msg);
                }
            }
        }
    }

    fn run_handler(&self, node: &Node, service: &LocalService, msg: Message) {
        let start = Timestamp::now();
        let params = &msg.params()[1..];
        let call = ServiceCall {
            name: &service.desc.name,
            params,
            creator: msg.creator(),
            correlation_id: msg.correlation_id(),
            provider: node.address(),
        };
        let result = service.handler.call(&call);
        let end = Timestamp::now();
        self.exec_log.push(ExecInterval {
            service: service.desc.name.clone(),
            provider: node.address(),
            correlation_id: msg.correlation_id(),
            start,
            end,
        });
        match result {
            Ok(Reply::Done(payload)) => {
                if msg.need_echo() {
                    let mut p = Vec::with_capacity(payload.len() + 1);
                    p.push(ACK_OK.to_string());
                    p.extend(payload);
                    let _ = node.post(Message::reply_to(&msg, Action::Ack, node.address(), p));
                }
            }
            Ok(Reply::Forward { service: next, params }) => {
                let Some(master) = node.master_address() else { return };
                let mut p = Vec::with_capacity(params.len() + 1);
                p.push(next.clone());
                p.extend(params);
                let fwd = Message::of(Action::Req, master, msg.creator(), p)
                    .with_correlation(msg.correlation_id())
                    .with_echo(msg.need_echo());
                node.trace(TraceKind::Req, || {
                    format!("forward name={next} cid={}", msg.correlation_id())
                });
                let _ = node.post(fwd);
            }
            Err(e) => {
                if msg.need_echo() {
                    self.reply_error(node, &msg, ERR_FAILED, &e);
                } else {
                    log::warn!("{}: service {} failed: {e}", node.address(), service.desc.name);
                }
            }
        }
    }

    fn reply_error(&self, node: &Node, req: &Message, kind: &str, detail: &str) {
        if !req.need_echo() {
            log::debug!("{}: {kind} for asynchronous request {}", node.address(), req.correlation_id());
            return;
        }
        let ack = Message::reply_to(
            req,
            Action::Ack,
            node.address(),
            vec![ACK_ERR.into(), kind.into(), detail.into()],
        );
        let _ = node.post(ack);
    }

    fn on_req(&self, node: &Node, msg: Message) {
        let name = msg.param(0).unwrap_or_default().to_string();
        let provided = self.local.lock().contains_key(&name);
        if !provided || !self.accepting.load(Ordering::Acquire) {
            node.trace(TraceKind::Req, || format!("miss name={name} cid={}", msg.correlation_id()));
            self.reply_error(node, &msg, ERR_NO_PROVIDER, &name);
            return;
        }
        node.trace(TraceKind::Req, || {
            format!("accept name={name} cid={} hops={}", msg.correlation_id(), msg.hops())
        });
        if let Err(msg) = self.service_list.push(msg) {
            self.reply_error(node, &msg, ERR_NO_PROVIDER, &name);
        }
    }

    fn on_ack(&self, node: &Node, msg: Message) {
        let cid = msg.correlation_id();
        let issued = self.issued.lock().remove(&cid);
        node.trace(TraceKind::Ack, || {
            let route: Vec<String> = msg.route().iter().map(ToString::to_string).collect();
            let latency = issued.map(|t| t.elapsed().as_micros()).unwrap_or(0);
            format!(
                "cid={cid} status={} route={} latency_us={latency}",
                msg.param(0).unwrap_or("?"),
                route.join(",")
            )
        });
        if !node.complete_reply(msg) {
            self.unmatched_acks.fetch_add(1, Ordering::Relaxed);
            log::debug!("{}: ACK {cid} matched no request", node.address());
        }
    }

    fn on_reg(&self, node: &Node, msg: Message) {
        match msg.param(0) {
            Some(REG_COLLECT) => {
                let round = reg_round(&msg);
                node.trace(TraceKind::Reg, || format!("collect round={round} from={}", msg.creator()));
                let mut reg = self.reg.lock();
                if round < reg.round {
                    return;
                }
                if round == reg.round {
                    if let Some(report) = reg.report.clone() {
                        drop(reg);
                        self.send_report(node, report);
                    }
                    return;
                }
                let deadline = parse_deadline(&msg, 2, node.config().sweep_timeout);
                let children = node.children();
                *reg = RegRound {
                    round,
                    waiting: children.iter().copied().collect(),
                    deadline: Some(deadline),
                    ..Default::default()
                };
                drop(reg);
                let down = deadline_param(child_deadline(deadline));
                for child in &children {
                    let collect = Message::of(
                        Action::Reg,
                        *child,
                        node.address(),
                        vec![REG_COLLECT.into(), round.to_string(), down.clone()],
                    );
                    let _ = node.post(collect);
                }
                if children.is_empty() {
                    self.complete_round(node);
                }
            }
            Some(REG_REPORT) => {
                let round = reg_round(&msg);
                let child = msg.creator();
                let mut reg = self.reg.lock();
                if round != reg.round || reg.deadline.is_none() || !reg.waiting.remove(&child) {
                    return;
                }
                reg.silent.extend(decode_addrs(msg.param(2).unwrap_or("")));
                for raw in msg.params().iter().skip(3) {
                    let Some(mut desc) = ServiceDescription::from_param(raw) else {
                        log::warn!("{}: malformed description from {child}", node.address());
                        continue;
                    };
                    node.learn_descendants(child, &desc.route);
                    desc.route.push(node.address());
                    reg.collected.push(desc);
                }
                let done = reg.waiting.is_empty();
                drop(reg);
                if done {
                    self.complete_round(node);
                }
            }
            Some(REG_WITHDRAW) => {
                let gone = decode_addrs(msg.param(1).unwrap_or(""));
                self.withdraw(node, &gone);
            }
            _ => log::warn!("{}: malformed REG", node.address()),
        }
    }

    fn complete_round(&self, node: &Node) {
        let mut reg = self.reg.lock();
        if reg.deadline.take().is_none() {
            return;
        }
        let silent_children: Vec<Address> = std::mem::take(&mut reg.waiting).into_iter().collect();
        let mut all: Vec<ServiceDescription> = self.local.lock().values().map(|s| s.desc.clone()).collect();
        all.append(&mut reg.collected);
        {
            let mut registry = self.registry.lock();
            if !silent_children.is_empty() {
                // keep what we knew about subtrees that did not answer
                let kept = registry
                    .all()
                    .into_iter()
                    .filter(|d| d.next_hop().is_some_and(|h| silent_children.contains(&h)));
                all.extend(kept);
            }
            registry.replace_all(all.iter().cloned());
        }
        let mut silent = std::mem::take(&mut reg.silent);
        silent.extend(silent_children);
        let round = reg.round;
        node.trace(TraceKind::Reg, || {
            format!("complete round={round} services={} silent={}", all.len(), encode_addrs(&silent))
        });
        if node.parent_address().is_some() {
            let mut report = vec![REG_REPORT.to_string(), round.to_string(), encode_addrs(&silent)];
            report.extend(all.iter().map(ServiceDescription::to_param));
            reg.report = Some(report.clone());
            drop(reg);
            self.send_report(node, report);
        } else {
            reg.report = Some(Vec::new());
            drop(reg);
            let waiter = self.reg_waiter.lock().take();
            if let Some((r, tx)) = waiter {
                if r == round {
                    let result = if silent.is_empty() {
                        Ok(RegistrationReport {
                            round,
                            services: all.len(),
                        })
                    } else {
                        Err(ServiceError::PartialRegistration { silent })
                    };
                    let _ = tx.send(result);
                } else {
                    *self.reg_waiter.lock() = Some((r, tx));
                }
            }
        }
    }

    /// Forgets the providers in `gone` here and at every ancestor.
    fn withdraw(&self, node: &Node, gone: &[Address]) {
        self.registry.lock().remove_providers(gone);
        node.trace(TraceKind::Reg, || format!("withdraw providers={}", encode_addrs(gone)));
        if let Some(parent) = node.parent_address() {
            let notice = Message::of(
                Action::Reg,
                parent,
                node.address(),
                vec![REG_WITHDRAW.into(), encode_addrs(gone)],
            );
            let _ = node.post(notice);
        }
    }

    fn send_report(&self, node: &Node, report: Vec<String>) {
        if let Some(parent) = node.parent_address() {
            let _ = node.post(Message::of(Action::Reg, parent, node.address(), report));
        }
    }

    fn stop_workers(&self) {
        for svc in self.local.lock().values() {
            svc.worker.lock().take();
        }
    }
}

fn reg_round(msg: &Message) -> u64 {
    msg.param(1).and_then(|s| s.parse().ok()).unwrap_or(0)
}

impl UpperLayer for ServiceLayer {
    fn on_start(&self, node: &Node) {
        *self.inner.node.lock() = Some(node.clone());
        if self.inner.role == NodeRole::Router {
            return;
        }
        let inner = self.inner.clone();
        let n = node.clone();
        let h = thread::Builder::new()
            .name(format!("{}-exec", node.address()))
            .stack_size(node.config().stack_size)
            .spawn(move || loop {
                match inner.service_list.pop(None) {
                    Pop::Message(m) => inner.execute(&n, m),
                    Pop::Closed | Pop::TimedOut => break,
                }
            });
        match h {
            Ok(h) => *self.inner.executor.lock() = Some(h),
            Err(e) => log::error!("{}: cannot start executor: {e}", node.address()),
        }
    }

    fn outlet(&self, node: &Node, msg: Message) {
        match msg.action() {
            Action::Req => self.inner.on_req(node, msg),
            Action::Ack => self.inner.on_ack(node, msg),
            Action::Reg => self.inner.on_reg(node, msg),
            other => log::warn!("{}: unexpected {other} at service layer", node.address()),
        }
    }

    fn transit(&self, node: &Node, msg: Message) -> Message {
        if msg.action() != Action::Req || Some(msg.intend()) != node.master_address() {
            return msg;
        }
        let name = msg.param(0).unwrap_or_default();
        let chosen = self.inner.registry.lock().select_provider(name);
        match chosen {
            Ok(desc) => {
                node.trace(TraceKind::Req, || {
                    format!("match name={name} provider={} cid={}", desc.provider, msg.correlation_id())
                });
                msg.redirect(desc.provider)
            }
            Err(_) => msg,
        }
    }

    fn undeliverable(&self, node: &Node, msg: &Message, reason: DropReason) -> Option<Message> {
        (msg.action() == Action::Req).then(|| {
            Message::reply_to(
                msg,
                Action::Ack,
                node.address(),
                vec![ACK_ERR.into(), ERR_NO_PROVIDER.into(), reason.as_str().into()],
            )
        })
    }

    fn on_detach(&self, node: &Node, removed: &[Address]) {
        self.inner.withdraw(node, removed);
    }

    fn on_exit(&self, node: &Node) {
        self.inner.accepting.store(false, Ordering::Release);
        self.inner.service_list.close();
        let executor = self.inner.executor.lock().take();
        if let Some(h) = executor {
            let _ = h.join();
        }
        self.inner.stop_workers();
        let spawned = std::mem::take(&mut *self.inner.spawned.lock());
        for h in spawned {
            let _ = h.join();
        }
        // anything that slipped in after the executor stopped
        for req in self.inner.service_list.close_and_drain() {
            self.inner.reply_error(node, &req, ERR_NO_PROVIDER, "exiting");
        }
        self.inner.node.lock().take();
    }

    fn on_abort(&self) {
        self.inner.accepting.store(false, Ordering::Release);
        self.inner.service_list.close();
        self.inner.stop_workers();
        self.inner.node.lock().take();
    }

    fn next_deadline(&self) -> Option<Instant> {
        self.inner.reg.lock().deadline
    }

    fn on_timer(&self, node: &Node, now: Instant) {
        if self.inner.reg.lock().deadline.is_some_and(|d| d <= now) {
            self.inner.complete_round(node);
        }
    }
}
