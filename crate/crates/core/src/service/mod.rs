//! The service layer: service descriptions, hierarchical REG registration,
//! REQ matching and routing, execution and ACK correlation.
//!
//! A REQ starts out addressed to the Master. Every router it passes checks
//! the local registry (own services plus descendants'); the first match
//! redirects the REQ down the recorded route to a provider chosen
//! round-robin. A REQ that reaches the Master unmatched is answered with a
//! failed ACK, so synchronous callers always resolve.

mod description;
mod layer;
mod registry;

use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError};
use parking_lot::Mutex;
use serde::Serialize;
use thiserror::Error;

use crate::message::{Action, Address, CorrelationId, Message, Timestamp};
use crate::trace::TraceKind;
use crate::transmission::{Node, NodeEndpoint, NodeRole, NodeState, Runtime, TransmissionError};

pub use description::{ExecutionMode, ServiceDescription};
pub use layer::ServiceLayer;
pub use registry::ServiceRegistry;

pub(crate) const ACK_OK: &str = "ok";
pub(crate) const ACK_ERR: &str = "err";
pub(crate) const ERR_NO_PROVIDER: &str = "no-provider";
pub(crate) const ERR_FAILED: &str = "failed";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ServiceError {
    #[error("service {name:?} is already provided by {provider}")]
    Duplicate { name: String, provider: Address },
    #[error("a ROUTER node provides no services")]
    RouterCannotRegister,
    #[error("service name must not be empty")]
    EmptyName,
    #[error("description names provider {given} but the node is {node}")]
    WrongProvider { given: Address, node: Address },
    #[error("no provider for service {0:?}")]
    NoProvider(String),
    #[error("request {correlation_id} for {name:?} timed out")]
    Timeout { name: String, correlation_id: CorrelationId },
    #[error("service failed: {0}")]
    Failed(String),
    #[error("registration incomplete; silent subtrees: {silent:?}")]
    PartialRegistration { silent: Vec<Address> },
    #[error("operation requires the Master")]
    NotMaster,
    #[error("request handle has no response channel (asynchronous request)")]
    NoResponse,
    #[error(transparent)]
    Transmission(#[from] TransmissionError),
}

/// What a service handler produces.
#[derive(Debug, Clone, PartialEq)]
pub enum Reply {
    /// Final result, returned to the requester in the ACK.
    Done(Vec<String>),
    /// Hand the request on to another service; the eventual ACK still goes
    /// to the original requester under the original correlation id.
    Forward { service: String, params: Vec<String> },
}

/// One invocation of a service.
pub struct ServiceCall<'a> {
    pub name: &'a str,
    pub params: &'a [String],
    pub creator: Address,
    pub correlation_id: CorrelationId,
    pub provider: Address,
}

pub trait ServiceHandler: Send + Sync + 'static {
    fn call(&self, call: &ServiceCall<'_>) -> Result<Reply, String>;
}

impl<F> ServiceHandler for F
where
    F: Fn(&ServiceCall<'_>) -> Result<Reply, String> + Send + Sync + 'static,
{
    fn call(&self, call: &ServiceCall<'_>) -> Result<Reply, String> {
        self(call)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RequestMode {
    Sync,
    Async,
}

/// A submitted request. Handles of requests that asked for an ACK can be
/// waited on; the first response resolves the handle.
pub struct RequestHandle {
    name: String,
    correlation_id: CorrelationId,
    mode: RequestMode,
    submitted_at: Instant,
    reply: Option<Receiver<Message>>,
    node: Node,
}

impl RequestHandle {
    pub fn correlation_id(&self) -> CorrelationId {
        self.correlation_id
    }

    pub fn mode(&self) -> RequestMode {
        self.mode
    }

    pub fn submitted_at(&self) -> Instant {
        self.submitted_at
    }

    /// Blocks until the ACK arrives or `timeout` passes.
    pub fn wait(self, timeout: Duration) -> Result<Vec<String>, ServiceError> {
        let rx = self.reply.as_ref().ok_or(ServiceError::NoResponse)?;
        match rx.recv_timeout(timeout) {
            Ok(ack) => parse_ack(&self.name, ack),
            Err(RecvTimeoutError::Timeout) => {
                self.node.cancel_reply(self.correlation_id);
                Err(ServiceError::Timeout {
                    name: self.name.clone(),
                    correlation_id: self.correlation_id,
                })
            }
            Err(RecvTimeoutError::Disconnected) => {
                Err(TransmissionError::NodeTerminated(self.node.address()).into())
            }
        }
    }
}

pub(crate) fn parse_ack(name: &str, ack: Message) -> Result<Vec<String>, ServiceError> {
    let mut params = ack.into_params();
    match params.first().map(String::as_str) {
        Some(ACK_OK) => {
            params.remove(0);
            Ok(params)
        }
        Some(ACK_ERR) => match params.get(1).map(String::as_str) {
            Some(ERR_NO_PROVIDER) => Err(ServiceError::NoProvider(name.to_string())),
            _ => Err(ServiceError::Failed(params.get(2).cloned().unwrap_or_default())),
        },
        _ => Err(ServiceError::Failed("malformed ACK".into())),
    }
}

/// One execution of a service, as seen by the provider.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExecInterval {
    pub service: String,
    pub provider: Address,
    pub correlation_id: CorrelationId,
    pub start: Timestamp,
    pub end: Timestamp,
}

impl ExecInterval {
    pub fn overlaps(&self, other: &ExecInterval) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// Execution-interval log shared by the activities of one provider.
#[derive(Clone, Default)]
pub struct ExecutionLog {
    inner: Arc<Mutex<Vec<ExecInterval>>>,
}

impl ExecutionLog {
    pub(crate) fn push(&self, interval: ExecInterval) {
        self.inner.lock().push(interval);
    }

    pub fn snapshot(&self) -> Vec<ExecInterval> {
        self.inner.lock().clone()
    }

    pub fn for_service(&self, name: &str) -> Vec<ExecInterval> {
        self.inner.lock().iter().filter(|i| i.service == name).cloned().collect()
    }

    pub fn clear(&self) {
        self.inner.lock().clear();
    }
}

/// Number of pairwise-overlapping intervals.
pub fn count_overlaps(intervals: &[ExecInterval]) -> usize {
    let mut sorted: Vec<&ExecInterval> = intervals.iter().collect();
    sorted.sort_by_key(|i| i.start);
    let mut n = 0;
    for (i, a) in sorted.iter().enumerate() {
        for b in &sorted[i + 1..] {
            if b.start >= a.end {
                break;
            }
            n += 1;
        }
    }
    n
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RegistrationReport {
    pub round: u64,
    pub services: usize,
}

/// A node with the service layer installed.
#[derive(Clone)]
pub struct ServiceNode {
    node: Node,
    layer: Arc<ServiceLayer>,
}

impl ServiceNode {
    pub fn spawn_master(runtime: &Runtime) -> Result<ServiceNode, ServiceError> {
        Self::spawn(runtime, NodeRole::Master, None)
    }

    pub fn spawn(
        runtime: &Runtime,
        role: NodeRole,
        parent: Option<&NodeEndpoint>,
    ) -> Result<ServiceNode, ServiceError> {
        let layer = Arc::new(ServiceLayer::new(role));
        let node = runtime.spawn_node(role, parent, Some(layer.clone()))?;
        Ok(ServiceNode { node, layer })
    }

    /// Joins a running network under `parent`; services become reachable
    /// after the next registration round.
    pub fn attach(runtime: &Runtime, parent: &Node, role: NodeRole) -> Result<ServiceNode, ServiceError> {
        let layer = Arc::new(ServiceLayer::new(role));
        let node = runtime.attach(parent, role, Some(layer.clone()))?;
        Ok(ServiceNode { node, layer })
    }

    pub fn node(&self) -> &Node {
        &self.node
    }

    pub fn address(&self) -> Address {
        self.node.address()
    }

    pub fn endpoint(&self) -> NodeEndpoint {
        self.node.endpoint()
    }

    pub fn layer(&self) -> &Arc<ServiceLayer> {
        &self.layer
    }

    /// Adds a service to this node's own description list.
    pub fn register_local(
        &self,
        desc: ServiceDescription,
        handler: impl ServiceHandler,
    ) -> Result<(), ServiceError> {
        if desc.provider != self.address() {
            return Err(ServiceError::WrongProvider {
                given: desc.provider,
                node: self.address(),
            });
        }
        self.layer.register_local(desc, Arc::new(handler))
    }

    /// Convenience wrapper around [`ServiceNode::register_local`].
    pub fn provide(
        &self,
        name: &str,
        mode: ExecutionMode,
        reentrant: bool,
        handler: impl ServiceHandler,
    ) -> Result<(), ServiceError> {
        self.register_local(ServiceDescription::new(name, self.address(), mode, reentrant), handler)
    }

    pub fn local_services(&self) -> Vec<ServiceDescription> {
        self.layer.local_descriptions()
    }

    pub fn registry(&self) -> ServiceRegistry {
        self.layer.registry_snapshot()
    }

    pub fn execution_log(&self) -> ExecutionLog {
        self.layer.execution_log()
    }

    /// ACKs that arrived with no request waiting for them.
    pub fn unmatched_acks(&self) -> u64 {
        self.layer.unmatched_acks()
    }

    /// Runs a registration round from the Master.
    pub fn run_registration(&self) -> Result<RegistrationReport, ServiceError> {
        if self.node.role() != NodeRole::Master {
            return Err(ServiceError::NotMaster);
        }
        self.layer.run_registration(&self.node)
    }

    fn issue(&self, name: &str, params: Vec<String>, want_ack: bool) -> Result<RequestHandle, ServiceError> {
        if self.node.state() == NodeState::Terminated {
            return Err(TransmissionError::NodeTerminated(self.address()).into());
        }
        let master = self
            .node
            .master_address()
            .ok_or(TransmissionError::NoMaster)?;
        let mut p = Vec::with_capacity(params.len() + 1);
        p.push(name.to_string());
        p.extend(params);
        let msg = Message::of(Action::Req, master, self.address(), p).with_echo(want_ack);
        let correlation_id = msg.correlation_id();
        let reply = want_ack.then(|| self.node.expect_reply(correlation_id));
        if want_ack {
            self.layer.note_issued(correlation_id);
        }
        self.node
            .trace(TraceKind::Req, || format!("issue name={name} cid={correlation_id}"));
        if let Err(e) = self.node.post(msg) {
            self.node.cancel_reply(correlation_id);
            return Err(e.into());
        }
        Ok(RequestHandle {
            name: name.to_string(),
            correlation_id,
            mode: if want_ack { RequestMode::Sync } else { RequestMode::Async },
            submitted_at: Instant::now(),
            reply,
            node: self.node.clone(),
        })
    }

    /// Synchronous request: blocks until the ACK or `timeout`.
    pub fn call(&self, name: &str, params: Vec<String>, timeout: Duration) -> Result<Vec<String>, ServiceError> {
        self.issue(name, params, true)?.wait(timeout)
    }

    /// Asynchronous request: returns at once, no ACK is produced.
    pub fn call_async(&self, name: &str, params: Vec<String>) -> Result<RequestHandle, ServiceError> {
        self.issue(name, params, false)
    }

    /// Posts a request that will be ACKed without blocking the caller; the
    /// returned handle is waited on later.
    pub fn submit(&self, name: &str, params: Vec<String>) -> Result<RequestHandle, ServiceError> {
        self.issue(name, params, true)
    }

    /// Dispatches on `mode`: a payload for SYNC, a handle for ASYNC.
    pub fn request(
        &self,
        name: &str,
        params: Vec<String>,
        mode: RequestMode,
        timeout: Duration,
    ) -> Result<RequestOutcome, ServiceError> {
        match mode {
            RequestMode::Sync => self.call(name, params, timeout).map(RequestOutcome::Payload),
            RequestMode::Async => self.call_async(name, params).map(RequestOutcome::Handle),
        }
    }
}

pub enum RequestOutcome {
    Payload(Vec<String>),
    Handle(RequestHandle),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(start: u64, end: u64) -> ExecInterval {
        ExecInterval {
            service: "S".into(),
            provider: Address(1),
            correlation_id: CorrelationId(start),
            start: Timestamp(start),
            end: Timestamp(end),
        }
    }

    #[test]
    fn overlap_counting() {
        assert_eq!(count_overlaps(&[iv(0, 10), iv(10, 20), iv(20, 30)]), 0);
        assert_eq!(count_overlaps(&[iv(0, 10), iv(5, 15)]), 1);
        assert_eq!(count_overlaps(&[iv(0, 100), iv(5, 15), iv(20, 30)]), 2);
    }

    #[test]
    fn ack_parsing() {
        let req = Message::of(Action::Req, Address(0), Address(2), vec!["S".into()]);
        let ok = Message::reply_to(&req, Action::Ack, Address(1), vec![ACK_OK.into(), "7".into()]);
        assert_eq!(parse_ack("S", ok), Ok(vec!["7".to_string()]));
        let miss = Message::reply_to(&req, Action::Ack, Address(0), vec![ACK_ERR.into(), ERR_NO_PROVIDER.into()]);
        assert_eq!(parse_ack("S", miss), Err(ServiceError::NoProvider("S".into())));
        let failed = Message::reply_to(
            &req,
            Action::Ack,
            Address(1),
            vec![ACK_ERR.into(), ERR_FAILED.into(), "boom".into()],
        );
        assert_eq!(parse_ack("S", failed), Err(ServiceError::Failed("boom".into())));
    }
}
