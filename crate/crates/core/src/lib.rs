//! An in-process protocol programming runtime.
//!
//! Every node joins a tree-shaped connecting network and talks to other
//! nodes only through protocol messages. The [`transmission`] layer builds
//! and operates the tree; the [`service`] layer registers, discovers, routes
//! and executes named services on top of it; [`bench`] times the four
//! pipeline execution models over three synthetic services.

pub mod bench;
pub mod message;
pub mod service;
pub mod topology;
pub mod trace;
pub mod transmission;

pub use message::{arrival_order, Action, Address, CorrelationId, Layer, Message, MessageError, Timestamp};
pub use transmission::{Node, NodeEndpoint, NodeRole, NodeState, Runtime, RuntimeConfig, TransmissionError};
pub use service::{ExecutionMode, Reply, ServiceDescription, ServiceError, ServiceNode};
