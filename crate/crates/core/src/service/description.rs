use std::fmt;

use serde::{Deserialize, Serialize};

use crate::message::Address;

/// How a provider runs a service.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ExecutionMode {
    /// Posted to a dedicated worker activity owned by the service.
    #[serde(alias = "Worker")]
    Worker,
    /// Invoked by the node's executor activity.
    #[serde(alias = "Function")]
    Function,
}

impl fmt::Display for ExecutionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExecutionMode::Worker => "WORKER",
            ExecutionMode::Function => "FUNCTION",
        })
    }
}

/// Advertisement of one service.
///
/// `route` starts at the provider and grows by one address per node the
/// description passes during registration, so its last element is always
/// the node holding this copy.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ServiceDescription {
    pub name: String,
    pub provider: Address,
    pub route: Vec<Address>,
    pub mode: ExecutionMode,
    pub reentrant: bool,
}

impl ServiceDescription {
    pub fn new(name: impl Into<String>, provider: Address, mode: ExecutionMode, reentrant: bool) -> Self {
        ServiceDescription {
            name: name.into(),
            provider,
            route: vec![provider],
            mode,
            reentrant,
        }
    }

    pub fn function(name: impl Into<String>, provider: Address) -> Self {
        Self::new(name, provider, ExecutionMode::Function, false)
    }

    pub fn key(&self) -> (&str, Address) {
        (&self.name, self.provider)
    }

    /// The neighbour this copy was learned from, i.e. the next hop towards
    /// the provider. `None` for a node's own services.
    pub fn next_hop(&self) -> Option<Address> {
        let n = self.route.len();
        (n >= 2).then(|| self.route[n - 2])
    }

    pub(crate) fn to_param(&self) -> String {
        serde_json::to_string(self).expect("description serializes")
    }

    pub(crate) fn from_param(s: &str) -> Option<Self> {
        serde_json::from_str(s).ok()
    }
}
