//! Declarative network descriptions and the code that builds them.
//!
//! A topology is a list of node records `{id, role, parent, services}`;
//! the same format is used by the CLI config file, the demo and the tests.

use std::collections::{BTreeMap, HashMap};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::stage_handler;
use crate::message::Address;
use crate::service::{ExecutionMode, ServiceError, ServiceNode};
use crate::transmission::{ConnectReport, NodeRole, Runtime, RuntimeConfig, ShutdownReport};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceSpec {
    pub name: String,
    #[serde(default = "default_fmi")]
    pub fmi: u64,
    #[serde(default = "default_mode")]
    pub mode: ExecutionMode,
    #[serde(default)]
    pub reentrant: bool,
}

fn default_fmi() -> u64 {
    1
}

fn default_mode() -> ExecutionMode {
    ExecutionMode::Function
}

impl ServiceSpec {
    pub fn function(name: impl Into<String>, fmi: u64) -> Self {
        ServiceSpec {
            name: name.into(),
            fmi,
            mode: ExecutionMode::Function,
            reentrant: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    pub role: String,
    #[serde(default)]
    pub parent: Option<String>,
    #[serde(default)]
    pub services: Vec<ServiceSpec>,
}

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("cannot parse topology: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("node {id:?}: {reason}")]
    Invalid { id: String, reason: String },
    #[error("topology needs exactly one MASTER, found {0}")]
    MasterCount(usize),
    #[error("nodes {0:?} are not connected to the MASTER")]
    Disconnected(Vec<String>),
    #[error(transparent)]
    Service(#[from] ServiceError),
}

/// Shape of a generated random tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreeShape {
    /// Every new node picks a uniformly random earlier node as parent.
    Recursive,
    /// Prefers extending the newest node, producing long chains up to
    /// `max_depth`.
    Deep { max_depth: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TopologySpec {
    pub nodes: Vec<NodeSpec>,
}

impl TopologySpec {
    pub fn from_json(text: &str) -> Result<Self, TopologyError> {
        let spec: TopologySpec = serde_json::from_str(text)?;
        spec.build_order()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("topology serializes")
    }

    /// Indices of `nodes` with every parent before its children.
    pub fn build_order(&self) -> Result<Vec<usize>, TopologyError> {
        let mut index = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if index.insert(n.id.as_str(), i).is_some() {
                return Err(invalid(&n.id, "duplicate id"));
            }
        }
        let mut masters = 0;
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        let mut root = None;
        for (i, n) in self.nodes.iter().enumerate() {
            let role: NodeRole = n.role.parse().map_err(|e: String| invalid(&n.id, &e))?;
            if role == NodeRole::Router && !n.services.is_empty() {
                return Err(invalid(&n.id, "a ROUTER provides no services"));
            }
            match (role, &n.parent) {
                (NodeRole::Master, None) => {
                    masters += 1;
                    root = Some(i);
                }
                (NodeRole::Master, Some(_)) => return Err(invalid(&n.id, "the MASTER has no parent")),
                (_, None) => return Err(invalid(&n.id, "missing parent")),
                (_, Some(p)) => {
                    let pi = *index
                        .get(p.as_str())
                        .ok_or_else(|| invalid(&n.id, &format!("unknown parent {p:?}")))?;
                    children[pi].push(i);
                }
            }
        }
        if masters != 1 {
            return Err(TopologyError::MasterCount(masters));
        }
        let mut order = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![root.expect("one master")];
        while let Some(i) = stack.pop() {
            order.push(i);
            stack.extend(children[i].iter().rev());
        }
        if order.len() != self.nodes.len() {
            let mut seen = vec![false; self.nodes.len()];
            for &i in &order {
                seen[i] = true;
            }
            let rest = (0..self.nodes.len())
                .filter(|&i| !seen[i])
                .map(|i| self.nodes[i].id.clone())
                .collect();
            return Err(TopologyError::Disconnected(rest));
        }
        Ok(order)
    }

    /// Complete binary tree of `n` nodes: a MASTER, SERVERs below, no
    /// services.
    pub fn binary_tree(n: usize) -> Self {
        let nodes = (0..n.max(1))
            .map(|i| NodeSpec {
                id: format!("v{i}"),
                role: if i == 0 { "MASTER" } else { "SERVER" }.into(),
                parent: (i > 0).then(|| format!("v{}", (i - 1) / 2)),
                services: Vec::new(),
            })
            .collect();
        TopologySpec { nodes }
    }

    /// The evaluation network: Service1..3 hosted on three SERVERs under the
    /// Master, plus a second Service2 provider when `super_pipeline`.
    pub fn evaluation(fmi: [u64; 3], super_pipeline: bool) -> Self {
        let mut nodes = vec![NodeSpec {
            id: "master".into(),
            role: "MASTER".into(),
            parent: None,
            services: Vec::new(),
        }];
        let mut server = |id: &str, name: &str, fmi: u64| {
            nodes.push(NodeSpec {
                id: id.into(),
                role: "SERVER".into(),
                parent: Some("master".into()),
                services: vec![ServiceSpec::function(name, fmi)],
            })
        };
        server("s1", "Service1", fmi[0]);
        server("s2", "Service2", fmi[1]);
        server("s3", "Service3", fmi[2]);
        if super_pipeline {
            server("s2b", "Service2", fmi[1]);
        }
        TopologySpec { nodes }
    }

    /// A seeded random tree of `n` nodes. About one node in five is a
    /// ROUTER; SERVERs offer up to two services drawn from `svc0..svc7`.
    pub fn random_tree(n: usize, seed: u64, shape: TreeShape) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let n = n.max(1);
        let mut depth = vec![0usize; n];
        let mut nodes = Vec::with_capacity(n);
        nodes.push(NodeSpec {
            id: "v0".into(),
            role: "MASTER".into(),
            parent: None,
            services: Vec::new(),
        });
        for i in 1..n {
            let parent = match shape {
                TreeShape::Recursive => rng.gen_range(0..i),
                TreeShape::Deep { max_depth } => {
                    if depth[i - 1] < max_depth && rng.gen_bool(0.7) {
                        i - 1
                    } else {
                        rng.gen_range(0..i)
                    }
                }
            };
            let parent = match shape {
                TreeShape::Deep { max_depth } if depth[parent] >= max_depth => 0,
                _ => parent,
            };
            depth[i] = depth[parent] + 1;
            let router = rng.gen_bool(0.2);
            let mut services = Vec::new();
            if !router {
                let count = rng.gen_range(0..=2);
                let mut names: Vec<String> = (0..count).map(|_| format!("svc{}", rng.gen_range(0..8))).collect();
                names.sort();
                names.dedup();
                services = names.into_iter().map(|s| ServiceSpec::function(s, 1)).collect();
            }
            nodes.push(NodeSpec {
                id: format!("v{i}"),
                role: if router { "ROUTER" } else { "SERVER" }.into(),
                parent: Some(format!("v{parent}")),
                services,
            });
        }
        TopologySpec { nodes }
    }

    /// Spawns every node under `runtime` in parent-first order and installs
    /// the declared services, each burning its `fmi` count.
    pub fn build(&self, runtime: Runtime) -> Result<Network, TopologyError> {
        let order = self.build_order()?;
        let mut by_id: BTreeMap<String, ServiceNode> = BTreeMap::new();
        let mut ids = Vec::with_capacity(order.len());
        let mut master = None;
        for i in order {
            let spec = &self.nodes[i];
            let role: NodeRole = spec.role.parse().map_err(|e: String| invalid(&spec.id, &e))?;
            let parent = spec.parent.as_ref().map(|p| by_id[p].endpoint());
            let node = ServiceNode::spawn(&runtime, role, parent.as_ref())?;
            for s in &spec.services {
                node.provide(&s.name, s.mode, s.reentrant, stage_handler(s.fmi.max(1)))?;
            }
            if role == NodeRole::Master {
                master = Some(node.clone());
            }
            ids.push((spec.id.clone(), node.address()));
            by_id.insert(spec.id.clone(), node);
        }
        Ok(Network {
            runtime,
            master: master.expect("validated"),
            nodes: by_id,
            ids,
        })
    }
}

fn invalid(id: &str, reason: &str) -> TopologyError {
    TopologyError::Invalid {
        id: id.to_string(),
        reason: reason.to_string(),
    }
}

/// A running network built from a [`TopologySpec`].
pub struct Network {
    runtime: Runtime,
    master: ServiceNode,
    nodes: BTreeMap<String, ServiceNode>,
    ids: Vec<(String, Address)>,
}

impl Network {
    /// Builds `spec` in a fresh runtime, connects and registers.
    pub fn start(spec: &TopologySpec, config: RuntimeConfig) -> Result<Network, TopologyError> {
        let net = spec.build(Runtime::new(config))?;
        net.connect()?;
        net.master.run_registration()?;
        Ok(net)
    }

    pub fn connect(&self) -> Result<ConnectReport, TopologyError> {
        Ok(self
            .runtime
            .start_connect()
            .map_err(ServiceError::from)?)
    }

    pub fn runtime(&self) -> &Runtime {
        &self.runtime
    }

    pub fn master(&self) -> &ServiceNode {
        &self.master
    }

    pub fn node(&self, id: &str) -> Option<&ServiceNode> {
        self.nodes.get(id)
    }

    /// `(id, address)` pairs in build order.
    pub fn ids(&self) -> &[(String, Address)] {
        &self.ids
    }

    pub fn id_of(&self, address: Address) -> Option<&str> {
        self.ids.iter().find(|(_, a)| *a == address).map(|(id, _)| id.as_str())
    }

    pub fn shutdown(&self) -> Result<ShutdownReport, TopologyError> {
        Ok(self.runtime.shutdown().map_err(ServiceError::from)?)
    }
}
