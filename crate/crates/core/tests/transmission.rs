use std::collections::{BTreeMap, HashMap, VecDeque};
use std::time::Duration;

use proptest::prelude::*;
use protonet::trace::{TraceKind, TraceRecord};
use protonet::transmission::{DropReason, Node, TransmissionError};
use protonet::{Action, Address, Message, NodeRole, NodeState, Runtime, RuntimeConfig, Timestamp};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Spawns a tree from a parent list (`parents[i] < i`, node 0 is the Master).
fn build(rt: &Runtime, parents: &[Option<usize>]) -> Vec<Node> {
    let mut nodes: Vec<Node> = Vec::with_capacity(parents.len());
    for p in parents {
        let node = match p {
            None => rt.spawn_node(NodeRole::Master, None, None).unwrap(),
            Some(p) => rt
                .spawn_node(NodeRole::Server, Some(&nodes[*p].endpoint()), None)
                .unwrap(),
        };
        nodes.push(node);
    }
    nodes
}

fn random_parents(n: usize, seed: u64) -> Vec<Option<usize>> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..n).map(|i| (i > 0).then(|| rng.gen_range(0..i))).collect()
}

/// Path length by breadth-first search over the undirected edge list.
fn bfs_distance(parents: &[Option<usize>], from: usize, to: usize) -> usize {
    let mut adj = vec![Vec::new(); parents.len()];
    for (i, p) in parents.iter().enumerate() {
        if let Some(p) = p {
            adj[i].push(*p);
            adj[*p].push(i);
        }
    }
    let mut dist = vec![usize::MAX; parents.len()];
    dist[from] = 0;
    let mut queue = VecDeque::from([from]);
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    dist[to]
}

fn terminated_at(records: &[TraceRecord]) -> HashMap<Address, Timestamp> {
    records
        .iter()
        .filter(|r| r.kind == TraceKind::State && r.detail == "TERMINATED")
        .map(|r| (r.node, r.at))
        .collect()
}

#[test]
fn connect_reaches_every_node() {
    let rt = Runtime::new(RuntimeConfig::default());
    let parents = random_parents(40, 7);
    let nodes = build(&rt, &parents);
    let report = rt.start_connect().unwrap();
    let mut expected: Vec<Address> = nodes.iter().map(Node::address).collect();
    expected.sort();
    let mut members = report.members.clone();
    members.sort();
    assert_eq!(members, expected);
    assert_eq!(report.node_count, 40);
    assert!(nodes.iter().all(|n| n.state() == NodeState::Connected));
    // the sweep teaches every node its descendants
    let master_routes = nodes[0].routing();
    assert_eq!(master_routes.children.len() + master_routes.descendants.len(), 39);
    rt.shutdown().unwrap();
}

#[test]
fn tick_hops_match_tree_distance() {
    let rt = Runtime::new(RuntimeConfig::default().with_trace(false));
    let parents = random_parents(60, 11);
    let nodes = build(&rt, &parents);
    rt.start_connect().unwrap();
    let mut rng = StdRng::seed_from_u64(3);
    for _ in 0..300 {
        let a = rng.gen_range(0..nodes.len());
        let b = rng.gen_range(0..nodes.len());
        let report = rt.tick(nodes[a].address(), nodes[b].address()).unwrap();
        let d = bfs_distance(&parents, a, b);
        assert_eq!(report.request_hops, d, "{a} -> {b}");
        assert_eq!(report.reply_hops, d, "{b} -> {a}");
        assert_eq!(report.state, NodeState::Connected);
    }
    rt.shutdown().unwrap();
}

#[test]
fn route_lists_each_forwarder_once() {
    let rt = Runtime::new(RuntimeConfig::default());
    // a chain 0-1-2-3 and a branch 0-4-5
    let parents = [None, Some(0), Some(1), Some(2), Some(0), Some(4)];
    let nodes = build(&rt, &parents);
    rt.start_connect().unwrap();
    let msg = Message::of(Action::Tick, nodes[5].address(), nodes[3].address(), vec![]).with_echo(true);
    let rx = nodes[3].expect_reply(msg.correlation_id());
    nodes[3].post(msg).unwrap();
    let echo = rx.recv_timeout(Duration::from_secs(5)).unwrap();
    let addr = |i: usize| nodes[i].address();
    assert_eq!(echo.route(), &[addr(5), addr(4), addr(0), addr(1), addr(2)]);
    assert_eq!(echo.time_to_live(), 64 - 5);
    rt.shutdown().unwrap();
}

#[test]
fn expired_message_is_dropped_and_bounced() {
    let rt = Runtime::new(RuntimeConfig::default());
    let parents = [None, Some(0), Some(1), Some(2), Some(3)];
    let nodes = build(&rt, &parents);
    rt.start_connect().unwrap();
    let msg = Message::of(Action::Tick, nodes[4].address(), nodes[0].address(), vec![])
        .with_echo(true)
        .with_ttl(2);
    let rx = nodes[0].expect_reply(msg.correlation_id());
    nodes[0].post(msg).unwrap();
    let bounce = rx.recv_timeout(Duration::from_secs(5)).unwrap();
    assert_eq!(bounce.action(), Action::Echo);
    assert_eq!(bounce.param(0), Some("UNDELIVERABLE"));
    assert_eq!(bounce.param(1), Some("expired"));
    assert_eq!(bounce.param(2), Some(nodes[2].address().to_string().as_str()));
    assert!(!bounce.need_echo());
    assert_eq!(rt.drop_stats().get(DropReason::Expired), 1);
    rt.shutdown().unwrap();
}

#[test]
fn unknown_destination_is_dropped_at_the_master() {
    let rt = Runtime::new(RuntimeConfig::default());
    let nodes = build(&rt, &[None, Some(0), Some(1)]);
    rt.start_connect().unwrap();
    let err = rt.tick(nodes[2].address(), Address(9_999)).unwrap_err();
    match err {
        TransmissionError::Unreachable { reason, .. } => {
            assert!(reason.starts_with("unknown-destination"), "{reason}");
        }
        other => panic!("unexpected {other}"),
    }
    assert_eq!(rt.drop_stats().get(DropReason::UnknownDestination), 1);
    rt.shutdown().unwrap();
}

#[test]
fn shutdown_terminates_children_before_parents() {
    let rt = Runtime::new(RuntimeConfig::default());
    let parents = random_parents(50, 23);
    let nodes = build(&rt, &parents);
    rt.start_connect().unwrap();
    let report = rt.shutdown().unwrap();
    assert!(report.forced.is_empty());
    assert!(nodes.iter().all(|n| n.state() == NodeState::Terminated));

    // go through the text form, as an external log reader would
    let records: Vec<TraceRecord> = rt
        .trace()
        .lines()
        .iter()
        .map(|l| TraceRecord::parse(l).expect("trace line parses"))
        .collect();
    let at = terminated_at(&records);
    for (i, p) in parents.iter().enumerate() {
        if let Some(p) = p {
            let child = at[&nodes[i].address()];
            let parent = at[&nodes[*p].address()];
            assert!(child <= parent, "edge {p}->{i}");
        }
    }
}

#[test]
fn sweep_reports_silent_subtree_and_can_restart() {
    let rt = Runtime::new(RuntimeConfig::default().with_timeouts(Duration::from_millis(300)));
    let nodes = build(&rt, &[None, Some(0), Some(0), Some(2)]);
    nodes[2].set_actor_suspended(true);
    match rt.start_connect() {
        Err(TransmissionError::SweepTimeout { unresponsive, reached, .. }) => {
            assert_eq!(unresponsive, vec![nodes[2].address()]);
            assert_eq!(reached, 2);
        }
        other => panic!("unexpected {other:?}"),
    }
    nodes[2].set_actor_suspended(false);
    let report = rt.start_connect().unwrap();
    assert_eq!(report.node_count, 4);
    rt.shutdown().unwrap();
}

#[test]
fn detach_removes_subtree_and_routes() {
    let rt = Runtime::new(RuntimeConfig::default());
    let nodes = build(&rt, &[None, Some(0), Some(1), Some(0)]);
    rt.start_connect().unwrap();
    let report = rt.detach(&nodes[0], nodes[1].address()).unwrap();
    let mut removed = vec![nodes[1].address(), nodes[2].address()];
    removed.sort();
    assert_eq!(report.removed, removed);
    assert_eq!(nodes[1].state(), NodeState::Terminated);
    assert_eq!(nodes[2].state(), NodeState::Terminated);
    assert_eq!(nodes[0].children(), vec![nodes[3].address()]);
    assert!(rt.tick(nodes[3].address(), nodes[2].address()).is_err());
    assert!(rt.tick(nodes[0].address(), nodes[3].address()).is_ok());
    assert!(matches!(
        rt.detach(&nodes[0], nodes[2].address()),
        Err(TransmissionError::NoSuchChild(_))
    ));

    let fresh = rt.attach(&nodes[3], NodeRole::Server, None).unwrap();
    // addresses are never reused
    assert!(fresh.address() > nodes[3].address());
    assert_eq!(fresh.state(), NodeState::Connected);
    assert_eq!(rt.tick(nodes[0].address(), fresh.address()).unwrap().request_hops, 2);
    assert_eq!(rt.start_connect().unwrap().node_count, 3);
    rt.shutdown().unwrap();
}

#[test]
fn spawn_rules() {
    let rt = Runtime::new(RuntimeConfig::default());
    assert_eq!(
        rt.spawn_node(NodeRole::Server, None, None).unwrap_err(),
        TransmissionError::InvalidParent
    );
    assert!(matches!(rt.start_connect(), Err(TransmissionError::NoMaster)));
    let m = rt.spawn_node(NodeRole::Master, None, None).unwrap();
    assert_eq!(
        rt.spawn_node(NodeRole::Master, None, None).unwrap_err(),
        TransmissionError::DuplicateMaster
    );
    let r = rt.spawn_node(NodeRole::Router, Some(&m.endpoint()), None).unwrap();
    assert_eq!(r.parent_address(), Some(m.address()));
    assert_eq!(r.master_address(), Some(m.address()));
    assert_eq!(r.state(), NodeState::Configured);
    rt.shutdown().unwrap();
    assert!(rt.tick(m.address(), r.address()).is_err());
}

#[test]
fn handshake_precedes_any_other_traffic() {
    let rt = Runtime::new(RuntimeConfig::default());
    let parents = random_parents(12, 5);
    let nodes = build(&rt, &parents);
    rt.start_connect().unwrap();
    let records = rt.trace().snapshot();
    let mut config_ack: BTreeMap<Address, Timestamp> = BTreeMap::new();
    for r in &records {
        if r.kind == TraceKind::ConfigAck {
            config_ack.entry(r.node).or_insert(r.at);
        }
    }
    for (i, p) in parents.iter().enumerate().skip(1) {
        let child = nodes[i].address();
        let ack = config_ack[&child];
        let first_hello = records
            .iter()
            .find(|r| r.node == child && r.kind == TraceKind::Hello)
            .expect("child saw HELLO");
        assert!(ack < first_hello.at);
        // acknowledged to the right parent
        let acked_from = records
            .iter()
            .find(|r| r.kind == TraceKind::ConfigAck && r.node == child)
            .and_then(|r| r.field("from").map(str::to_owned))
            .unwrap();
        assert_eq!(acked_from, nodes[p.unwrap()].address().to_string());
    }
    rt.shutdown().unwrap();
}

#[test]
fn topology_dump_lists_every_node() {
    let rt = Runtime::new(RuntimeConfig::default());
    let nodes = build(&rt, &[None, Some(0), Some(0), Some(1), Some(1), Some(2), Some(2)]);
    rt.start_connect().unwrap();
    let topo = rt.topology().unwrap();
    assert_eq!(topo.count(), 7);
    assert_eq!(topo.address, nodes[0].address());
    let text = topo.render_text();
    assert_eq!(text.lines().count(), 7);
    assert!(text.lines().all(|l| l.contains("CONNECTED")));
    rt.shutdown().unwrap();
}

proptest! {
    #[test]
    fn trace_lines_round_trip(
        at in any::<u64>(),
        node in 0u64..1_000_000,
        kind in prop::sample::select(TraceKind::ALL.to_vec()),
        detail in "[a-z]{1,6}=[a-z0-9,]{0,12}( [a-z]{1,6}=[a-z0-9]{0,8}){0,3}",
    ) {
        let rec = TraceRecord { at: Timestamp(at), node: Address(node), kind, detail };
        let parsed = TraceRecord::parse(&rec.to_string()).unwrap();
        prop_assert_eq!(parsed, rec);
    }

    #[test]
    fn routing_matches_distance_on_small_trees(n in 2usize..12, seed in any::<u64>()) {
        let rt = Runtime::new(RuntimeConfig::default().with_trace(false));
        let parents = random_parents(n, seed);
        let nodes = build(&rt, &parents);
        rt.start_connect().unwrap();
        let a = (seed % n as u64) as usize;
        for b in 0..n {
            let hops = rt.tick(nodes[a].address(), nodes[b].address()).unwrap().request_hops;
            prop_assert_eq!(hops, bfs_distance(&parents, a, b));
        }
        rt.shutdown().unwrap();
    }
}
