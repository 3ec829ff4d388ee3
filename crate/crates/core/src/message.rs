//! The protocol message record and the vocabulary shared by every layer.

use std::cmp::Ordering;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Hop budget given to every freshly constructed message.
pub const DEFAULT_TTL: u32 = 64;

/// Address of a node in the connecting network.
///
/// Addresses are handed out by the runtime from a monotone counter, so they
/// are totally ordered and never reused within one runtime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Address(pub u64);

impl Address {
    pub fn id(self) -> u64 {
        self.0
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl std::str::FromStr for Address {
    type Err = MessageError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.strip_prefix('n')
            .and_then(|rest| rest.parse::<u64>().ok())
            .map(Address)
            .ok_or_else(|| MessageError::BadAddress(s.to_string()))
    }
}

/// Monotonic timestamp in nanoseconds since the first clock read in this process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Timestamp(pub u64);

fn epoch() -> Instant {
    static EPOCH: OnceLock<Instant> = OnceLock::new();
    *EPOCH.get_or_init(Instant::now)
}

impl Timestamp {
    pub fn now() -> Self {
        Timestamp(epoch().elapsed().as_nanos() as u64)
    }

    pub fn from_instant(at: Instant) -> Self {
        Timestamp(at.saturating_duration_since(epoch()).as_nanos() as u64)
    }

    pub fn to_instant(self) -> Instant {
        epoch() + Duration::from_nanos(self.0)
    }

    pub fn nanos(self) -> u64 {
        self.0
    }
}

/// Token pairing a request with its response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CorrelationId(pub u64);

impl CorrelationId {
    /// Draws a process-wide unique id.
    pub fn fresh() -> Self {
        static NEXT: AtomicU64 = AtomicU64::new(1);
        CorrelationId(NEXT.fetch_add(1, AtomicOrdering::Relaxed))
    }
}

impl fmt::Display for CorrelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layer {
    Transmission,
    Service,
    Domain,
}

impl Layer {
    pub const ALL: [Layer; 3] = [Layer::Transmission, Layer::Service, Layer::Domain];

    pub fn as_str(self) -> &'static str {
        match self {
            Layer::Transmission => "TRANSMISSION",
            Layer::Service => "SERVICE",
            Layer::Domain => "DOMAIN",
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Config,
    ConfigAck,
    Hello,
    Echo,
    Tick,
    Exit,
    Reg,
    Req,
    Ack,
}

impl Action {
    pub const ALL: [Action; 9] = [
        Action::Config,
        Action::ConfigAck,
        Action::Hello,
        Action::Echo,
        Action::Tick,
        Action::Exit,
        Action::Reg,
        Action::Req,
        Action::Ack,
    ];

    /// The only layer this action may travel on.
    pub fn layer(self) -> Layer {
        match self {
            Action::Config
            | Action::ConfigAck
            | Action::Hello
            | Action::Echo
            | Action::Tick
            | Action::Exit => Layer::Transmission,
            Action::Reg | Action::Req | Action::Ack => Layer::Service,
        }
    }

    pub fn is_valid_for(self, layer: Layer) -> bool {
        self.layer() == layer
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Action::Config => "CONFIG",
            Action::ConfigAck => "CONFIG_ACK",
            Action::Hello => "HELLO",
            Action::Echo => "ECHO",
            Action::Tick => "TICK",
            Action::Exit => "EXIT",
            Action::Reg => "REG",
            Action::Req => "REQ",
            Action::Ack => "ACK",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MessageError {
    #[error("action {action} is not valid on layer {layer}")]
    LayerMismatch { layer: Layer, action: Action },
    #[error("message expired: time to live exhausted")]
    Expired,
    #[error("malformed address {0:?}")]
    BadAddress(String),
}

/// A protocol message.
///
/// Messages move between nodes by value; a message is owned by exactly one
/// queue or activity at a time. Apart from [`Message::hop`] and
/// [`Message::redirect`], both of which consume the message, the record is
/// never changed after construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    layer: Layer,
    action: Action,
    intend: Address,
    creator: Address,
    need_echo: bool,
    time_to_live: u32,
    create_time: Timestamp,
    correlation_id: CorrelationId,
    route: Vec<Address>,
    params: Vec<String>,
}

impl Message {
    pub fn new(
        layer: Layer,
        action: Action,
        intend: Address,
        creator: Address,
        params: Vec<String>,
    ) -> Result<Self, MessageError> {
        if !action.is_valid_for(layer) {
            return Err(MessageError::LayerMismatch { layer, action });
        }
        Ok(Message {
            layer,
            action,
            intend,
            creator,
            need_echo: false,
            time_to_live: DEFAULT_TTL,
            create_time: Timestamp::now(),
            correlation_id: CorrelationId::fresh(),
            route: Vec::new(),
            params,
        })
    }

    /// Builds a message whose layer is implied by the action.
    pub fn of(action: Action, intend: Address, creator: Address, params: Vec<String>) -> Self {
        Message::new(action.layer(), action, intend, creator, params)
            .expect("action implies its own layer")
    }

    /// A response to `request`: same correlation id, addressed to its creator.
    pub fn reply_to(request: &Message, action: Action, from: Address, params: Vec<String>) -> Self {
        Message::of(action, request.creator, from, params).with_correlation(request.correlation_id)
    }

    pub fn with_echo(mut self, need_echo: bool) -> Self {
        self.need_echo = need_echo;
        self
    }

    pub fn with_ttl(mut self, ttl: u32) -> Self {
        self.time_to_live = ttl;
        self
    }

    pub fn with_create_time(mut self, at: Timestamp) -> Self {
        self.create_time = at;
        self
    }

    pub fn with_correlation(mut self, id: CorrelationId) -> Self {
        self.correlation_id = id;
        self
    }

    /// Records one forwarding step through `via`.
    pub fn hop(mut self, via: Address) -> Result<Self, MessageError> {
        if self.time_to_live == 0 {
            return Err(MessageError::Expired);
        }
        self.time_to_live -= 1;
        self.route.push(via);
        Ok(self)
    }

    /// Points the message at a new destination, keeping its identity,
    /// hop budget and route so far.
    pub fn redirect(mut self, intend: Address) -> Self {
        self.intend = intend;
        self
    }

    /// Checks the layer/action pairing; used on receipt.
    pub fn validate(&self) -> Result<(), MessageError> {
        if self.action.is_valid_for(self.layer) {
            Ok(())
        } else {
            Err(MessageError::LayerMismatch {
                layer: self.layer,
                action: self.action,
            })
        }
    }

    pub fn layer(&self) -> Layer {
        self.layer
    }

    pub fn action(&self) -> Action {
        self.action
    }

    pub fn intend(&self) -> Address {
        self.intend
    }

    pub fn creator(&self) -> Address {
        self.creator
    }

    pub fn need_echo(&self) -> bool {
        self.need_echo
    }

    pub fn time_to_live(&self) -> u32 {
        self.time_to_live
    }

    pub fn create_time(&self) -> Timestamp {
        self.create_time
    }

    pub fn correlation_id(&self) -> CorrelationId {
        self.correlation_id
    }

    pub fn route(&self) -> &[Address] {
        &self.route
    }

    pub fn params(&self) -> &[String] {
        &self.params
    }

    pub fn param(&self, index: usize) -> Option<&str> {
        self.params.get(index).map(String::as_str)
    }

    pub fn into_params(self) -> Vec<String> {
        self.params
    }

    /// Number of forwarding hops recorded so far.
    pub fn hops(&self) -> usize {
        self.route.len()
    }
}

/// Order in which delivered messages are lined up for processing:
/// creation time first, then creator, then correlation id.
pub fn arrival_order(a: &Message, b: &Message) -> Ordering {
    a.create_time
        .cmp(&b.create_time)
        .then(a.creator.cmp(&b.creator))
        .then(a.correlation_id.cmp(&b.correlation_id))
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{} intend={} creator={} ttl={} route=[",
            self.layer, self.action, self.intend, self.creator, self.time_to_live
        )?;
        for (i, a) in self.route.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{a}")?;
        }
        f.write_str("] params=")?;
        write!(f, "{:?}", self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn a(n: u64) -> Address {
        Address(n)
    }

    #[test]
    fn hello_defaults() {
        let m = Message::new(Layer::Transmission, Action::Hello, a(1), a(0), vec![]).unwrap();
        assert_eq!(m.time_to_live(), 64);
        assert!(m.route().is_empty());
        assert!(!m.need_echo());
    }

    #[test]
    fn req_carries_service_name_first() {
        let m = Message::new(Layer::Service, Action::Req, a(0), a(3), vec!["Service1".into()]).unwrap();
        assert_eq!(m.param(0), Some("Service1"));
        assert_eq!(m.action(), Action::Req);
    }

    #[test]
    fn layer_mismatch_rejected() {
        let err = Message::new(Layer::Transmission, Action::Reg, a(0), a(1), vec![]).unwrap_err();
        assert_eq!(
            err,
            MessageError::LayerMismatch {
                layer: Layer::Transmission,
                action: Action::Reg
            }
        );
        for action in Action::ALL {
            assert!(Message::new(Layer::Domain, action, a(0), a(1), vec![]).is_err());
        }
    }

    #[test]
    fn hop_decrements_and_records() {
        let m = Message::of(Action::Hello, a(9), a(0), vec![]);
        let m = m.hop(a(1)).unwrap();
        assert_eq!(m.time_to_live(), 63);
        assert_eq!(m.route(), &[a(1)]);

        let m = Message::of(Action::Hello, a(9), a(0), vec![]).with_ttl(1).hop(a(1)).unwrap();
        let m = m.hop(a(2));
        assert!(m.is_err());

        let m = Message::of(Action::Hello, a(9), a(0), vec![]).with_ttl(1);
        let m = m.hop(a(1)).unwrap();
        assert_eq!(m.time_to_live(), 0);
        assert_eq!(m.route(), &[a(1)]);
        assert_eq!(m.hop(a(2)).unwrap_err(), MessageError::Expired);

        let dead = Message::of(Action::Tick, a(9), a(0), vec![]).with_ttl(0);
        assert_eq!(dead.hop(a(3)).unwrap_err(), MessageError::Expired);
    }

    #[test]
    fn order_by_time_then_creator() {
        let early = Message::of(Action::Tick, a(1), a(5), vec![]).with_create_time(Timestamp(10));
        let late = Message::of(Action::Tick, a(1), a(1), vec![]).with_create_time(Timestamp(20));
        assert_eq!(arrival_order(&early, &late), Ordering::Less);

        let x = Message::of(Action::Tick, a(1), a(2), vec![]).with_create_time(Timestamp(10));
        let y = Message::of(Action::Tick, a(1), a(3), vec![]).with_create_time(Timestamp(10));
        assert_eq!(arrival_order(&x, &y), Ordering::Less);
        assert_eq!(arrival_order(&y, &x), Ordering::Greater);
    }

    #[test]
    fn display_is_one_line_in_fixed_order() {
        let m = Message::of(Action::Req, a(0), a(4), vec!["Service1".into(), "2.5".into()])
            .hop(a(4))
            .unwrap()
            .hop(a(2))
            .unwrap();
        assert_eq!(
            m.to_string(),
            "SERVICE/REQ intend=n0 creator=n4 ttl=62 route=[n4,n2] params=[\"Service1\", \"2.5\"]"
        );
    }

    #[test]
    fn address_round_trips_through_text() {
        assert_eq!("n17".parse::<Address>().unwrap(), a(17));
        assert!("17".parse::<Address>().is_err());
    }

    #[test]
    fn correlation_ids_unique_across_threads() {
        let handles: Vec<_> = (0..10)
            .map(|_| {
                std::thread::spawn(|| {
                    (0..1_000)
                        .map(|_| Message::of(Action::Req, a(0), a(1), vec![]).correlation_id())
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let mut ids: Vec<_> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
        assert_eq!(ids.len(), 10_000);
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 10_000);
    }

    fn arb_message() -> impl Strategy<Value = Message> {
        (0u64..50, 0u64..6, 0u64..6).prop_map(|(t, creator, cid)| {
            Message::of(Action::Tick, a(0), a(creator), vec![])
                .with_create_time(Timestamp(t))
                .with_correlation(CorrelationId(cid))
        })
    }

    proptest! {
        #[test]
        fn arrival_order_is_total(x in arb_message(), y in arb_message(), z in arb_message()) {
            // antisymmetry
            prop_assert_eq!(arrival_order(&x, &y), arrival_order(&y, &x).reverse());
            // transitivity
            if arrival_order(&x, &y) != Ordering::Greater && arrival_order(&y, &z) != Ordering::Greater {
                prop_assert_ne!(arrival_order(&x, &z), Ordering::Greater);
            }
            // totality: Equal only when the whole key matches
            if arrival_order(&x, &y) == Ordering::Equal {
                prop_assert_eq!(x.create_time(), y.create_time());
                prop_assert_eq!(x.creator(), y.creator());
                prop_assert_eq!(x.correlation_id(), y.correlation_id());
            }
        }

        #[test]
        fn sort_matches_reference_key_sort(stamps in proptest::collection::vec((0u64..20, 0u64..4), 0..200)) {
            let msgs: Vec<Message> = stamps
                .iter()
                .map(|&(t, c)| Message::of(Action::Tick, a(0), a(c), vec![]).with_create_time(Timestamp(t)))
                .collect();
            let mut sorted = msgs.clone();
            sorted.sort_by(arrival_order);

            // reference: insertion sort on an explicit tuple key
            let mut reference: Vec<Message> = Vec::new();
            for m in msgs {
                let key = (m.create_time().0, m.creator().0, m.correlation_id().0);
                let pos = reference
                    .iter()
                    .position(|r| (r.create_time().0, r.creator().0, r.correlation_id().0) > key)
                    .unwrap_or(reference.len());
                reference.insert(pos, m);
            }
            prop_assert_eq!(sorted, reference);
        }

        #[test]
        fn route_length_tracks_ttl(initial in 1u32..100, hops in 0usize..120) {
            let mut m = Message::of(Action::Hello, a(0), a(1), vec![]).with_ttl(initial);
            for i in 0..hops {
                match m.clone().hop(a(i as u64)) {
                    Ok(next) => m = next,
                    Err(_) => {
                        prop_assert_eq!(m.time_to_live(), 0);
                        break;
                    }
                }
                prop_assert_eq!(m.route().len() as u32, initial - m.time_to_live());
            }
        }
    }
}
