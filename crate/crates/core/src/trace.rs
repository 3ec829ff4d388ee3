//! Protocol event trace.
//!
//! Each record renders as one text line: `<nanos> <node> <KIND> <detail>`.
//! Lines parse back with [`TraceRecord::parse`], which is what the protocol
//! property tests work from.

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::message::{Address, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TraceKind {
    Spawn,
    Config,
    ConfigAck,
    Hello,
    Echo,
    Tick,
    Exit,
    Route,
    Drop,
    State,
    Outlet,
    Reg,
    Req,
    Ack,
}

impl TraceKind {
    pub const ALL: [TraceKind; 14] = [
        TraceKind::Spawn,
        TraceKind::Config,
        TraceKind::ConfigAck,
        TraceKind::Hello,
        TraceKind::Echo,
        TraceKind::Tick,
        TraceKind::Exit,
        TraceKind::Route,
        TraceKind::Drop,
        TraceKind::State,
        TraceKind::Outlet,
        TraceKind::Reg,
        TraceKind::Req,
        TraceKind::Ack,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TraceKind::Spawn => "SPAWN",
            TraceKind::Config => "CONFIG",
            TraceKind::ConfigAck => "CONFIG_ACK",
            TraceKind::Hello => "HELLO",
            TraceKind::Echo => "ECHO",
            TraceKind::Tick => "TICK",
            TraceKind::Exit => "EXIT",
            TraceKind::Route => "ROUTE",
            TraceKind::Drop => "DROP",
            TraceKind::State => "STATE",
            TraceKind::Outlet => "OUTLET",
            TraceKind::Reg => "REG",
            TraceKind::Req => "REQ",
            TraceKind::Ack => "ACK",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub at: Timestamp,
    pub node: Address,
    pub kind: TraceKind,
    pub detail: String,
}

impl TraceRecord {
    pub fn parse(line: &str) -> Option<TraceRecord> {
        let mut parts = line.splitn(4, ' ');
        let at = Timestamp(parts.next()?.parse().ok()?);
        let node = parts.next()?.parse().ok()?;
        let kind = TraceKind::parse(parts.next()?)?;
        let detail = parts.next().unwrap_or("").to_string();
        Some(TraceRecord { at, node, kind, detail })
    }

    /// Value of a `key=value` token in the detail text.
    pub fn field(&self, key: &str) -> Option<&str> {
        self.detail.split(' ').find_map(|tok| {
            let (k, v) = tok.split_once('=')?;
            (k == key).then_some(v)
        })
    }
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.at.0, self.node, self.kind.as_str())?;
        if !self.detail.is_empty() {
            write!(f, " {}", self.detail)?;
        }
        Ok(())
    }
}

/// Shared, append-only event log. Recording can be switched off for
/// benchmark runs.
#[derive(Clone, Default)]
pub struct TraceLog {
    inner: Arc<TraceInner>,
}

#[derive(Default)]
struct TraceInner {
    enabled: AtomicBool,
    records: Mutex<Vec<TraceRecord>>,
}

impl TraceLog {
    pub fn new(enabled: bool) -> Self {
        let log = TraceLog::default();
        log.set_enabled(enabled);
        log
    }

    pub fn set_enabled(&self, enabled: bool) {
        self.inner.enabled.store(enabled, Ordering::Relaxed);
    }

    pub fn is_enabled(&self) -> bool {
        self.inner.enabled.load(Ordering::Relaxed)
    }

    pub fn record(&self, node: Address, kind: TraceKind, detail: impl FnOnce() -> String) {
        if !self.is_enabled() {
            return;
        }
        let mut records = self.inner.records.lock();
        // stamped under the lock so the log is in timestamp order
        let at = Timestamp::now();
        records.push(TraceRecord {
            at,
            node,
            kind,
            detail: detail(),
        });
    }

    pub fn snapshot(&self) -> Vec<TraceRecord> {
        self.inner.records.lock().clone()
    }

    pub fn lines(&self) -> Vec<String> {
        self.inner.records.lock().iter().map(ToString::to_string).collect()
    }

    pub fn clear(&self) {
        self.inner.records.lock().clear();
    }

    pub fn len(&self) -> usize {
        self.inner.records.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
