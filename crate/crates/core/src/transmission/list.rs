use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::Instant;

use parking_lot::{Condvar, Mutex};

use crate::message::{arrival_order, Message};

struct Queued {
    seq: u64,
    msg: Message,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    // reversed: BinaryHeap is a max-heap, we pop the earliest message
    fn cmp(&self, other: &Self) -> Ordering {
        arrival_order(&other.msg, &self.msg).then(other.seq.cmp(&self.seq))
    }
}

struct ListState {
    heap: BinaryHeap<Queued>,
    next_seq: u64,
    closed: bool,
}

pub(crate) enum Pop {
    Message(Message),
    TimedOut,
    Closed,
}

/// Blocking message list consumed by a single activity, ordered by
/// [`arrival_order`] and FIFO among equal keys.
pub(crate) struct MessageList {
    state: Mutex<ListState>,
    ready: Condvar,
}

impl MessageList {
    pub fn new() -> Self {
        MessageList {
            state: Mutex::new(ListState {
                heap: BinaryHeap::new(),
                next_seq: 0,
                closed: false,
            }),
            ready: Condvar::new(),
        }
    }

    /// Appends a message; returns it back if the list is closed.
    pub fn push(&self, msg: Message) -> Result<(), Message> {
        let mut st = self.state.lock();
        if st.closed {
            return Err(msg);
        }
        let seq = st.next_seq;
        st.next_seq += 1;
        st.heap.push(Queued { seq, msg });
        drop(st);
        self.ready.notify_one();
        Ok(())
    }

    /// Waits for the earliest message, up to `deadline` when given.
    /// A closed list still hands out what it holds before reporting `Closed`.
    pub fn pop(&self, deadline: Option<Instant>) -> Pop {
        let mut st = self.state.lock();
        loop {
            if let Some(q) = st.heap.pop() {
                return Pop::Message(q.msg);
            }
            if st.closed {
                return Pop::Closed;
            }
            match deadline {
                Some(d) => {
                    if self.ready.wait_until(&mut st, d).timed_out() && st.heap.is_empty() {
                        return if st.closed { Pop::Closed } else { Pop::TimedOut };
                    }
                }
                None => self.ready.wait(&mut st),
            }
        }
    }

    pub fn close(&self) {
        self.state.lock().closed = true;
        self.ready.notify_all();
    }

    /// Closes the list and returns whatever was still queued.
    pub fn close_and_drain(&self) -> Vec<Message> {
        let mut st = self.state.lock();
        st.closed = true;
        let mut out = Vec::with_capacity(st.heap.len());
        while let Some(q) = st.heap.pop() {
            out.push(q.msg);
        }
        drop(st);
        self.ready.notify_all();
        out
    }

    pub fn len(&self) -> usize {
        self.state.lock().heap.len()
    }
}

/// A gate an activity passes before each unit of work; closing it
/// suspends the activity until it is reopened.
pub(crate) struct PauseGate {
    paused: Mutex<bool>,
    changed: Condvar,
}

impl PauseGate {
    pub fn new() -> Self {
        PauseGate {
            paused: Mutex::new(false),
            changed: Condvar::new(),
        }
    }

    pub fn pass(&self) {
        let mut paused = self.paused.lock();
        while *paused {
            self.changed.wait(&mut paused);
        }
    }

    pub fn set(&self, paused: bool) {
        *self.paused.lock() = paused;
        self.changed.notify_all();
    }
}
