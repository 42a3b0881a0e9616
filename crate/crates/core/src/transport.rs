//! The two far-edge ↔ edge transport contracts, modeled over [`SimLink`]s:
//! a blocking request/ack session and a non-blocking key-based pub/sub
//! with a bounded outbound queue. Both send the frames of one message
//! back to back on the link.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use thiserror::Error;

use crate::netsim::{SimLink, Transmission};

pub use crate::domain::TransportKind;

/// Far edge → edge image transfer.
pub const KEY_FACES_DETECTED: &str = "tricloud/faces/detected";
/// Prefix for edge → far edge results; the image id is the last segment.
pub const KEY_RESULTS_PREFIX: &str = "tricloud/results";
/// Prefix for cloud → edge results.
pub const KEY_CLOUD_RESULTS_PREFIX: &str = "tricloud/cloud/results";

pub fn result_key(image_id: &str) -> String {
    format!("{KEY_RESULTS_PREFIX}/{image_id}")
}

pub fn cloud_result_key(image_id: &str) -> String {
    format!("{KEY_CLOUD_RESULTS_PREFIX}/{image_id}")
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("connection closed")]
    ConnectionClosed,
    #[error("no acknowledgment within {0} s")]
    Timeout(f64),
    #[error("queue closed or key not declared")]
    QueueClosed,
    #[error("invalid key pattern `{0}`")]
    InvalidPattern(String),
    #[error("key `{0}` must be concrete")]
    InvalidKey(String),
    #[error("i/o error: {0}")]
    Io(String),
}

/// A `/`-separated key. `*` stands for exactly one segment.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KeyExpr {
    segments: Vec<String>,
}

impl KeyExpr {
    pub fn parse(text: &str) -> Result<Self, TransportError> {
        let segments: Vec<String> = text.split('/').map(str::to_string).collect();
        let valid = !text.is_empty()
            && segments
                .iter()
                .all(|s| !s.is_empty() && (s == "*" || !s.contains('*')));
        if !valid {
            return Err(TransportError::InvalidPattern(text.to_string()));
        }
        Ok(Self { segments })
    }

    /// Parses a key that must not contain wildcards.
    pub fn concrete(text: &str) -> Result<Self, TransportError> {
        let key = Self::parse(text)?;
        if !key.is_concrete() {
            return Err(TransportError::InvalidKey(text.to_string()));
        }
        Ok(key)
    }

    pub fn is_concrete(&self) -> bool {
        self.segments.iter().all(|s| s != "*")
    }

    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    pub fn last_segment(&self) -> &str {
        self.segments.last().map(String::as_str).unwrap_or_default()
    }
}

impl fmt::Display for KeyExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.segments.join("/"))
    }
}

/// True iff both have the same number of segments and every pattern
/// segment is `*` or equal to the key's.
pub fn match_key(pattern: &KeyExpr, key: &KeyExpr) -> bool {
    pattern.segments.len() == key.segments.len()
        && pattern
            .segments
            .iter()
            .zip(&key.segments)
            .all(|(p, k)| p == "*" || p == k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Subscription(pub u32);

/// Subscription table on the receiving side. Every matching subscription
/// gets its own copy, in subscription order.
pub struct Router<H> {
    next_id: u32,
    entries: Vec<(Subscription, KeyExpr, H)>,
}

impl<H> Default for Router<H> {
    fn default() -> Self {
        Self {
            next_id: 0,
            entries: Vec::new(),
        }
    }
}

impl<H> Router<H> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn subscribe(&mut self, pattern: &str, handler: H) -> Result<Subscription, TransportError> {
        let pattern = KeyExpr::parse(pattern)?;
        let id = Subscription(self.next_id);
        self.next_id += 1;
        self.entries.push((id, pattern, handler));
        Ok(id)
    }

    pub fn unsubscribe(&mut self, sub: Subscription) -> bool {
        let before = self.entries.len();
        self.entries.retain(|(id, _, _)| *id != sub);
        before != self.entries.len()
    }

    pub fn matching<'a>(
        &'a self,
        key: &'a KeyExpr,
    ) -> impl Iterator<Item = (Subscription, &'a H)> + 'a {
        self.entries
            .iter()
            .filter(move |(_, p, _)| match_key(p, key))
            .map(|(id, _, h)| (*id, h))
    }
}

impl<H: FnMut(&KeyExpr, &[u8])> Router<H> {
    /// Invokes every matching handler; returns how many fired.
    pub fn dispatch(&mut self, key: &KeyExpr, message: &[u8]) -> usize {
        let mut fired = 0;
        for (_, pattern, handler) in &mut self.entries {
            if match_key(pattern, key) {
                handler(key, message);
                fired += 1;
            }
        }
        fired
    }
}

/// Outcome of a blocking send: the caller resumes at `acked_at`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SendReceipt {
    pub transmission: Transmission,
    pub acked_at: f64,
}

/// Full-duplex session in which every send waits for the receiver's ack.
#[derive(Debug, Clone)]
pub struct BlockingSession {
    link: SimLink,
    timeout: f64,
    writer_free_at: f64,
    open: bool,
}

impl BlockingSession {
    pub fn new(link: SimLink, timeout: f64) -> Self {
        Self {
            link,
            timeout,
            writer_free_at: 0.0,
            open: true,
        }
    }

    pub fn close(&mut self) {
        self.open = false;
    }

    pub fn link(&self) -> &SimLink {
        &self.link
    }

    /// When a send issued now would start.
    pub fn writer_free_at(&self) -> f64 {
        self.writer_free_at
    }

    /// Sends one message of `nbytes`; the caller is suspended until the
    /// ack (one link latency after delivery) returns.
    pub fn send(&mut self, now: f64, nbytes: usize) -> Result<SendReceipt, TransportError> {
        if !self.open {
            return Err(TransportError::ConnectionClosed);
        }
        let begin = now.max(self.writer_free_at);
        let transmission = self.link.transmit(begin, nbytes);
        let acked_at = transmission.delivered_at + self.link.params().latency;
        self.writer_free_at = acked_at;
        if acked_at - now > self.timeout {
            return Err(TransportError::Timeout(self.timeout));
        }
        Ok(SendReceipt {
            transmission,
            acked_at,
        })
    }
}

/// Bounded queue of messages awaiting (or in) transmission. A message
/// holds its slot until its last byte has left the sender.
#[derive(Debug, Clone)]
pub struct OutboundQueue {
    capacity: usize,
    departures: VecDeque<f64>,
}

impl OutboundQueue {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1);
        Self {
            capacity,
            departures: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn occupancy(&mut self, now: f64) -> usize {
        while self.departures.front().is_some_and(|&t| t <= now) {
            self.departures.pop_front();
        }
        self.departures.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PutReceipt {
    /// Message queued; the caller resumed at the put instant. The frame
    /// timings are those the background drain will produce.
    Enqueued { frames: Vec<Transmission> },
    /// Queue full: the caller stays blocked and retries at `retry_at`.
    Full { retry_at: f64 },
}

/// Non-blocking publisher: puts enqueue and return, a drain sends
/// queued messages over the link in FIFO order.
#[derive(Debug, Clone)]
pub struct Publisher {
    link: SimLink,
    queue: OutboundQueue,
    declared: BTreeSet<KeyExpr>,
    open: bool,
}

impl Publisher {
    pub fn new(link: SimLink, capacity: usize) -> Self {
        Self {
            link,
            queue: OutboundQueue::new(capacity),
            declared: BTreeSet::new(),
            open: true,
        }
    }

    pub fn declare(&mut self, key: &str) -> Result<KeyExpr, TransportError> {
        let key = KeyExpr::concrete(key)?;
        self.declared.insert(key.clone());
        Ok(key)
    }

    pub fn undeclare(&mut self, key: &KeyExpr) {
        self.declared.remove(key);
    }

    pub fn close(&mut self) {
        self.open = false;
    }

    pub fn link(&self) -> &SimLink {
        &self.link
    }

    pub fn occupancy(&mut self, now: f64) -> usize {
        self.queue.occupancy(now)
    }

    /// Publishes one message made of `frames` (byte lengths) on `key`.
    pub fn put(
        &mut self,
        now: f64,
        key: &KeyExpr,
        frames: &[usize],
    ) -> Result<PutReceipt, TransportError> {
        if !self.open || !self.declared.contains(key) {
            return Err(TransportError::QueueClosed);
        }
        if self.queue.occupancy(now) >= self.queue.capacity {
            let retry_at = *self
                .queue
                .departures
                .front()
                .expect("full queue is non-empty");
            return Ok(PutReceipt::Full { retry_at });
        }
        let frames: Vec<Transmission> =
            frames.iter().map(|&n| self.link.transmit(now, n)).collect();
        let departure = frames.last().map_or(now, |t| t.serialized_at);
        self.queue.departures.push_back(departure);
        Ok(PutReceipt::Enqueued { frames })
    }
}
