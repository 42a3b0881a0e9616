//! Discrete-event engine: a virtual clock driven by a time-ordered event
//! queue, FIFO point-to-point links and exclusive compute cores.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use thiserror::Error;

use crate::domain::LinkParams;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("negative or non-finite delay {0}")]
    NegativeDelay(f64),
    #[error("event at {at} is before the current time {now}")]
    InThePast { at: f64, now: f64 },
}

/// Handle for a scheduled event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimEvent {
    pub fire_at: f64,
    pub seq_no: u64,
}

struct Entry<A> {
    fire_at: f64,
    seq_no: u64,
    action: A,
}

impl<A> PartialEq for Entry<A> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<A> Eq for Entry<A> {}

impl<A> PartialOrd for Entry<A> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<A> Ord for Entry<A> {
    // BinaryHeap is a max-heap; invert so the earliest (fire_at, seq_no) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .fire_at
            .total_cmp(&self.fire_at)
            .then_with(|| other.seq_no.cmp(&self.seq_no))
    }
}

/// Virtual clock plus pending events. Equal fire times run in scheduling order.
pub struct EventQueue<A> {
    now: f64,
    next_seq: u64,
    heap: BinaryHeap<Entry<A>>,
}

impl<A> Default for EventQueue<A> {
    fn default() -> Self {
        Self::new()
    }
}

impl<A> EventQueue<A> {
    pub fn new() -> Self {
        Self {
            now: 0.0,
            next_seq: 0,
            heap: BinaryHeap::new(),
        }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn schedule(&mut self, delay: f64, action: A) -> Result<SimEvent, SimError> {
        if !delay.is_finite() || delay < 0.0 {
            return Err(SimError::NegativeDelay(delay));
        }
        self.push(self.now + delay, action)
    }

    pub fn schedule_at(&mut self, at: f64, action: A) -> Result<SimEvent, SimError> {
        if !at.is_finite() || at < self.now {
            return Err(SimError::InThePast { at, now: self.now });
        }
        self.push(at, action)
    }

    fn push(&mut self, fire_at: f64, action: A) -> Result<SimEvent, SimError> {
        let seq_no = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry {
            fire_at,
            seq_no,
            action,
        });
        Ok(SimEvent { fire_at, seq_no })
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|e| e.fire_at)
    }

    /// Pops the next event at or before `t_end`, advancing the clock to it.
    pub fn pop_until(&mut self, t_end: f64) -> Option<(f64, A)> {
        if self.heap.peek()?.fire_at > t_end {
            return None;
        }
        let e = self.heap.pop()?;
        self.now = e.fire_at;
        Some((e.fire_at, e.action))
    }

    /// Executes every event with `fire_at ≤ t_end` and returns how many ran.
    /// The clock ends at the last executed event (or stays put).
    pub fn run_until(&mut self, t_end: f64, mut handler: impl FnMut(&mut Self, A)) -> usize {
        let mut executed = 0;
        while let Some((_, action)) = self.pop_until(t_end) {
            handler(self, action);
            executed += 1;
        }
        executed
    }
}

/// Timing of one transmission on a [`SimLink`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transmission {
    /// First byte leaves the sender.
    pub start: f64,
    /// Last byte leaves the sender; the link is free again.
    pub serialized_at: f64,
    /// Last byte reaches the receiver.
    pub delivered_at: f64,
}

/// A one-directional link that serializes transmissions in FIFO order.
#[derive(Debug, Clone)]
pub struct SimLink {
    params: LinkParams,
    busy_until: f64,
    bytes_sent: u64,
    busy_time: f64,
}

impl SimLink {
    pub fn new(params: LinkParams) -> Self {
        Self {
            params,
            busy_until: 0.0,
            bytes_sent: 0,
            busy_time: 0.0,
        }
    }

    pub fn params(&self) -> LinkParams {
        self.params
    }

    pub fn busy_until(&self) -> f64 {
        self.busy_until
    }

    pub fn bytes_sent(&self) -> u64 {
        self.bytes_sent
    }

    /// Accumulated serialization time (latency excluded).
    pub fn busy_time(&self) -> f64 {
        self.busy_time
    }

    pub fn serialization_time(&self, nbytes: usize) -> f64 {
        nbytes as f64 / self.params.bandwidth
    }

    /// Queues `nbytes` behind any transmission already on the link.
    pub fn transmit(&mut self, now: f64, nbytes: usize) -> Transmission {
        debug_assert!(nbytes >= 1);
        let start = now.max(self.busy_until);
        let ser = self.serialization_time(nbytes);
        let serialized_at = start + ser;
        self.busy_until = serialized_at;
        self.bytes_sent += nbytes as u64;
        self.busy_time += ser;
        Transmission {
            start,
            serialized_at,
            delivered_at: serialized_at + self.params.latency,
        }
    }
}

/// One CPU core executing at most one task at a time.
#[derive(Debug, Clone)]
pub struct SimCore {
    core_id: u8,
    free_at: f64,
    busy_intervals: Vec<(f64, f64)>,
    busy_total: f64,
}

impl SimCore {
    pub fn new(core_id: u8) -> Self {
        Self {
            core_id,
            free_at: 0.0,
            busy_intervals: Vec::new(),
            busy_total: 0.0,
        }
    }

    pub fn core_id(&self) -> u8 {
        self.core_id
    }

    pub fn free_at(&self) -> f64 {
        self.free_at
    }

    /// Runs a task of `duration` at the core's next free instant at or
    /// after `now`; returns `(start, completion)`. Zero-length tasks
    /// complete at `now` and leave no trace.
    pub fn execute(&mut self, now: f64, duration: f64) -> (f64, f64) {
        debug_assert!(duration >= 0.0);
        if duration == 0.0 {
            return (now, now);
        }
        let start = now.max(self.free_at);
        let end = start + duration;
        self.free_at = end;
        self.busy_intervals.push((start, end));
        self.busy_total += duration;
        (start, end)
    }

    pub fn busy_intervals(&self) -> &[(f64, f64)] {
        &self.busy_intervals
    }

    /// Sum of the durations of every executed task.
    pub fn busy_time(&self) -> f64 {
        self.busy_total
    }
}
