//! Deterministic discrete-event core.
//!
//! Time is an integer count of nanoseconds. Events with equal due times are
//! dispatched in insertion order, so a scenario replays to a bit-identical
//! event trace.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::ops::{Add, AddAssign, Sub};

use serde::{Deserialize, Serialize};

/// Bits in one 53-byte ATM cell.
pub const CELL_BITS: u64 = 424;

/// Simulated time in nanoseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_nanos(ns: u64) -> Self {
        SimTime(ns)
    }

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us * 1_000)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * 1_000_000_000)
    }

    /// Rounds to the nearest nanosecond.
    pub fn from_secs_f64(s: f64) -> Self {
        assert!(s >= 0.0 && s.is_finite(), "negative or non-finite time {s}");
        SimTime((s * 1e9).round() as u64)
    }

    /// Interval between events occurring `per_second` times a second, rounded
    /// to the nearest tick and never below one tick.
    pub fn interval_for_rate(per_second: f64) -> Self {
        assert!(per_second > 0.0, "rate must be positive");
        SimTime(((1e9 / per_second).round() as u64).max(1))
    }

    pub const fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 * 1e-9
    }

    pub fn saturating_sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 += rhs.0;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.checked_sub(rhs.0).expect("SimTime underflow"))
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.9}s", self.as_secs_f64())
    }
}

/// A point-to-point link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkConfig {
    /// Bits per second.
    pub bandwidth: f64,
    pub propagation_delay: SimTime,
}

impl LinkConfig {
    pub fn new(bandwidth: f64, propagation_delay: SimTime) -> Self {
        LinkConfig { bandwidth, propagation_delay }
    }
}

/// Serialization time of one cell on `link`.
pub fn cell_time(link: &LinkConfig) -> SimTime {
    SimTime::interval_for_rate(link.bandwidth / CELL_BITS as f64)
}

/// Identifies the component an event is addressed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ComponentId(pub u32);

/// Returned by [`Engine::schedule`]; pass to [`Engine::cancel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventHandle(u64);

#[derive(Debug, Clone)]
pub struct Event<P> {
    pub due: SimTime,
    pub seq: u64,
    pub target: ComponentId,
    pub payload: P,
}

struct Queued<P>(Event<P>);

impl<P> PartialEq for Queued<P> {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl<P> Eq for Queued<P> {}

impl<P> Queued<P> {
    fn key(&self) -> (SimTime, u64) {
        (self.0.due, self.0.seq)
    }
}

impl<P> PartialOrd for Queued<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Queued<P> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

/// Receives dispatched events. Implementors may schedule follow-up events.
pub trait Handler<P> {
    fn handle(&mut self, engine: &mut Engine<P>, event: Event<P>);
}

impl<P, F: FnMut(&mut Engine<P>, Event<P>)> Handler<P> for F {
    fn handle(&mut self, engine: &mut Engine<P>, event: Event<P>) {
        self(engine, event)
    }
}

/// Single-threaded event loop.
pub struct Engine<P> {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Reverse<Queued<P>>>,
    cancelled: HashSet<u64>,
    dispatched: u64,
    trace: DefaultHasher,
}

impl<P> Default for Engine<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> Engine<P> {
    pub fn new() -> Self {
        Engine {
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            cancelled: HashSet::new(),
            dispatched: 0,
            trace: DefaultHasher::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Total events dispatched since construction.
    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    /// Events still queued, including cancelled ones not yet discarded.
    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    /// Enqueues `payload` for delivery to `target` at `due`.
    ///
    /// Panics if `due` lies in the past: that is a logic error in the caller
    /// and the run cannot continue meaningfully.
    pub fn schedule(&mut self, due: SimTime, target: ComponentId, payload: P) -> EventHandle {
        assert!(
            due >= self.now,
            "event scheduled in the past: due {due} < now {}",
            self.now
        );
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Queued(Event { due, seq, target, payload })));
        EventHandle(seq)
    }

    pub fn schedule_in(&mut self, delay: SimTime, target: ComponentId, payload: P) -> EventHandle {
        self.schedule(self.now + delay, target, payload)
    }

    /// Prevents the event from being dispatched. Cancelling an event that
    /// already fired is a no-op.
    pub fn cancel(&mut self, handle: EventHandle) {
        if handle.0 < self.next_seq {
            self.cancelled.insert(handle.0);
        }
    }

    /// Dispatches every event due at or before `end`, in `(due, seq)` order,
    /// then sets the clock to `end`. Returns the number of events dispatched.
    pub fn run_until<H: Handler<P>>(&mut self, end: SimTime, handler: &mut H) -> u64 {
        let before = self.dispatched;
        while let Some(Reverse(head)) = self.queue.peek() {
            if head.0.due > end {
                break;
            }
            let Reverse(Queued(event)) = self.queue.pop().expect("peeked");
            if !self.cancelled.is_empty() && self.cancelled.remove(&event.seq) {
                continue;
            }
            debug_assert!(event.due >= self.now);
            self.now = event.due;
            self.dispatched += 1;
            (event.due, event.target).hash(&mut self.trace);
            handler.handle(self, event);
        }
        if end > self.now {
            self.now = end;
        }
        self.dispatched - before
    }

    /// Digest of the `(due, target)` sequence dispatched so far, combined by
    /// callers with payload kinds when finer traces are needed.
    pub fn trace_digest(&self) -> u64 {
        self.trace.finish()
    }

    /// Mixes a caller-supplied value into the trace digest.
    pub fn trace_mix<T: Hash>(&mut self, value: T) {
        value.hash(&mut self.trace);
    }
}
