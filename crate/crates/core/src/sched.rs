//! Output-port cell schedulers.
//!
//! [`WfqScheduler`] stamps each cell with a virtual finish time and always
//! serves the smallest stamp. The virtual clock follows the fluid GPS
//! reference system: it advances at `port_rate / sum(phi)` over the VCs
//! that are still backlogged in GPS (finish stamp above the clock), so a VC
//! drops out of the sum exactly when the fluid system would have drained it.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::engine::SimTime;
use crate::traffic::{Cell, VcId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerKind {
    #[default]
    Fifo,
    Wfq,
}

/// Single queue, arrival order.
#[derive(Debug, Default, Clone)]
pub struct FifoScheduler {
    queue: VecDeque<Cell>,
}

impl FifoScheduler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enqueue(&mut self, cell: Cell) {
        self.queue.push_back(cell);
    }

    pub fn pop(&mut self) -> Option<Cell> {
        self.queue.pop_front()
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }
}

/// Per-VC queues served in virtual-finish-time order.
#[derive(Debug, Clone)]
pub struct WfqScheduler {
    phi: Vec<f64>,
    queues: Vec<VecDeque<(Cell, f64)>>,
    last_finish: Vec<f64>,
    virtual_time: f64,
    last_update: SimTime,
    /// Cells per nanosecond.
    rate: f64,
    len: usize,
}

impl WfqScheduler {
    /// `weights` are relative (normalized internally); `port_rate` is in
    /// cells per second.
    pub fn new(weights: &[f64], port_rate: f64) -> Self {
        assert!(!weights.is_empty(), "WFQ needs at least one VC");
        assert!(weights.iter().all(|w| *w > 0.0 && w.is_finite()), "WFQ weights must be positive");
        assert!(port_rate > 0.0, "port rate must be positive");
        let total: f64 = weights.iter().sum();
        WfqScheduler {
            phi: weights.iter().map(|w| w / total).collect(),
            queues: vec![VecDeque::new(); weights.len()],
            last_finish: vec![0.0; weights.len()],
            virtual_time: 0.0,
            last_update: SimTime::ZERO,
            rate: port_rate * 1e-9,
            len: 0,
        }
    }

    /// Normalized share of VC `vc`.
    pub fn share(&self, vc: VcId) -> f64 {
        self.phi[vc.index()]
    }

    pub fn virtual_time(&self) -> f64 {
        self.virtual_time
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn queue_len(&self, vc: VcId) -> usize {
        self.queues[vc.index()].len()
    }

    /// Finish stamp of the head cell of `vc`, if any.
    pub fn head_stamp(&self, vc: VcId) -> Option<f64> {
        self.queues[vc.index()].front().map(|(_, f)| *f)
    }

    fn advance(&mut self, now: SimTime) {
        debug_assert!(now >= self.last_update);
        // service the fluid system would deliver, in cells
        let mut work = (now - self.last_update).as_nanos() as f64 * self.rate;
        self.last_update = now;
        while work > 0.0 {
            let v = self.virtual_time;
            let mut active = 0.0;
            let mut next_exit = f64::INFINITY;
            for (f, phi) in self.last_finish.iter().zip(&self.phi) {
                if *f > v {
                    active += phi;
                    next_exit = next_exit.min(*f);
                }
            }
            if active == 0.0 {
                break;
            }
            let dv = work / active;
            if v + dv < next_exit {
                self.virtual_time = v + dv;
                break;
            }
            work -= (next_exit - v) * active;
            self.virtual_time = next_exit;
        }
    }

    /// Queues `cell` and returns its finish stamp.
    pub fn enqueue(&mut self, cell: Cell, now: SimTime) -> f64 {
        self.advance(now);
        let i = cell.vc.index();
        let finish = self.virtual_time.max(self.last_finish[i]) + 1.0 / self.phi[i];
        self.last_finish[i] = finish;
        self.queues[i].push_back((cell, finish));
        self.len += 1;
        finish
    }

    /// Dequeues the head cell with the smallest finish stamp; ties go to the
    /// lowest VC id.
    pub fn next(&mut self, now: SimTime) -> Option<Cell> {
        self.advance(now);
        let mut best: Option<(usize, f64)> = None;
        for (i, q) in self.queues.iter().enumerate() {
            if let Some(&(_, f)) = q.front() {
                if best.is_none_or(|(_, bf)| f < bf) {
                    best = Some((i, f));
                }
            }
        }
        let (i, _) = best?;
        self.len -= 1;
        self.queues[i].pop_front().map(|(c, _)| c)
    }
}

/// The scheduler attached to one output port.
#[derive(Debug, Clone)]
pub enum Scheduler {
    Fifo(FifoScheduler),
    Wfq(WfqScheduler),
}

impl Scheduler {
    pub fn new(kind: SchedulerKind, weights: &[f64], port_rate: f64) -> Self {
        match kind {
            SchedulerKind::Fifo => Scheduler::Fifo(FifoScheduler::new()),
            SchedulerKind::Wfq => Scheduler::Wfq(WfqScheduler::new(weights, port_rate)),
        }
    }

    pub fn enqueue(&mut self, cell: Cell, now: SimTime) {
        match self {
            Scheduler::Fifo(s) => s.enqueue(cell),
            Scheduler::Wfq(s) => {
                s.enqueue(cell, now);
            }
        }
    }

    pub fn next(&mut self, now: SimTime) -> Option<Cell> {
        match self {
            Scheduler::Fifo(s) => s.pop(),
            Scheduler::Wfq(s) => s.next(now),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Scheduler::Fifo(s) => s.len(),
            Scheduler::Wfq(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
