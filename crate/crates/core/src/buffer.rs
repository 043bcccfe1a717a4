//! Shared output-port cell buffer with per-VC accounting and frame-level
//! drop policies.
//!
//! Every policy decides at the first cell of a frame. A rejected frame loses
//! all of its cells except the EOM cell, which is still queued so the
//! receiver can find the frame boundary. A cell arriving to a full buffer is
//! lost regardless of policy and the rest of its frame is discarded the same
//! way.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::engine::SimTime;
use crate::traffic::{Cell, VcId};

/// Which frame-acceptance rule the buffer applies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DropPolicy {
    /// Accept everything that fits.
    Tail,
    /// Early Packet Discard: reject new frames once occupancy reaches `r`.
    Epd {
        /// Threshold as a fraction of the buffer size.
        r: f64,
    },
    /// Per-VC fair share of the current occupancy.
    Selective { r: f64, z: f64 },
    /// Weighted Buffer Allocation.
    Wba { r: f64, z: f64 },
}

impl DropPolicy {
    pub const fn epd_default() -> Self {
        DropPolicy::Epd { r: 0.8 }
    }

    pub const fn selective_default() -> Self {
        DropPolicy::Selective { r: 0.9, z: 0.8 }
    }

    pub const fn wba_default() -> Self {
        DropPolicy::Wba { r: 0.5, z: 1.0 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DropPolicy::Tail => "tail",
            DropPolicy::Epd { .. } => "epd",
            DropPolicy::Selective { .. } => "selective",
            DropPolicy::Wba { .. } => "wba",
        }
    }

    /// Whether the rule reads per-VC occupancy.
    pub fn uses_per_vc_accounting(&self) -> bool {
        matches!(self, DropPolicy::Selective { .. } | DropPolicy::Wba { .. })
    }

    pub fn validate(&self) -> Result<(), String> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(format!("{name} must lie in [0, 1], got {v}"))
            }
        };
        match *self {
            DropPolicy::Tail => Ok(()),
            DropPolicy::Epd { r } => unit("r", r),
            DropPolicy::Selective { r, z } | DropPolicy::Wba { r, z } => unit("r", r).and(unit("z", z)),
        }
    }
}

/// First-cell verdict of a drop policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameDecision {
    Accept,
    Drop,
}

/// Outcome of [`PortBuffer::admit_cell`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Enqueue,
    Drop(DropReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DropReason {
    /// The policy rejected the frame at its first cell.
    Policy,
    /// Remaining cells of a rejected or truncated frame.
    FrameDiscard,
    /// No room left in the buffer.
    Overflow,
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DropReason::Policy => "policy",
            DropReason::FrameDiscard => "frame-discard",
            DropReason::Overflow => "overflow",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
enum FrameState {
    #[default]
    Boundary,
    Accepting,
    Discarding,
}

#[derive(Debug, Clone, Default)]
struct VcAccount {
    /// Cells buffered.
    y: u64,
    /// Untagged cells buffered.
    l: u64,
    weight: f64,
    frame: FrameState,
    enqueued: u64,
    dequeued: u64,
    dropped: u64,
}

/// One line of the optional drop log.
#[derive(Debug, Clone, PartialEq)]
pub struct DropRecord {
    pub time: SimTime,
    pub vc: VcId,
    pub frame_id: u64,
    pub policy: &'static str,
    pub reason: DropReason,
}

impl fmt::Display for DropRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {}",
            self.time.as_nanos(),
            self.vc.0,
            self.frame_id,
            self.policy,
            self.reason
        )
    }
}

/// Per-port cell buffer.
#[derive(Debug, Clone)]
pub struct PortBuffer {
    k: u64,
    x: u64,
    n_active: usize,
    policy: DropPolicy,
    vcs: Vec<VcAccount>,
    log: Option<Vec<DropRecord>>,
    total_dropped: u64,
}

impl PortBuffer {
    /// `weights[i]` is the WBA weight of VC `i`; other policies ignore it.
    pub fn new(k: u64, policy: DropPolicy, weights: &[f64]) -> Self {
        PortBuffer {
            k,
            x: 0,
            n_active: 0,
            policy,
            vcs: weights
                .iter()
                .map(|&weight| VcAccount { weight, ..Default::default() })
                .collect(),
            log: None,
            total_dropped: 0,
        }
    }

    pub fn enable_drop_log(&mut self) {
        self.log.get_or_insert_with(Vec::new);
    }

    pub fn drop_log(&self) -> &[DropRecord] {
        self.log.as_deref().unwrap_or(&[])
    }

    pub fn policy(&self) -> DropPolicy {
        self.policy
    }

    pub fn capacity(&self) -> u64 {
        self.k
    }

    pub fn occupancy(&self) -> u64 {
        self.x
    }

    pub fn active_vcs(&self) -> usize {
        self.n_active
    }

    pub fn vc_occupancy(&self, vc: VcId) -> u64 {
        self.vcs[vc.index()].y
    }

    pub fn vc_untagged(&self, vc: VcId) -> u64 {
        self.vcs[vc.index()].l
    }

    pub fn vc_weight(&self, vc: VcId) -> f64 {
        self.vcs[vc.index()].weight
    }

    /// (enqueued, dequeued, dropped) cell counts of one VC.
    pub fn vc_counters(&self, vc: VcId) -> (u64, u64, u64) {
        let a = &self.vcs[vc.index()];
        (a.enqueued, a.dequeued, a.dropped)
    }

    pub fn total_dropped(&self) -> u64 {
        self.total_dropped
    }

    fn threshold(&self, fraction: f64) -> f64 {
        fraction * self.k as f64
    }

    /// Weighted Buffer Allocation, first cell of a frame.
    pub fn wba_decide(&self, vc: VcId, first_cell_tagged: bool) -> FrameDecision {
        let DropPolicy::Wba { r, z } = self.policy else {
            panic!("wba_decide on a {} buffer", self.policy.name());
        };
        let r = self.threshold(r);
        let x = self.x as f64;
        let a = &self.vcs[vc.index()];
        if x <= r {
            // x == r is not covered by either branch of the rule; treat the
            // buffer as uncongested
            return FrameDecision::Accept;
        }
        let fair = r * a.weight;
        if (a.l as f64) < fair && !first_cell_tagged {
            return FrameDecision::Accept;
        }
        if (a.y as f64 - fair) * (self.n_active as f64) < z * (x - r) {
            FrameDecision::Accept
        } else {
            FrameDecision::Drop
        }
    }

    /// Selective Drop, first cell of a frame.
    pub fn selective_drop_decide(&self, vc: VcId) -> FrameDecision {
        let DropPolicy::Selective { r, z } = self.policy else {
            panic!("selective_drop_decide on a {} buffer", self.policy.name());
        };
        let x = self.x as f64;
        if x <= self.threshold(r) {
            return FrameDecision::Accept;
        }
        let y = self.vcs[vc.index()].y as f64;
        if y * (self.n_active as f64) < z * x {
            FrameDecision::Accept
        } else {
            FrameDecision::Drop
        }
    }

    /// Early Packet Discard, first cell of a frame.
    pub fn epd_decide(&self) -> FrameDecision {
        let DropPolicy::Epd { r } = self.policy else {
            panic!("epd_decide on a {} buffer", self.policy.name());
        };
        if (self.x as f64) < self.threshold(r) {
            FrameDecision::Accept
        } else {
            FrameDecision::Drop
        }
    }

    fn decide(&self, cell: &Cell) -> FrameDecision {
        match self.policy {
            DropPolicy::Tail => FrameDecision::Accept,
            DropPolicy::Epd { .. } => self.epd_decide(),
            DropPolicy::Selective { .. } => self.selective_drop_decide(cell.vc),
            DropPolicy::Wba { .. } => self.wba_decide(cell.vc, cell.clp),
        }
    }

    /// Decides the fate of an arriving cell and, on `Enqueue`, accounts it.
    pub fn admit_cell(&mut self, cell: &Cell, now: SimTime) -> Admission {
        let state = self.vcs[cell.vc.index()].frame;
        let verdict = if cell.is_first() || state == FrameState::Boundary {
            match self.decide(cell) {
                FrameDecision::Accept => Admission::Enqueue,
                // a one-cell frame is its own EOM; nothing to delimit
                FrameDecision::Drop => Admission::Drop(DropReason::Policy),
            }
        } else if state == FrameState::Discarding && !cell.eom {
            Admission::Drop(DropReason::FrameDiscard)
        } else {
            Admission::Enqueue
        };
        let verdict = match verdict {
            Admission::Enqueue if self.x >= self.k => Admission::Drop(DropReason::Overflow),
            Admission::Drop(DropReason::Policy) if cell.eom && !cell.is_first() => Admission::Enqueue,
            v => v,
        };

        let account = &mut self.vcs[cell.vc.index()];
        account.frame = match (cell.eom, verdict) {
            (true, _) => FrameState::Boundary,
            (false, Admission::Enqueue) if state != FrameState::Discarding || cell.is_first() => {
                FrameState::Accepting
            }
            (false, Admission::Enqueue) => FrameState::Discarding,
            (false, Admission::Drop(_)) => FrameState::Discarding,
        };

        match verdict {
            Admission::Enqueue => {
                if account.y == 0 {
                    self.n_active += 1;
                }
                account.y += 1;
                if !cell.clp {
                    account.l += 1;
                }
                account.enqueued += 1;
                self.x += 1;
            }
            Admission::Drop(reason) => {
                account.dropped += 1;
                self.total_dropped += 1;
                if let Some(log) = self.log.as_mut() {
                    log.push(DropRecord {
                        time: now,
                        vc: cell.vc,
                        frame_id: cell.frame_id,
                        policy: self.policy.name(),
                        reason,
                    });
                }
            }
        }
        verdict
    }

    /// Accounts for a cell leaving the buffer.
    ///
    /// Panics on underflow: it means a cell left that was never admitted.
    pub fn dequeue_notify(&mut self, cell: &Cell) {
        let account = &mut self.vcs[cell.vc.index()];
        assert!(account.y > 0 && self.x > 0, "buffer accounting underflow on {}", cell.vc);
        account.y -= 1;
        if !cell.clp {
            assert!(account.l > 0, "untagged accounting underflow on {}", cell.vc);
            account.l -= 1;
        }
        account.dequeued += 1;
        self.x -= 1;
        if account.y == 0 {
            self.n_active -= 1;
        }
    }

    /// Verifies `x = sum(y_i)`, `l_i <= y_i <= x <= k`, the active count and
    /// per-VC conservation. Linear in the number of VCs.
    pub fn check_invariants(&self) {
        let sum: u64 = self.vcs.iter().map(|a| a.y).sum();
        assert_eq!(sum, self.x, "occupancy differs from per-VC sum");
        assert!(self.x <= self.k, "occupancy above capacity");
        let active = self.vcs.iter().filter(|a| a.y > 0).count();
        assert_eq!(active, self.n_active, "active VC count out of sync");
        for a in &self.vcs {
            assert!(a.l <= a.y);
            assert_eq!(a.enqueued - a.dequeued, a.y);
        }
    }
}
