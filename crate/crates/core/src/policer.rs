//! Frame-based GCRA network tagger.
//!
//! Runs the continuous-state leaky bucket per VC at the network entrance.
//! Conformance is decided once per frame, at its first cell; the verdict then
//! sticks to every following cell except the EOM cell, which is never tagged
//! and never charged to the bucket.
//!
//! The bucket counter lives in integer nanoseconds so verdicts are exactly
//! reproducible. The limit test `X1 > BT/2 + CDVT` is evaluated doubled to
//! stay in integers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::SimTime;
use crate::traffic::Cell;

#[derive(Debug, Error, PartialEq)]
pub enum PolicerError {
    #[error("contract rates must satisfy 0 < mcr <= pcr (mcr {mcr}, pcr {pcr})")]
    InvalidRates { mcr: f64, pcr: f64 },
    #[error("maximum frame size must be at least one cell")]
    EmptyFrame,
    #[error("cdvt must be a finite non-negative number of seconds, got {0}")]
    InvalidCdvt(f64),
    #[error("trace record {index}: arrival time decreases")]
    DecreasingTime { index: usize },
    #[error("trace record {index}: frame starts before the previous frame's last cell")]
    OverlappingFrame { index: usize },
    #[error("trace record {index}: frame of zero cells")]
    ZeroCellFrame { index: usize },
    #[error("trace line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Conformance parameters for one GFR VC.
#[derive(Debug, Clone, PartialEq)]
pub struct GfrContract {
    /// Cells per second.
    pub mcr: f64,
    /// Cells per second.
    pub pcr: f64,
    pub max_frame_cells: u32,
    /// Seconds.
    pub cdvt: f64,
    increment: u64,
    burst_tolerance: u64,
    cdvt_ns: u64,
}

impl GfrContract {
    pub fn new(mcr: f64, pcr: f64, max_frame_cells: u32, cdvt: f64) -> Result<Self, PolicerError> {
        if !(mcr > 0.0 && mcr.is_finite() && pcr.is_finite() && mcr <= pcr) {
            return Err(PolicerError::InvalidRates { mcr, pcr });
        }
        if max_frame_cells == 0 {
            return Err(PolicerError::EmptyFrame);
        }
        if !(cdvt >= 0.0 && cdvt.is_finite()) {
            return Err(PolicerError::InvalidCdvt(cdvt));
        }
        let mbs = f64::from(2 * max_frame_cells);
        let bt = (mbs - 1.0) * (1.0 / mcr - 1.0 / pcr);
        Ok(GfrContract {
            mcr,
            pcr,
            max_frame_cells,
            cdvt,
            increment: SimTime::interval_for_rate(mcr).as_nanos(),
            burst_tolerance: SimTime::from_secs_f64(bt).as_nanos(),
            cdvt_ns: SimTime::from_secs_f64(cdvt).as_nanos(),
        })
    }

    /// Contract with CDVT set to half a cell time at PCR.
    pub fn with_default_cdvt(mcr: f64, pcr: f64, max_frame_cells: u32) -> Result<Self, PolicerError> {
        Self::new(mcr, pcr, max_frame_cells, 0.5 / pcr)
    }

    /// Maximum burst size: two maximum-size frames.
    pub fn mbs(&self) -> u32 {
        2 * self.max_frame_cells
    }

    /// Emission interval `I = 1/MCR`.
    pub fn increment(&self) -> SimTime {
        SimTime(self.increment)
    }

    /// `BT = (MBS - 1)(1/MCR - 1/PCR)`.
    pub fn burst_tolerance(&self) -> SimTime {
        SimTime(self.burst_tolerance)
    }

    pub fn cdvt_time(&self) -> SimTime {
        SimTime(self.cdvt_ns)
    }

    /// `L = CDVT + BT/2`, rounded down to a whole nanosecond.
    pub fn limit(&self) -> SimTime {
        SimTime(self.cdvt_ns + self.burst_tolerance / 2)
    }

    fn exceeds_limit(&self, x1: u64) -> bool {
        2 * u128::from(x1) > u128::from(self.burst_tolerance) + 2 * u128::from(self.cdvt_ns)
    }
}

/// Leaky-bucket state of one VC.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PolicerState {
    /// Bucket counter in nanoseconds.
    pub x: u64,
    /// Last compliance time.
    pub lct: SimTime,
    pub tagging: bool,
}

impl PolicerState {
    fn drained(&self, t: SimTime) -> u64 {
        // cells never arrive before the last compliance time in practice;
        // saturate so an early cell is charged against a full counter
        self.x.saturating_sub(t.as_nanos().saturating_sub(self.lct.as_nanos()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Conforming,
    Tagged,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Conforming => "conforming",
            Verdict::Tagged => "tagged",
        })
    }
}

/// First-cell rule. Non-conforming leaves the bucket untouched.
pub fn police_first_cell(state: &mut PolicerState, contract: &GfrContract, t: SimTime) -> Verdict {
    let x1 = state.drained(t);
    if contract.exceeds_limit(x1) {
        state.tagging = true;
        Verdict::Tagged
    } else {
        state.tagging = false;
        state.x = x1 + contract.increment;
        state.lct = t;
        Verdict::Conforming
    }
}

/// Rule for every cell after the first.
pub fn police_mid_cell(state: &mut PolicerState, contract: &GfrContract, t: SimTime, is_eom: bool) -> Verdict {
    if state.tagging {
        if is_eom {
            Verdict::Conforming
        } else {
            Verdict::Tagged
        }
    } else {
        state.x = state.drained(t) + contract.increment;
        state.lct = t;
        Verdict::Conforming
    }
}

/// What happens to non-conforming cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicingMode {
    #[default]
    Tag,
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoliceAction {
    Forward,
    Drop,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PolicerStats {
    pub conforming_frames: u64,
    pub nonconforming_frames: u64,
    pub tagged_cells: u64,
    pub dropped_cells: u64,
}

/// A per-VC policer as deployed at the network entrance.
#[derive(Debug, Clone)]
pub struct VcPolicer {
    pub contract: GfrContract,
    pub state: PolicerState,
    pub mode: PolicingMode,
    pub stats: PolicerStats,
}

impl VcPolicer {
    pub fn new(contract: GfrContract, mode: PolicingMode) -> Self {
        VcPolicer {
            contract,
            state: PolicerState::default(),
            mode,
            stats: PolicerStats::default(),
        }
    }

    /// Polices `cell` arriving at `t`, setting its CLP bit in tag mode.
    pub fn police(&mut self, cell: &mut Cell, t: SimTime) -> PoliceAction {
        let verdict = if cell.is_first() {
            let v = police_first_cell(&mut self.state, &self.contract, t);
            match v {
                Verdict::Conforming => self.stats.conforming_frames += 1,
                Verdict::Tagged => self.stats.nonconforming_frames += 1,
            }
            // a one-cell frame's only cell is its EOM
            if cell.eom {
                self.state.tagging = false;
                Verdict::Conforming
            } else {
                v
            }
        } else {
            police_mid_cell(&mut self.state, &self.contract, t, cell.eom)
        };
        match (verdict, self.mode) {
            (Verdict::Conforming, _) => PoliceAction::Forward,
            (Verdict::Tagged, PolicingMode::Tag) => {
                cell.clp = true;
                self.stats.tagged_cells += 1;
                PoliceAction::Forward
            }
            (Verdict::Tagged, PolicingMode::Drop) => {
                self.stats.dropped_cells += 1;
                PoliceAction::Drop
            }
        }
    }
}

/// One frame of a replay trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceFrame {
    pub arrival: SimTime,
    pub cells: u32,
}

/// Replays frames whose cells arrive back to back at PCR, starting at each
/// frame's arrival time, and returns the per-frame verdicts.
pub fn classify_frame_trace(trace: &[TraceFrame], contract: &GfrContract) -> Result<Vec<Verdict>, PolicerError> {
    let spacing = SimTime::interval_for_rate(contract.pcr);
    let mut state = PolicerState::default();
    let mut out = Vec::with_capacity(trace.len());
    let mut prev_arrival = SimTime::ZERO;
    let mut prev_end: Option<SimTime> = None;
    for (index, frame) in trace.iter().enumerate() {
        if frame.cells == 0 {
            return Err(PolicerError::ZeroCellFrame { index });
        }
        if frame.arrival < prev_arrival {
            return Err(PolicerError::DecreasingTime { index });
        }
        if prev_end.is_some_and(|end| frame.arrival <= end) {
            return Err(PolicerError::OverlappingFrame { index });
        }
        let verdict = police_first_cell(&mut state, contract, frame.arrival);
        let mut t = frame.arrival;
        for k in 1..frame.cells {
            t += spacing;
            police_mid_cell(&mut state, contract, t, k + 1 == frame.cells);
        }
        prev_arrival = frame.arrival;
        prev_end = Some(t);
        out.push(verdict);
    }
    Ok(out)
}

/// Parses the replay format: one `arrival_ns frame_cells` record per line,
/// separated by whitespace or a comma. Blank lines and `#` comments are
/// skipped.
pub fn parse_trace(text: &str) -> Result<Vec<TraceFrame>, PolicerError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        let err = |reason: String| PolicerError::Parse { line: i + 1, reason };
        if fields.len() != 2 {
            return Err(err(format!("expected 2 fields, found {}", fields.len())));
        }
        let arrival = u64::from_str(fields[0]).map_err(|e| err(format!("arrival_ns: {e}")))?;
        let cells = u32::from_str(fields[1]).map_err(|e| err(format!("frame_cells: {e}")))?;
        out.push(TraceFrame { arrival: SimTime(arrival), cells });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn contract() -> GfrContract {
        // 10 000 cells/s MCR, 353 207 cells/s PCR, 23-cell frames
        GfrContract::with_default_cdvt(10_000.0, 149.7e6 / 424.0, 23).unwrap()
    }

    #[test]
    fn derived_parameters() {
        let c = contract();
        assert_eq!(c.mbs(), 46);
        assert_eq!(c.increment(), SimTime(100_000));
        // (46 - 1) * (100 us - 2.8323 us) = 4372.55 us
        assert_eq!(c.burst_tolerance().as_nanos(), 4_372_545);
        assert!(c.limit() >= c.cdvt_time());
        assert_eq!(c.cdvt_time(), SimTime(1416));
    }

    #[test]
    fn contract_validation() {
        assert!(GfrContract::new(0.0, 10.0, 23, 0.0).is_err());
        assert!(GfrContract::new(20.0, 10.0, 23, 0.0).is_err());
        assert!(GfrContract::new(10.0, 10.0, 0, 0.0).is_err());
        assert!(GfrContract::new(10.0, 10.0, 1, -1.0).is_err());
        let c = GfrContract::new(10.0, 10.0, 1, 0.0).unwrap();
        assert_eq!(c.burst_tolerance(), SimTime::ZERO);
    }

    #[test]
    fn empty_bucket_conforms() {
        let c = contract();
        let mut s = PolicerState::default();
        assert_eq!(police_first_cell(&mut s, &c, SimTime::ZERO), Verdict::Conforming);
        assert_eq!(s.x, c.increment().as_nanos());
        assert_eq!(s.lct, SimTime::ZERO);
        assert!(!s.tagging);
    }

    #[test]
    fn full_bucket_tags_and_leaves_state() {
        let c = contract();
        let lct = SimTime(5_000);
        let mut s = PolicerState {
            x: c.limit().as_nanos() + c.increment().as_nanos(),
            lct,
            tagging: false,
        };
        let before = s;
        assert_eq!(police_first_cell(&mut s, &c, lct), Verdict::Tagged);
        assert!(s.tagging);
        assert_eq!((s.x, s.lct), (before.x, before.lct));
    }

    #[test]
    fn limit_boundary_is_inclusive() {
        let c = GfrContract::new(1e6, 1e6, 1, 1e-6).unwrap();
        // BT = 0, limit = 1000 ns
        let mut s = PolicerState { x: 1000, lct: SimTime::ZERO, tagging: false };
        assert_eq!(police_first_cell(&mut s, &c, SimTime::ZERO), Verdict::Conforming);
        let mut s = PolicerState { x: 1001, lct: SimTime::ZERO, tagging: false };
        assert_eq!(police_first_cell(&mut s, &c, SimTime::ZERO), Verdict::Tagged);
    }

    #[test]
    fn mid_cell_rules() {
        let c = contract();
        let mut s = PolicerState::default();
        assert_eq!(police_mid_cell(&mut s, &c, SimTime(10), false), Verdict::Conforming);
        assert_eq!(s.x, c.increment().as_nanos());
        assert_eq!(s.lct, SimTime(10));

        let mut s = PolicerState { x: 7, lct: SimTime(3), tagging: true };
        assert_eq!(police_mid_cell(&mut s, &c, SimTime(10), false), Verdict::Tagged);
        assert_eq!(police_mid_cell(&mut s, &c, SimTime(11), true), Verdict::Conforming);
        assert_eq!((s.x, s.lct), (7, SimTime(3)));
    }

    #[test]
    fn policer_tags_whole_frame_but_eom() {
        let c = contract();
        let mut p = VcPolicer::new(c.clone(), PolicingMode::Tag);
        p.state = PolicerState { x: 10 * c.limit().as_nanos(), lct: SimTime::ZERO, tagging: false };
        let spacing = SimTime(2832);
        let mut t = SimTime::ZERO;
        let frame = crate::traffic::segment_to_frame(crate::traffic::TcpSegment::data(0, 1024), crate::traffic::VcId(0), 0);
        let mut cells: Vec<Cell> = frame.cells().collect();
        for cell in cells.iter_mut() {
            assert_eq!(p.police(cell, t), PoliceAction::Forward);
            t += spacing;
        }
        assert!(cells[..22].iter().all(|c| c.clp));
        assert!(!cells[22].clp);
        assert_eq!(p.stats.nonconforming_frames, 1);
        assert_eq!(p.stats.tagged_cells, 22);
    }

    #[test]
    fn drop_mode_passes_only_eom() {
        let c = contract();
        let mut p = VcPolicer::new(c.clone(), PolicingMode::Drop);
        p.state = PolicerState { x: 10 * c.limit().as_nanos(), lct: SimTime::ZERO, tagging: false };
        let frame = crate::traffic::segment_to_frame(crate::traffic::TcpSegment::data(0, 1024), crate::traffic::VcId(0), 0);
        let actions: Vec<_> = frame.cells().map(|mut cell| p.police(&mut cell, SimTime::ZERO)).collect();
        assert!(actions[..22].iter().all(|a| *a == PoliceAction::Drop));
        assert_eq!(actions[22], PoliceAction::Forward);
    }

    #[test]
    fn under_subscribed_trace_all_conforming() {
        let c = contract();
        let period = c.increment().as_nanos() * 23 * 2;
        let trace: Vec<_> = (0..1000).map(|k| TraceFrame { arrival: SimTime(k * period), cells: 23 }).collect();
        let v = classify_frame_trace(&trace, &c).unwrap();
        assert!(v.iter().all(|v| *v == Verdict::Conforming));
    }

    #[test]
    fn frame_after_idle_conforms() {
        let c = contract();
        let mut trace: Vec<_> = (0..50u64).map(|k| TraceFrame { arrival: SimTime(k * 70_000), cells: 23 }).collect();
        trace.push(TraceFrame { arrival: SimTime::from_secs(10), cells: 23 });
        let v = classify_frame_trace(&trace, &c).unwrap();
        assert!(v[..50].contains(&Verdict::Tagged));
        assert_eq!(*v.last().unwrap(), Verdict::Conforming);
    }

    #[test]
    fn trace_rejects_bad_order() {
        let c = contract();
        let t = |a, n| TraceFrame { arrival: SimTime(a), cells: n };
        assert_eq!(
            classify_frame_trace(&[t(100, 1), t(50, 1)], &c),
            Err(PolicerError::DecreasingTime { index: 1 })
        );
        assert_eq!(
            classify_frame_trace(&[t(0, 23), t(100, 1)], &c),
            Err(PolicerError::OverlappingFrame { index: 1 })
        );
        assert_eq!(classify_frame_trace(&[t(0, 0)], &c), Err(PolicerError::ZeroCellFrame { index: 0 }));
    }

    #[test]
    fn parse_trace_format() {
        let text = "# arrival_ns frame_cells\n0 23\n\n100000, 23\n  250000\t1  # tail\n";
        let t = parse_trace(text).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t[1], TraceFrame { arrival: SimTime(100_000), cells: 23 });
        assert!(matches!(parse_trace("1 2 3"), Err(PolicerError::Parse { line: 1, .. })));
        assert!(matches!(parse_trace("x 2"), Err(PolicerError::Parse { .. })));
    }
}
