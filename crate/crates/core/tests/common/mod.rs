//! Reference models and randomized drivers shared by the property and
//! acceptance suites.

#![allow(dead_code)]

use std::collections::{HashMap, VecDeque};

use gfr_core::buffer::{Admission, DropPolicy, DropReason, PortBuffer};
use gfr_core::policer::{classify_frame_trace, GfrContract, PoliceAction, TraceFrame};
use gfr_core::sched::{Scheduler, SchedulerKind, WfqScheduler};
use gfr_core::topology::RunResult;
use gfr_core::{Allocation, Cell, PolicingMode, Scenario, SimTime, Tagging, VcId, VcPolicer, Verdict};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn frame_cells(vc: u32, frame_id: u64, n: u16, tagged: bool) -> Vec<Cell> {
    (0..n)
        .map(|index| Cell {
            vc: VcId(vc),
            frame_id,
            index,
            frame_cells: n,
            clp: tagged && index + 1 != n,
            eom: index + 1 == n,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Policer oracle
// ---------------------------------------------------------------------------

/// Contract with integral rates so the oracle can run in exact arithmetic.
#[derive(Debug, Clone, Copy)]
pub struct IntContract {
    pub mcr: u64,
    pub pcr: u64,
    pub max_frame_cells: u32,
    pub cdvt_ns: u64,
}

impl IntContract {
    pub fn to_contract(self) -> GfrContract {
        GfrContract::new(self.mcr as f64, self.pcr as f64, self.max_frame_cells, self.cdvt_ns as f64 * 1e-9)
            .expect("valid contract")
    }

    pub fn cell_spacing_ns(self) -> u64 {
        (1e9 / self.pcr as f64).round() as u64
    }
}

/// Token bucket in exact integer units.
///
/// Tokens arrive at MCR per second and each conforming cell takes one. The
/// bucket holds MBS/2 tokens plus the limit's worth of MCR credit; a frame
/// conforms when its first cell finds at least MBS/2 tokens. One token is
/// `2 * 10^9 * PCR` units, which makes the refill per nanosecond and the
/// depth both integers.
pub struct TokenBucketOracle {
    c: IntContract,
    unit: i128,
    depth: i128,
    tokens: i128,
    last: u64,
}

impl TokenBucketOracle {
    pub fn new(c: IntContract) -> Self {
        let unit = 2 * 1_000_000_000 * c.pcr as i128;
        let mbs = 2 * c.max_frame_cells as i128;
        // limit = cdvt + (mbs - 1)(1/mcr - 1/pcr) / 2, in tokens times unit
        let cdvt_credit = c.cdvt_ns as i128 * c.mcr as i128 * 2 * c.pcr as i128;
        let bt_credit = (mbs - 1) * (c.pcr as i128 - c.mcr as i128) * 1_000_000_000;
        let depth = (mbs / 2) * unit + cdvt_credit + bt_credit;
        TokenBucketOracle { c, unit, depth, tokens: depth, last: 0 }
    }

    fn refill(&mut self, t: u64) {
        let gained = (t - self.last) as i128 * self.c.mcr as i128 * 2 * self.c.pcr as i128;
        self.tokens = (self.tokens + gained).min(self.depth);
        self.last = t;
    }

    fn threshold(&self) -> i128 {
        self.c.max_frame_cells as i128 * self.unit
    }

    /// Tokens in excess of the first-cell threshold at time `t`, in tokens.
    pub fn margin_at(&mut self, t: u64) -> f64 {
        self.refill(t);
        (self.tokens - self.threshold()) as f64 / self.unit as f64
    }

    pub fn verdict_at(&mut self, t: u64) -> Verdict {
        if self.margin_at(t) >= 0.0 {
            Verdict::Conforming
        } else {
            Verdict::Tagged
        }
    }

    /// Charges a conforming frame whose cells arrive at `times`.
    pub fn charge(&mut self, times: &[u64]) {
        for &t in times {
            self.refill(t);
            self.tokens -= self.unit;
        }
    }
}

#[derive(Debug, Default)]
pub struct OracleComparison {
    pub frames: usize,
    /// Disagreements with the oracle within one token of its threshold.
    pub boundary: usize,
    /// Disagreements anywhere else; index and oracle margin of each.
    pub mismatches: Vec<(usize, f64)>,
}

/// Runs the trace through the library policer and the token-bucket oracle.
///
/// After a boundary disagreement the oracle adopts the policer's verdict so
/// the two states stay comparable.
pub fn compare_with_oracle(c: IntContract, trace: &[TraceFrame]) -> OracleComparison {
    let verdicts = classify_frame_trace(trace, &c.to_contract()).expect("well-formed trace");
    let spacing = c.cell_spacing_ns();
    let mut oracle = TokenBucketOracle::new(c);
    let mut out = OracleComparison { frames: trace.len(), ..Default::default() };
    for (i, (f, &got)) in trace.iter().zip(&verdicts).enumerate() {
        let t0 = f.arrival.as_nanos();
        let margin = oracle.margin_at(t0);
        let expected = oracle.verdict_at(t0);
        if expected != got {
            if margin.abs() <= 1.0 {
                out.boundary += 1;
            } else {
                out.mismatches.push((i, margin));
            }
        }
        if got == Verdict::Conforming {
            let times: Vec<u64> = (0..u64::from(f.cells)).map(|k| t0 + k * spacing).collect();
            oracle.charge(&times);
        }
    }
    out
}

/// A random contract and trace; a mix of idle gaps, back-to-back frames and
/// overload.
pub fn random_trace(rng: &mut impl Rng) -> (IntContract, Vec<TraceFrame>) {
    let pcr = rng.gen_range(100_000..=400_000u64);
    let mcr = rng.gen_range(1_000..=pcr / 2);
    let max_frame_cells = rng.gen_range(1..=32u32);
    let cdvt_ns = if rng.gen_bool(0.3) { 0 } else { rng.gen_range(0..=20_000) };
    let c = IntContract { mcr, pcr, max_frame_cells, cdvt_ns };
    let spacing = c.cell_spacing_ns();
    let frame_ns = 1e9 / mcr as f64;
    let n = rng.gen_range(1..=40);
    let mut t = rng.gen_range(0..1_000_000u64);
    let mut trace = Vec::with_capacity(n);
    for _ in 0..n {
        let cells = rng.gen_range(1..=max_frame_cells);
        trace.push(TraceFrame { arrival: SimTime(t), cells });
        let busy = u64::from(cells - 1) * spacing + 1;
        let gap = (rng.gen_range(0.0..2.5) * frame_ns * f64::from(cells)) as u64;
        t += busy + gap;
    }
    (c, trace)
}

// ---------------------------------------------------------------------------
// Policer frame atomicity
// ---------------------------------------------------------------------------

/// Polices random frames and checks every frame is treated as a unit.
pub fn check_policer_atomicity(seed: u64, frames: usize, mode: PolicingMode) -> Result<(), String> {
    let mut rng = rng(seed);
    let pcr = 353_207.0;
    let mcr = rng.gen_range(2_000.0..100_000.0);
    let max = rng.gen_range(1..=32u16);
    let contract = GfrContract::with_default_cdvt(mcr, pcr, u32::from(max)).map_err(|e| e.to_string())?;
    let mut policer = VcPolicer::new(contract, mode);
    let spacing = SimTime::interval_for_rate(pcr).as_nanos();
    let mut t = 0u64;
    for frame_id in 0..frames as u64 {
        let n = rng.gen_range(1..=max);
        let mut actions = Vec::new();
        for mut cell in frame_cells(0, frame_id, n, false) {
            let action = policer.police(&mut cell, SimTime(t));
            actions.push((cell, action));
            t += spacing;
        }
        let (eom, eom_action) = actions.last().copied().expect("non-empty frame");
        if eom.clp || eom_action != PoliceAction::Forward {
            return Err(format!("frame {frame_id}: EOM cell tagged or dropped"));
        }
        let body = &actions[..actions.len() - 1];
        if let Some((first, first_action)) = body.first() {
            if body.iter().any(|(c, a)| c.clp != first.clp || a != first_action) {
                return Err(format!("frame {frame_id}: cells before the EOM treated differently"));
            }
        }
        t += (rng.gen_range(0.0..3.0) * f64::from(n) * 1e9 / mcr) as u64;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Buffer conservation and frame atomicity
// ---------------------------------------------------------------------------

pub fn random_policy(rng: &mut impl Rng) -> DropPolicy {
    let r = rng.gen_range(0.2..=1.0);
    let z = rng.gen_range(0.2..=1.0);
    match rng.gen_range(0..4) {
        0 => DropPolicy::Tail,
        1 => DropPolicy::Epd { r },
        2 => DropPolicy::Selective { r, z },
        _ => DropPolicy::Wba { r, z },
    }
}

#[derive(Debug, Default)]
pub struct BufferRunStats {
    pub offered: u64,
    pub enqueued: u64,
    pub dropped: u64,
    pub dequeued: u64,
}

#[derive(Default)]
struct FrameTrack {
    lost_body_cell: bool,
    first_rejected: bool,
}

/// Drives a buffer with `ops` random arrivals and departures, checking cell
/// conservation at every step and frame atomicity for every frame.
pub fn check_buffer_conservation(seed: u64, ops: usize) -> Result<BufferRunStats, String> {
    let mut rng = rng(seed);
    let n_vcs = rng.gen_range(1..=8usize);
    let k = rng.gen_range(20..=600u64);
    let policy = random_policy(&mut rng);
    let raw: Vec<f64> = (0..n_vcs).map(|_| rng.gen_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let mut buf = PortBuffer::new(k, policy, &weights);
    let mut queue: VecDeque<Cell> = VecDeque::new();
    let mut pending: Vec<VecDeque<Cell>> = vec![VecDeque::new(); n_vcs];
    let mut frames: HashMap<(u32, u64), FrameTrack> = HashMap::new();
    let mut next_frame = 0u64;
    let mut stats = BufferRunStats::default();
    let arrival_bias = rng.gen_range(0.45..0.75);
    let ctx = |msg: String| format!("k={k} policy={policy:?}: {msg}");

    for op in 0..ops {
        let now = SimTime(op as u64);
        if rng.gen_bool(arrival_bias) || queue.is_empty() {
            let v = rng.gen_range(0..n_vcs);
            if pending[v].is_empty() {
                let n = rng.gen_range(1..=23u16);
                let tagged = rng.gen_bool(0.3);
                pending[v].extend(frame_cells(v as u32, next_frame, n, tagged));
                next_frame += 1;
            }
            let cell = pending[v].pop_front().expect("frame in progress");
            stats.offered += 1;
            let track = frames.entry((cell.vc.0, cell.frame_id)).or_default();
            match buf.admit_cell(&cell, now) {
                Admission::Enqueue => {
                    if !cell.eom && (track.lost_body_cell || track.first_rejected) {
                        return Err(ctx(format!("frame {} resumed after losing a cell", cell.frame_id)));
                    }
                    stats.enqueued += 1;
                    queue.push_back(cell);
                }
                Admission::Drop(reason) => {
                    if cell.eom && !cell.is_first() && reason != DropReason::Overflow {
                        return Err(ctx(format!("EOM of frame {} dropped by {reason}", cell.frame_id)));
                    }
                    if cell.is_first() && reason == DropReason::Policy {
                        track.first_rejected = true;
                    }
                    if !cell.eom {
                        track.lost_body_cell = true;
                    }
                    stats.dropped += 1;
                }
            }
            if cell.eom {
                frames.remove(&(cell.vc.0, cell.frame_id));
            }
        } else {
            let cell = queue.pop_front().expect("non-empty queue");
            buf.dequeue_notify(&cell);
            stats.dequeued += 1;
        }

        if buf.occupancy() != queue.len() as u64 {
            return Err(ctx(format!("op {op}: occupancy {} but {} cells queued", buf.occupancy(), queue.len())));
        }
        if buf.occupancy() > k {
            return Err(ctx(format!("op {op}: occupancy above capacity")));
        }
        if stats.offered != stats.enqueued + stats.dropped || buf.total_dropped() != stats.dropped {
            return Err(ctx(format!("op {op}: offered cells not conserved")));
        }
        if op % 4096 == 0 {
            buf.check_invariants();
        }
    }
    buf.check_invariants();
    for v in 0..n_vcs {
        let (enq, deq, _) = buf.vc_counters(VcId(v as u32));
        if enq - deq != buf.vc_occupancy(VcId(v as u32)) {
            return Err(ctx(format!("vc {v}: per-VC counters do not balance")));
        }
    }
    Ok(stats)
}

// ---------------------------------------------------------------------------
// Schedulers
// ---------------------------------------------------------------------------

/// Random interleaving of arrivals and departures through the FIFO
/// scheduler; departures must equal arrivals in order.
pub fn check_fifo_order(seed: u64, ops: usize) -> Result<(), String> {
    let mut rng = rng(seed);
    let mut s = Scheduler::new(SchedulerKind::Fifo, &[1.0], 1.0);
    let mut arrived = Vec::new();
    let mut departed = Vec::new();
    for op in 0..ops as u64 {
        if rng.gen_bool(0.55) {
            let vc = rng.gen_range(0..6);
            let cell = Cell { vc: VcId(vc), frame_id: op, index: 0, frame_cells: 1, clp: rng.gen_bool(0.5), eom: true };
            s.enqueue(cell, SimTime(op));
            arrived.push(cell);
        } else if let Some(c) = s.next(SimTime(op)) {
            departed.push(c);
        }
    }
    while let Some(c) = s.next(SimTime(ops as u64)) {
        departed.push(c);
    }
    if arrived == departed {
        Ok(())
    } else {
        Err("FIFO departures differ from arrival order".into())
    }
}

/// Cell departure times under fluid GPS with shares `phi` (normalized) on a
/// link serving one cell every `cell_ns`. `arrivals` is sorted by time and
/// holds (time_ns, flow); result is indexed like `arrivals`.
pub fn gps_finish_times(phi: &[f64], cell_ns: f64, arrivals: &[(u64, usize)]) -> Vec<f64> {
    let rate = 1.0 / cell_ns;
    let n = phi.len();
    let mut arrived = vec![0usize; n];
    let mut served = vec![0.0f64; n];
    // per flow, arrival indices of cells not yet finished
    let mut waiting: Vec<VecDeque<usize>> = vec![VecDeque::new(); n];
    let mut finish = vec![f64::NAN; arrivals.len()];
    let mut next = 0;
    let mut t = 0.0f64;
    loop {
        while next < arrivals.len() && arrivals[next].0 as f64 <= t {
            let f = arrivals[next].1;
            arrived[f] += 1;
            waiting[f].push_back(next);
            next += 1;
        }
        let active: Vec<usize> = (0..n).filter(|&i| !waiting[i].is_empty()).collect();
        if active.is_empty() {
            if next == arrivals.len() {
                break;
            }
            t = arrivals[next].0 as f64;
            continue;
        }
        let share: f64 = active.iter().map(|&i| phi[i]).sum();
        let r = |i: usize| rate * phi[i] / share;
        // run until the next arrival or until some flow finishes a cell
        let mut dt = if next < arrivals.len() { arrivals[next].0 as f64 - t } else { f64::INFINITY };
        for &i in &active {
            let to_cell = ((arrived[i] - waiting[i].len() + 1) as f64 - served[i]) / r(i);
            dt = dt.min(to_cell.max(0.0));
        }
        for &i in &active {
            served[i] += r(i) * dt;
            let done = (arrived[i] - waiting[i].len() + 1) as f64;
            if served[i] >= done - 1e-9 {
                served[i] = done;
                let idx = waiting[i].pop_front().expect("active flow has a cell");
                finish[idx] = t + dt;
            }
        }
        t += dt;
    }
    finish
}

#[derive(Debug)]
pub struct WfqComparison {
    pub cells: usize,
    /// Largest WFQ departure lag behind GPS, in cell times.
    pub worst_lag_cells: f64,
}

/// Serves random bursty arrivals through the WFQ scheduler on a link and
/// compares every departure with the fluid GPS reference.
pub fn compare_wfq_with_gps(seed: u64) -> WfqComparison {
    let mut rng = rng(seed);
    let n = rng.gen_range(2..=8usize);
    let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = weights.iter().sum();
    let phi: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let cell_ns = 2832u64;
    let mut arrivals: Vec<(u64, usize)> = Vec::new();
    for f in 0..n {
        let bursts = rng.gen_range(1..=6);
        for _ in 0..bursts {
            let start = rng.gen_range(0..400 * cell_ns);
            let len = rng.gen_range(1..=60u64);
            let gap = if rng.gen_bool(0.5) { 0 } else { rng.gen_range(0..3 * cell_ns) };
            for k in 0..len {
                arrivals.push((start + k * gap, f));
            }
        }
    }
    arrivals.sort();
    let gps = gps_finish_times(&phi, cell_ns as f64, &arrivals);

    let mut wfq = WfqScheduler::new(&weights, 1e9 / cell_ns as f64);
    let mut ids: Vec<VecDeque<usize>> = vec![VecDeque::new(); n];
    let mut next = 0;
    let mut t = 0u64;
    let mut worst = f64::NEG_INFINITY;
    let mut served = 0;
    while served < arrivals.len() {
        while next < arrivals.len() && arrivals[next].0 <= t {
            let (at, f) = arrivals[next];
            ids[f].push_back(next);
            wfq.enqueue(Cell { vc: VcId(f as u32), frame_id: next as u64, index: 0, frame_cells: 1, clp: false, eom: true }, SimTime(at));
            next += 1;
        }
        match wfq.next(SimTime(t)) {
            Some(cell) => {
                let idx = ids[cell.vc.index()].pop_front().expect("queued cell");
                let depart = (t + cell_ns) as f64;
                worst = worst.max((depart - gps[idx]) / cell_ns as f64);
                served += 1;
                t += cell_ns;
            }
            None => t = arrivals[next].0,
        }
    }
    WfqComparison { cells: arrivals.len(), worst_lag_cells: worst }
}

/// Worst ratio, over all pairs of continuously backlogged flows and all
/// intervals, of `|S_i/phi_i - S_j/phi_j|` to one cell quantum of each flow
/// (`1/phi_i + 1/phi_j`). With `late_joins`, some flows become backlogged
/// part way through instead of at time zero.
pub fn wfq_backlogged_service_ratio(seed: u64, late_joins: bool) -> f64 {
    let mut rng = rng(seed);
    let n = rng.gen_range(2..=8usize);
    let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.02..1.0)).collect();
    let total: f64 = weights.iter().sum();
    let phi: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let cell_ns = 2832u64;
    let horizon = 4000u64;
    // each flow joins once and then stays backlogged to the end
    let joins: Vec<u64> = (0..n).map(|_| if !late_joins || rng.gen_bool(0.5) { 0 } else { rng.gen_range(0..horizon / 2) * cell_ns }).collect();
    let mut wfq = WfqScheduler::new(&weights, 1e9 / cell_ns as f64);
    let mut joined = vec![false; n];
    let mut served = vec![0u64; n];
    // per pair: running min and max of the normalized service difference
    let mut span: Vec<Vec<Option<(f64, f64)>>> = vec![vec![None; n]; n];
    let mut worst = f64::NEG_INFINITY;
    for step in 0..horizon {
        let t = step * cell_ns;
        for f in 0..n {
            if !joined[f] && joins[f] <= t {
                joined[f] = true;
                for k in 0..horizon {
                    wfq.enqueue(Cell { vc: VcId(f as u32), frame_id: k, index: 0, frame_cells: 1, clp: false, eom: true }, SimTime(t));
                }
            }
        }
        if let Some(c) = wfq.next(SimTime(t)) {
            served[c.vc.index()] += 1;
        }
        for i in 0..n {
            for j in i + 1..n {
                if !(joined[i] && joined[j]) {
                    continue;
                }
                let d = served[i] as f64 / phi[i] - served[j] as f64 / phi[j];
                let (lo, hi) = span[i][j].get_or_insert((d, d));
                *lo = lo.min(d);
                *hi = hi.max(d);
                worst = worst.max((*hi - *lo) / (1.0 / phi[i] + 1.0 / phi[j]));
            }
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Simulation helpers
// ---------------------------------------------------------------------------

pub fn small_scenario(seed: u64) -> Scenario {
    let mut rng = rng(seed);
    let n = 5 * rng.gen_range(1..=2usize);
    Scenario {
        n_sources: n,
        buffer_cells: rng.gen_range(500..=6000),
        allocation: if rng.gen_bool(0.5) { Allocation::Equal } else { Allocation::UnequalFiveGroups },
        tagging: [Tagging::Off, Tagging::Tag, Tagging::Drop][rng.gen_range(0..3)],
        buffer_policy: random_policy(&mut rng),
        scheduler: if rng.gen_bool(0.5) { SchedulerKind::Fifo } else { SchedulerKind::Wfq },
        duration: SimTime::from_millis(rng.gen_range(150..=400)),
        seed,
        ..Scenario::default()
    }
}

/// Everything observable about a run, for bit-identical comparison.
pub fn fingerprint(r: &RunResult) -> String {
    format!(
        "{:?}|{:?}|{:?}|{}|{}|{}|{}|{}",
        r.measured, r.vcs, r.port_drops, r.bottleneck_cells_sent, r.bottleneck_peak_occupancy, r.events, r.trace_digest, r.drop_log.len()
    )
}
