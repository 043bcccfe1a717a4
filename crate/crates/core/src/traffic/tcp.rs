//! SACK TCP: an infinite bulk sender and an ACK-every-segment receiver.
//!
//! The sender keeps a per-segment scoreboard (every data segment is exactly
//! one MSS) and runs scoreboard/pipe loss recovery: after three duplicate
//! ACKs it halves its window and, while the pipe estimate is below cwnd,
//! retransmits the lowest lost hole before sending new data.

use std::collections::{BTreeMap, VecDeque};

use crate::engine::{EventHandle, SimTime};

/// Duplicate ACKs that trigger fast retransmit, and SACKed segments above a
/// hole that mark it lost.
pub const DUP_THRESH: u32 = 3;
/// SACK blocks carried per ACK.
pub const MAX_SACK_BLOCKS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TcpSegment {
    pub seq_start: u64,
    pub seq_end: u64,
    pub is_ack: bool,
    pub ack_num: u64,
    /// Half-open byte ranges `[start, end)`, disjoint and ascending.
    pub sack_blocks: Vec<(u64, u64)>,
}

impl TcpSegment {
    pub fn data(seq_start: u64, len: u32) -> Self {
        TcpSegment {
            seq_start,
            seq_end: seq_start + u64::from(len),
            ..Default::default()
        }
    }

    pub fn ack(ack_num: u64, sack_blocks: Vec<(u64, u64)>) -> Self {
        TcpSegment {
            is_ack: true,
            ack_num,
            sack_blocks,
            ..Default::default()
        }
    }

    pub fn shifted(mut self, by: u64) -> Self {
        self.seq_start += by;
        self.seq_end += by;
        self
    }

    pub fn payload_len(&self) -> u32 {
        (self.seq_end - self.seq_start) as u32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TcpConfig {
    pub mss: u32,
    /// Receiver-advertised window in bytes.
    pub rcv_wnd: u64,
    /// Retransmission timer tick; computed timeouts round up to a multiple.
    pub timer_granularity: SimTime,
    pub min_rto: SimTime,
    pub initial_rto: SimTime,
    pub max_rto: SimTime,
}

impl Default for TcpConfig {
    fn default() -> Self {
        TcpConfig {
            mss: 1024,
            rcv_wnd: 600_000,
            timer_granularity: SimTime::from_millis(100),
            min_rto: SimTime::from_millis(200),
            initial_rto: SimTime::from_secs(1),
            max_rto: SimTime::from_secs(64),
        }
    }
}

impl TcpConfig {
    /// Rounds `rto` up to a timer tick and clamps it to `[min_rto, max_rto]`.
    pub fn quantize_rto(&self, rto: SimTime) -> SimTime {
        let g = self.timer_granularity.as_nanos().max(1);
        let ticks = rto.as_nanos().div_ceil(g);
        SimTime(ticks * g).max(self.min_rto).min(self.max_rto)
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct SegState {
    sent_at: SimTime,
    /// Ever sent more than once; such segments give no RTT sample.
    resent: bool,
    sacked: bool,
    /// Retransmitted during the current recovery episode.
    recovery_rexmit: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SenderStats {
    pub segments_sent: u64,
    pub retransmissions: u64,
    pub fast_retransmits: u64,
    pub timeouts: u64,
}

#[derive(Debug, Clone)]
pub struct TcpSender {
    cfg: TcpConfig,
    pub cwnd: u64,
    pub ssthresh: u64,
    pub snd_una: u64,
    pub snd_nxt: u64,
    /// Highest sequence ever sent.
    pub snd_max: u64,
    /// Scoreboard: one entry per segment in `[snd_una, snd_max)`.
    segs: VecDeque<SegState>,
    srtt: Option<f64>,
    rttvar: f64,
    pub rto: SimTime,
    pub in_fast_recovery: bool,
    recover: u64,
    /// Pipe when the current recovery began; pipe only grows through sends
    /// the window allows, so it stays under this or cwnd.
    entry_pipe: u64,
    /// Flight when the last recovery ended. Segments sent during recovery
    /// were counted against the pipe, so flight may exceed the reduced
    /// window until acknowledgements drain it.
    exit_flight: u64,
    dupacks: u32,
    rto_deadline: Option<SimTime>,
    /// Pending retransmission timer event, owned by whoever drives the engine.
    pub timer: Option<EventHandle>,
    pub stats: SenderStats,
}

impl TcpSender {
    pub fn new(cfg: TcpConfig) -> Self {
        let mss = u64::from(cfg.mss);
        TcpSender {
            cwnd: mss,
            ssthresh: cfg.rcv_wnd,
            snd_una: 0,
            snd_nxt: 0,
            snd_max: 0,
            segs: VecDeque::new(),
            srtt: None,
            rttvar: 0.0,
            rto: cfg.initial_rto,
            in_fast_recovery: false,
            recover: 0,
            entry_pipe: 0,
            exit_flight: 0,
            dupacks: 0,
            rto_deadline: None,
            timer: None,
            stats: SenderStats::default(),
            cfg,
        }
    }

    pub fn config(&self) -> &TcpConfig {
        &self.cfg
    }

    fn mss(&self) -> u64 {
        u64::from(self.cfg.mss)
    }

    /// Bytes sent and not cumulatively acknowledged.
    pub fn flight(&self) -> u64 {
        self.snd_nxt - self.snd_una
    }

    /// When the retransmission timer should fire, if it is running.
    pub fn rto_deadline(&self) -> Option<SimTime> {
        self.rto_deadline
    }

    pub fn srtt(&self) -> Option<SimTime> {
        self.srtt.map(SimTime::from_secs_f64)
    }

    pub fn rttvar(&self) -> SimTime {
        SimTime::from_secs_f64(self.rttvar)
    }

    fn seg_index(&self, seq: u64) -> usize {
        ((seq - self.snd_una) / self.mss()) as usize
    }

    /// SACKed byte ranges, merged, as half-open intervals.
    pub fn sacked_ranges(&self) -> Vec<(u64, u64)> {
        let mss = self.mss();
        let mut out: Vec<(u64, u64)> = Vec::new();
        for (i, s) in self.segs.iter().enumerate() {
            if !s.sacked {
                continue;
            }
            let start = self.snd_una + i as u64 * mss;
            match out.last_mut() {
                Some(last) if last.1 == start => last.1 = start + mss,
                _ => out.push((start, start + mss)),
            }
        }
        out
    }

    /// Estimate of bytes in the network: unSACKed segments not deemed lost,
    /// plus retransmissions made during this recovery.
    pub fn pipe(&self) -> u64 {
        let end = self.seg_index(self.snd_nxt).min(self.segs.len());
        let mut sacked_above = 0u32;
        let mut segs = 0u64;
        for s in self.segs.range(..end).rev() {
            if s.sacked {
                sacked_above += 1;
                continue;
            }
            if sacked_above < DUP_THRESH {
                segs += 1;
            }
            if s.recovery_rexmit {
                segs += 1;
            }
        }
        segs * self.mss()
    }

    fn usable_window(&self) -> u64 {
        self.cwnd.min(self.cfg.rcv_wnd)
    }

    fn arm_if_idle(&mut self, now: SimTime) {
        if self.rto_deadline.is_none() {
            self.rto_deadline = Some(now + self.rto);
        }
    }

    fn transmit(&mut self, now: SimTime, seq: u64) -> TcpSegment {
        let mss = self.mss();
        let idx = self.seg_index(seq);
        while self.segs.len() <= idx {
            self.segs.push_back(SegState::default());
        }
        let resend = seq < self.snd_max;
        let s = &mut self.segs[idx];
        if resend {
            s.resent = true;
            self.stats.retransmissions += 1;
        }
        s.sent_at = now;
        self.stats.segments_sent += 1;
        self.snd_max = self.snd_max.max(seq + mss);
        self.arm_if_idle(now);
        TcpSegment::data(seq, self.cfg.mss)
    }

    fn send_new(&mut self, now: SimTime) -> TcpSegment {
        let seq = self.snd_nxt;
        self.snd_nxt += self.mss();
        self.transmit(now, seq)
    }

    /// Full-size segments allowed by the window; data is always available.
    pub fn on_send_opportunity(&mut self, now: SimTime) -> Vec<TcpSegment> {
        if self.in_fast_recovery {
            return self.recovery_send(now);
        }
        let mut out = Vec::new();
        while self.flight() + self.mss() <= self.usable_window() {
            out.push(self.send_new(now));
        }
        out
    }

    fn next_lost_hole(&self) -> Option<usize> {
        let end = self.seg_index(self.snd_nxt).min(self.segs.len());
        let mut sacked_above = 0u32;
        let mut lowest = None;
        for (i, s) in self.segs.range(..end).enumerate().rev() {
            if s.sacked {
                sacked_above += 1;
            } else if sacked_above >= DUP_THRESH && !s.recovery_rexmit {
                lowest = Some(i);
            }
        }
        lowest
    }

    fn recovery_send(&mut self, now: SimTime) -> Vec<TcpSegment> {
        let mss = self.mss();
        let mut out = Vec::new();
        loop {
            if self.pipe() + mss > self.cwnd {
                break;
            }
            if let Some(i) = self.next_lost_hole() {
                self.segs[i].recovery_rexmit = true;
                let seq = self.snd_una + i as u64 * mss;
                out.push(self.transmit(now, seq));
            } else if self.flight() + mss <= self.cfg.rcv_wnd {
                out.push(self.send_new(now));
            } else {
                break;
            }
        }
        out
    }

    fn update_scoreboard(&mut self, blocks: &[(u64, u64)]) {
        let mss = self.mss();
        for &(start, end) in blocks {
            let lo = start.max(self.snd_una);
            let hi = end.min(self.snd_max);
            if lo >= hi {
                continue;
            }
            // whole segments only
            let first = (lo - self.snd_una).div_ceil(mss) as usize;
            let last = ((hi - self.snd_una) / mss) as usize;
            for i in first..last.min(self.segs.len()) {
                self.segs[i].sacked = true;
            }
        }
    }

    fn sample_rtt(&mut self, sample: SimTime) {
        let r = sample.as_secs_f64();
        match self.srtt {
            None => {
                self.srtt = Some(r);
                self.rttvar = r / 2.0;
            }
            Some(srtt) => {
                self.rttvar = 0.75 * self.rttvar + 0.25 * (srtt - r).abs();
                self.srtt = Some(0.875 * srtt + 0.125 * r);
            }
        }
        let g = self.cfg.timer_granularity.as_secs_f64();
        let raw = self.srtt.expect("set above") + (4.0 * self.rttvar).max(g);
        self.rto = self.cfg.quantize_rto(SimTime::from_secs_f64(raw));
    }

    /// Processes a (possibly duplicate) acknowledgement and returns the
    /// segments the sender may now transmit.
    pub fn on_ack(&mut self, now: SimTime, ack: &TcpSegment) -> Vec<TcpSegment> {
        debug_assert!(ack.is_ack);
        let mss = self.mss();
        if ack.ack_num < self.snd_una || ack.ack_num > self.snd_max {
            return Vec::new();
        }
        self.update_scoreboard(&ack.sack_blocks);

        if ack.ack_num > self.snd_una {
            let acked_segs = self.seg_index(ack.ack_num);
            let newest = &self.segs[acked_segs - 1];
            if !newest.resent {
                let sample = now - newest.sent_at;
                self.sample_rtt(sample);
            }
            self.segs.drain(..acked_segs.min(self.segs.len()));
            self.snd_una = ack.ack_num;
            self.snd_nxt = self.snd_nxt.max(self.snd_una);
            self.dupacks = 0;

            let mut partial_rexmit = None;
            if self.in_fast_recovery {
                if self.snd_una >= self.recover {
                    self.in_fast_recovery = false;
                    self.cwnd = self.ssthresh;
                    self.exit_flight = self.flight();
                } else if self.segs.front().is_some_and(|s| !s.sacked && !s.recovery_rexmit) {
                    // partial ACK: the new left edge is a hole
                    self.segs[0].recovery_rexmit = true;
                    partial_rexmit = Some(self.snd_una);
                }
            } else if self.cwnd < self.ssthresh {
                self.cwnd += mss;
            } else {
                self.cwnd += (mss * mss / self.cwnd).max(1);
            }

            self.rto_deadline = if self.snd_una < self.snd_max {
                Some(now + self.rto)
            } else {
                None
            };
            if let Some(seq) = partial_rexmit {
                let mut out = vec![self.transmit(now, seq)];
                out.extend(self.on_send_opportunity(now));
                return out;
            }
        } else if self.snd_max > self.snd_una && !self.in_fast_recovery {
            self.dupacks += 1;
            if self.dupacks == DUP_THRESH {
                return self.enter_recovery(now);
            }
        }
        self.on_send_opportunity(now)
    }

    fn enter_recovery(&mut self, now: SimTime) -> Vec<TcpSegment> {
        let mss = self.mss();
        self.ssthresh = (self.flight() / 2).max(2 * mss);
        self.cwnd = self.ssthresh;
        self.recover = self.snd_nxt;
        self.entry_pipe = self.pipe();
        self.in_fast_recovery = true;
        self.stats.fast_retransmits += 1;
        let mut out = Vec::new();
        // lowest unSACKed segment goes out at once
        if let Some(i) = self.segs.iter().position(|s| !s.sacked) {
            if (i as u64) * mss < self.flight() {
                self.segs[i].recovery_rexmit = true;
                let seq = self.snd_una + i as u64 * mss;
                out.push(self.transmit(now, seq));
            }
        }
        out.extend(self.recovery_send(now));
        out
    }

    /// Retransmission timer expiry: collapse the window and go back to
    /// `snd_una`.
    pub fn on_timeout(&mut self, now: SimTime) -> Vec<TcpSegment> {
        let mss = self.mss();
        self.stats.timeouts += 1;
        self.rto_deadline = None;
        if self.snd_una == self.snd_max {
            return Vec::new();
        }
        self.ssthresh = (self.flight() / 2).max(2 * mss);
        self.cwnd = mss;
        for s in self.segs.iter_mut() {
            s.sacked = false;
            s.recovery_rexmit = false;
        }
        self.snd_nxt = self.snd_una;
        self.in_fast_recovery = false;
        self.exit_flight = 0;
        self.dupacks = 0;
        self.rto = SimTime(self.rto.as_nanos().saturating_mul(2)).min(self.cfg.max_rto);
        let out = self.on_send_opportunity(now);
        self.rto_deadline = Some(now + self.rto);
        out
    }

    /// Debug-build consistency checks on sequence state.
    pub fn check_invariants(&self) {
        assert!(self.snd_una <= self.snd_nxt && self.snd_nxt <= self.snd_max);
        assert!(self.flight() <= self.cfg.rcv_wnd);
        let mss = self.mss();
        for (lo, hi) in self.sacked_ranges() {
            assert!(lo >= self.snd_una && hi <= self.snd_max);
        }
        if self.in_fast_recovery {
            let ceiling = self.cwnd.max(self.entry_pipe) + mss;
            assert!(self.pipe() <= ceiling, "pipe grew past the window during recovery");
        } else {
            let ceiling = (self.usable_window() + mss).max(self.exit_flight);
            assert!(self.flight() <= ceiling, "flight grew past the window");
        }
    }
}

/// Receive side: tracks the contiguous prefix and out-of-order blocks, and
/// answers every segment with an immediate ACK.
#[derive(Debug, Clone, Default)]
pub struct TcpReceiver {
    pub rcv_nxt: u64,
    ooo: BTreeMap<u64, u64>,
    recent: Vec<(u64, u64)>,
    pub duplicate_segments: u64,
}

impl TcpReceiver {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bytes handed to the application so far.
    pub fn delivered(&self) -> u64 {
        self.rcv_nxt
    }

    fn block_containing(&self, seq: u64) -> Option<(u64, u64)> {
        self.ooo
            .range(..=seq)
            .next_back()
            .filter(|(_, &end)| end > seq)
            .map(|(&s, &e)| (s, e))
    }

    fn insert(&mut self, start: u64, end: u64) {
        let mut start = start;
        let mut end = end;
        if let Some((s, e)) = self.ooo.range(..=start).next_back().map(|(&s, &e)| (s, e)) {
            if e >= start {
                start = s;
                end = end.max(e);
                self.ooo.remove(&s);
            }
        }
        while let Some((s, e)) = self.ooo.range(start..=end).next().map(|(&s, &e)| (s, e)) {
            end = end.max(e);
            self.ooo.remove(&s);
        }
        self.ooo.insert(start, end);
    }

    /// Returns `(ack, newly_delivered_bytes)`.
    pub fn on_segment(&mut self, seg: &TcpSegment) -> (TcpSegment, u64) {
        let before = self.rcv_nxt;
        if seg.seq_end <= self.rcv_nxt || self.block_containing(seg.seq_start).is_some_and(|b| b.1 >= seg.seq_end) {
            self.duplicate_segments += 1;
        } else if seg.seq_start <= self.rcv_nxt {
            self.rcv_nxt = seg.seq_end;
            while let Some((&s, &e)) = self.ooo.first_key_value() {
                if s > self.rcv_nxt {
                    break;
                }
                self.rcv_nxt = self.rcv_nxt.max(e);
                self.ooo.remove(&s);
            }
        } else {
            self.insert(seg.seq_start, seg.seq_end);
        }

        let mut blocks: Vec<(u64, u64)> = Vec::with_capacity(MAX_SACK_BLOCKS);
        if let Some(b) = self.block_containing(seg.seq_start) {
            blocks.push(b);
        }
        for &(s, _) in &self.recent {
            if blocks.len() == MAX_SACK_BLOCKS {
                break;
            }
            if let Some(b) = self.block_containing(s) {
                if !blocks.contains(&b) {
                    blocks.push(b);
                }
            }
        }
        self.recent = blocks.clone();
        blocks.sort_unstable();
        (TcpSegment::ack(self.rcv_nxt, blocks), self.rcv_nxt - before)
    }
}
