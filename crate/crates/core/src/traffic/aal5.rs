//! AAL5 adaptation: TCP segments become frames, frames become cells, and
//! receivers rebuild frames with whole-frame loss semantics.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::tcp::TcpSegment;

/// Payload bytes carried by one ATM cell.
pub const CELL_PAYLOAD: u32 = 48;
/// Bytes of one ATM cell including its header.
pub const CELL_BYTES: u32 = 53;
/// Per-segment overhead ahead of padding: 20 B TCP + 8 B LLC + 8 B AAL5 trailer.
pub const FRAME_OVERHEAD: u32 = 36;

/// Virtual circuit identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VcId(pub u32);

impl VcId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for VcId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "vc{}", self.0)
    }
}

/// Number of cells needed for a segment with `payload_len` data bytes.
pub fn cells_for_payload(payload_len: u32) -> u32 {
    (payload_len + FRAME_OVERHEAD).div_ceil(CELL_PAYLOAD)
}

/// Bytes a segment occupies at the ATM layer, headers and padding included.
pub fn atm_bytes_for_payload(payload_len: u32) -> u32 {
    cells_for_payload(payload_len) * CELL_BYTES
}

/// Upper bound on TCP goodput over a link of `line_rate` bits/s.
///
/// The payload fraction `mss / atm_bytes` is applied to the ATM-layer rate
/// left after SONET framing (149.7 of every 155.52 Mbps).
pub fn max_tcp_throughput(mss: u32, line_rate: f64) -> f64 {
    assert!(mss > 0, "mss must be positive");
    mss as f64 / atm_bytes_for_payload(mss) as f64 * sonet_payload_rate(line_rate)
}

/// ATM-layer cell rate available on a SONET link of `line_rate` bits/s.
pub fn sonet_payload_rate(line_rate: f64) -> f64 {
    line_rate * (149.7 / 155.52)
}

/// The atomic simulated unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub vc: VcId,
    pub frame_id: u64,
    pub index: u16,
    /// Cells in the owning frame; the AAL5 trailer carries the frame length.
    pub frame_cells: u16,
    pub clp: bool,
    pub eom: bool,
}

impl Cell {
    pub fn is_first(&self) -> bool {
        self.index == 0
    }
}

/// One TCP segment wrapped for transmission on a VC.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub frame_id: u64,
    pub vc: VcId,
    pub payload_len: u32,
    pub cell_count: u32,
    pub segment: TcpSegment,
}

impl Frame {
    /// Cells of the frame in transmission order; only the last carries EOM.
    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        let n = self.cell_count as u16;
        (0..n).map(move |index| Cell {
            vc: self.vc,
            frame_id: self.frame_id,
            index,
            frame_cells: n,
            clp: false,
            eom: index + 1 == n,
        })
    }

    pub fn atm_bytes(&self) -> u32 {
        self.cell_count * CELL_BYTES
    }
}

pub fn segment_to_frame(segment: TcpSegment, vc: VcId, frame_id: u64) -> Frame {
    let payload_len = segment.payload_len();
    Frame {
        frame_id,
        vc,
        payload_len,
        cell_count: cells_for_payload(payload_len),
        segment,
    }
}

/// Frames sent on one VC direction and not yet resolved at the far end.
///
/// Frames of a VC stay in order end to end, so a lookup for frame `n`
/// discards every older entry: those frames were lost.
#[derive(Debug, Default)]
pub struct FrameTable {
    next_id: u64,
    pending: VecDeque<Frame>,
}

impl FrameTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Wraps `segment`, records the frame, and returns its cells' template.
    pub fn register(&mut self, segment: TcpSegment, vc: VcId) -> &Frame {
        let frame = segment_to_frame(segment, vc, self.next_id);
        self.next_id += 1;
        self.pending.push_back(frame);
        self.pending.back().expect("just pushed")
    }

    pub fn take(&mut self, frame_id: u64) -> Option<Frame> {
        while let Some(front) = self.pending.front() {
            if front.frame_id < frame_id {
                self.pending.pop_front();
            } else if front.frame_id == frame_id {
                return self.pending.pop_front();
            } else {
                return None;
            }
        }
        None
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }
}

/// Outcome of feeding one cell to a [`Reassembler`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reassembly {
    /// Mid-frame cell absorbed.
    Pending,
    /// EOM arrived and every cell of the frame was present.
    Complete { frame_id: u64, all_clp0: bool },
    /// EOM arrived but cells were missing; the frame is discarded.
    Corrupt { frame_id: u64 },
}

/// Per-VC receive-side frame reassembly.
#[derive(Debug, Default, Clone)]
pub struct Reassembler {
    current: Option<u64>,
    received: u32,
    next_index: u16,
    loss_seen: bool,
    all_clp0: bool,
    pub corrupt_frames: u64,
}

impl Reassembler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accept(&mut self, cell: &Cell) -> Reassembly {
        if self.current != Some(cell.frame_id) {
            if self.current.is_some() && self.received > 0 {
                // previous frame lost its EOM
                self.corrupt_frames += 1;
            }
            self.current = Some(cell.frame_id);
            self.received = 0;
            self.next_index = 0;
            self.loss_seen = false;
            self.all_clp0 = true;
        }
        if cell.index != self.next_index {
            self.loss_seen = true;
        }
        self.next_index = cell.index + 1;
        self.received += 1;
        self.all_clp0 &= !cell.clp;
        if !cell.eom {
            return Reassembly::Pending;
        }
        let complete = !self.loss_seen && self.received == u32::from(cell.frame_cells);
        let all_clp0 = self.all_clp0;
        self.current = None;
        self.received = 0;
        if complete {
            Reassembly::Complete { frame_id: cell.frame_id, all_clp0 }
        } else {
            self.corrupt_frames += 1;
            Reassembly::Corrupt { frame_id: cell.frame_id }
        }
    }
}
