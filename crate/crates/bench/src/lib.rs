//! Fixtures shared by the component benchmarks.

use gfr_core::{Cell, DropPolicy, Scenario, SchedulerKind, SimTime, Tagging, Allocation, VcId};

/// Cells of one AAL5 frame on `vc`, first to EOM.
pub fn frame(vc: u32, frame_id: u64, cells: u16) -> impl Iterator<Item = Cell> {
    (0..cells).map(move |index| Cell {
        vc: VcId(vc),
        frame_id,
        index,
        frame_cells: cells,
        clp: false,
        eom: index + 1 == cells,
    })
}

/// `frames` frames of 1..=23 cells interleaved across `vcs` circuits,
/// in arrival order. Sizes cycle so the mix is stable between runs.
pub fn interleaved_frames(vcs: u32, frames: u64) -> Vec<Cell> {
    let mut out = Vec::new();
    for f in 0..frames {
        let vc = (f % u64::from(vcs)) as u32;
        let cells = (1 + (f * 7) % 23) as u16;
        out.extend(frame(vc, f, cells));
    }
    out
}

/// Ten sources under unequal allocation for `millis` simulated milliseconds.
pub fn small_scenario(millis: u64, scheduler: SchedulerKind) -> Scenario {
    Scenario {
        n_sources: 10,
        buffer_cells: 6000,
        allocation: Allocation::UnequalFiveGroups,
        tagging: Tagging::Tag,
        buffer_policy: DropPolicy::wba_default(),
        scheduler,
        duration: SimTime::from_millis(millis),
        ..Scenario::default()
    }
}
