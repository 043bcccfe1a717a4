use crate::buffer::{Admission, PortBuffer};
use crate::engine::SimTime;
use crate::sched::Scheduler;
use crate::traffic::Cell;

/// A switch or host output port: admission by the buffer policy, service
/// order by the scheduler, one cell at a time onto the outgoing link.
#[derive(Debug, Clone)]
pub struct Port {
    pub buffer: PortBuffer,
    pub sched: Scheduler,
    pub cell_time: SimTime,
    pub propagation: SimTime,
    busy: bool,
    pub cells_sent: u64,
    pub peak_occupancy: u64,
}

impl Port {
    pub fn new(buffer: PortBuffer, sched: Scheduler, cell_time: SimTime, propagation: SimTime) -> Self {
        Port {
            buffer,
            sched,
            cell_time,
            propagation,
            busy: false,
            cells_sent: 0,
            peak_occupancy: 0,
        }
    }

    pub fn is_busy(&self) -> bool {
        self.busy
    }

    /// Runs admission and queues the cell if accepted.
    pub fn offer(&mut self, cell: Cell, now: SimTime) -> Admission {
        let verdict = self.buffer.admit_cell(&cell, now);
        if verdict == Admission::Enqueue {
            self.sched.enqueue(cell, now);
            self.peak_occupancy = self.peak_occupancy.max(self.buffer.occupancy());
        }
        verdict
    }

    /// Takes the next cell onto the link if the link is idle.
    pub fn start_transmission(&mut self, now: SimTime) -> Option<Cell> {
        if self.busy {
            return None;
        }
        let cell = self.sched.next(now)?;
        self.buffer.dequeue_notify(&cell);
        self.busy = true;
        self.cells_sent += 1;
        Some(cell)
    }

    pub fn transmission_done(&mut self) {
        debug_assert!(self.busy);
        self.busy = false;
    }

    pub fn check_invariants(&self) {
        self.buffer.check_invariants();
        assert_eq!(self.buffer.occupancy() as usize, self.sched.len(), "scheduler and buffer disagree");
    }
}
