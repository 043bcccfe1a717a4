//! Discrete-event simulation of TCP over ATM with Guaranteed Frame Rate
//! mechanisms: edge tagging with a frame-based GCRA, per-VC buffer
//! management, and per-VC weighted fair queuing.

pub mod buffer;
pub mod engine;
pub mod harness;
pub mod metrics;
pub mod policer;
pub mod sched;
pub mod topology;
pub mod traffic;

pub use buffer::{Admission, DropPolicy, DropReason, FrameDecision, PortBuffer};
pub use engine::{cell_time, Engine, LinkConfig, SimTime};
pub use policer::{GfrContract, PolicerState, PolicingMode, Verdict, VcPolicer};
pub use sched::{FifoScheduler, SchedulerKind, WfqScheduler};
pub use topology::{Allocation, RunResult, Scenario, Tagging, VcConfig};
pub use traffic::{Cell, Frame, TcpConfig, TcpSegment, VcId};
