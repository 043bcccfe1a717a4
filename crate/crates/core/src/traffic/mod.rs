//! SACK TCP endpoints and their AAL5/ATM adaptation.

pub mod aal5;
pub mod tcp;

pub use aal5::{
    atm_bytes_for_payload, cells_for_payload, max_tcp_throughput, segment_to_frame, Cell, Frame,
    FrameTable, Reassembler, Reassembly, VcId,
};
pub use tcp::{SenderStats, TcpConfig, TcpReceiver, TcpSegment, TcpSender};
