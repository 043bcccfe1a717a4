//! The N-source configuration: N TCP sources feed an edge switch whose
//! output port is the shared bottleneck toward an egress switch, which fans
//! out to N destinations. Every hop has the same bandwidth and propagation
//! delay, so three hops of 5 ms give a 30 ms round trip.

mod network;
mod port;

pub use network::{Network, PortRole, RunResult, VcOutcome};
pub use port::Port;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::DropPolicy;
use crate::engine::{cell_time, LinkConfig, SimTime, CELL_BITS};
use crate::policer::{GfrContract, PolicerError, PolicingMode};
use crate::sched::SchedulerKind;
use crate::traffic::aal5::sonet_payload_rate;
use crate::traffic::{cells_for_payload, max_tcp_throughput, TcpConfig, VcId};

/// Approximate MCRs of the five unequal-allocation categories, in bits/s.
pub const FIVE_GROUP_MCRS: [f64; 5] = [2.6e6, 5.3e6, 8.0e6, 10.7e6, 13.5e6];

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("scenario needs at least one source")]
    NoSources,
    #[error("{n} sources cannot be split into 5 equal groups")]
    GroupsNotDivisible { n: usize },
    #[error("explicit allocation lists {got} rates for {n} sources")]
    AllocationLength { got: usize, n: usize },
    #[error("allocated MCR {total_bps:.0} b/s exceeds the {capacity_bps:.0} b/s available to TCP")]
    Admission { total_bps: f64, capacity_bps: f64 },
    #[error("MCR of {vc} must be positive")]
    NonPositiveMcr { vc: VcId },
    #[error("link bandwidth must be positive")]
    ZeroBandwidth,
    #[error("buffer must hold at least one cell")]
    EmptyBuffer,
    #[error("invalid drop policy: {0}")]
    Policy(String),
    #[error("warm-up {warmup} must end before the run ({duration})")]
    Warmup { warmup: SimTime, duration: SimTime },
    #[error("invalid TCP parameters: {0}")]
    Tcp(String),
    #[error("policer contract for {vc}: {source}")]
    Contract { vc: VcId, source: PolicerError },
}

/// How MCRs are assigned to the sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Allocation {
    /// Every source gets `capacity / n`.
    Equal,
    /// Five categories with [`FIVE_GROUP_MCRS`].
    UnequalFiveGroups,
    /// One MCR (bits/s) per source.
    Explicit(Vec<f64>),
}

/// Network tagging at the edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tagging {
    #[default]
    Off,
    Tag,
    Drop,
}

impl Tagging {
    pub fn mode(self) -> Option<PolicingMode> {
        match self {
            Tagging::Off => None,
            Tagging::Tag => Some(PolicingMode::Tag),
            Tagging::Drop => Some(PolicingMode::Drop),
        }
    }
}

/// Everything needed to build and run one simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub n_sources: usize,
    /// Line rate of every link, bits/s.
    pub link_bandwidth: f64,
    pub link_delay: SimTime,
    pub buffer_cells: u64,
    pub tcp: TcpConfig,
    pub allocation: Allocation,
    pub tagging: Tagging,
    pub buffer_policy: DropPolicy,
    pub scheduler: SchedulerKind,
    pub duration: SimTime,
    pub warmup: SimTime,
    pub seed: u64,
    /// Policer CDVT in seconds; half a cell time at PCR when unset.
    pub cdvt: Option<f64>,
    /// Record every buffer drop.
    pub drop_log: bool,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            n_sources: 15,
            link_bandwidth: 155.52e6,
            link_delay: SimTime::from_millis(5),
            buffer_cells: 12_000,
            tcp: TcpConfig::default(),
            allocation: Allocation::Equal,
            tagging: Tagging::Off,
            buffer_policy: DropPolicy::selective_default(),
            scheduler: SchedulerKind::Fifo,
            duration: SimTime::from_secs(5),
            warmup: SimTime::ZERO,
            seed: 0,
            cdvt: None,
            drop_log: false,
        }
    }
}

impl Scenario {
    /// ATM-layer peak cell rate in bits/s, after SONET framing.
    pub fn pcr_bps(&self) -> f64 {
        sonet_payload_rate(self.link_bandwidth)
    }

    pub fn pcr_cells(&self) -> f64 {
        self.pcr_bps() / CELL_BITS as f64
    }

    /// Serialization time of one cell at every port.
    pub fn port_cell_time(&self) -> SimTime {
        cell_time(&LinkConfig::new(self.pcr_bps(), self.link_delay))
    }

    /// Maximum aggregate TCP goodput through the bottleneck.
    pub fn tcp_capacity(&self) -> f64 {
        max_tcp_throughput(self.tcp.mss, self.link_bandwidth)
    }

    /// Round-trip propagation delay.
    pub fn rtt(&self) -> SimTime {
        SimTime(6 * self.link_delay.as_nanos())
    }

    pub fn validate(&self) -> Result<Vec<VcConfig>, TopologyError> {
        if self.n_sources == 0 {
            return Err(TopologyError::NoSources);
        }
        if !(self.link_bandwidth > 0.0 && self.link_bandwidth.is_finite()) {
            return Err(TopologyError::ZeroBandwidth);
        }
        if self.buffer_cells == 0 {
            return Err(TopologyError::EmptyBuffer);
        }
        self.buffer_policy.validate().map_err(TopologyError::Policy)?;
        if self.warmup >= self.duration {
            return Err(TopologyError::Warmup { warmup: self.warmup, duration: self.duration });
        }
        if self.tcp.mss == 0 || self.tcp.rcv_wnd < u64::from(self.tcp.mss) {
            return Err(TopologyError::Tcp("need mss > 0 and rcv_wnd >= mss".into()));
        }
        if self.tcp.timer_granularity == SimTime::ZERO {
            return Err(TopologyError::Tcp("timer granularity must be positive".into()));
        }
        let vcs = match &self.allocation {
            Allocation::Equal => build_equal(self.n_sources, self.tcp_capacity()),
            Allocation::UnequalFiveGroups => build_unequal_groups(self.n_sources, self.tcp_capacity())?,
            Allocation::Explicit(rates) => build_explicit(rates, self.n_sources, self.tcp_capacity())?,
        };
        admission_check(&vcs, self.tcp_capacity())?;
        let mut vcs = vcs;
        for vc in &mut vcs {
            vc.tagging = self.tagging;
            vc.contract = Some(self.contract_for(vc.mcr_bps).map_err(|source| TopologyError::Contract { vc: vc.vc, source })?);
        }
        Ok(vcs)
    }

    /// Policer contract for a VC whose guaranteed TCP goodput is `mcr_bps`:
    /// the goodput is converted to the cell rate that carries it.
    pub fn contract_for(&self, mcr_bps: f64) -> Result<GfrContract, PolicerError> {
        let frame_cells = cells_for_payload(self.tcp.mss);
        let frames_per_sec = mcr_bps / (f64::from(self.tcp.mss) * 8.0);
        let mcr_cells = frames_per_sec * f64::from(frame_cells);
        let pcr = self.pcr_cells();
        let cdvt = self.cdvt.unwrap_or(0.5 / pcr);
        GfrContract::new(mcr_cells, pcr, frame_cells, cdvt)
    }

    /// Builds the network; see [`build_n_source`].
    pub fn build(&self) -> Result<Network, TopologyError> {
        build_n_source(self)
    }
}

/// One GFR virtual circuit from source `vc` to destination `vc`.
#[derive(Debug, Clone, PartialEq)]
pub struct VcConfig {
    pub vc: VcId,
    /// Guaranteed TCP-level rate, bits/s; also the throughput target.
    pub mcr_bps: f64,
    /// Buffer weight `MCR / capacity`.
    pub weight: f64,
    pub category: usize,
    pub tagging: Tagging,
    pub contract: Option<GfrContract>,
}

fn vc_config(i: usize, mcr_bps: f64, capacity: f64, category: usize) -> VcConfig {
    VcConfig {
        vc: VcId(i as u32),
        mcr_bps,
        weight: mcr_bps / capacity,
        category,
        tagging: Tagging::Off,
        contract: None,
    }
}

pub fn build_equal(n: usize, capacity: f64) -> Vec<VcConfig> {
    (0..n).map(|i| vc_config(i, capacity / n as f64, capacity, 0)).collect()
}

/// `n / 5` consecutive VCs per category, lowest MCR first.
pub fn build_unequal_groups(n: usize, capacity: f64) -> Result<Vec<VcConfig>, TopologyError> {
    if n == 0 || !n.is_multiple_of(5) {
        return Err(TopologyError::GroupsNotDivisible { n });
    }
    let per = n / 5;
    Ok((0..n)
        .map(|i| {
            let cat = i / per;
            vc_config(i, FIVE_GROUP_MCRS[cat], capacity, cat)
        })
        .collect())
}

/// One VC per rate; VCs sharing a rate share a category, numbered in order
/// of first appearance.
pub fn build_explicit(rates: &[f64], n: usize, capacity: f64) -> Result<Vec<VcConfig>, TopologyError> {
    if rates.len() != n {
        return Err(TopologyError::AllocationLength { got: rates.len(), n });
    }
    let mut seen: Vec<f64> = Vec::new();
    rates
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            if !(r > 0.0 && r.is_finite()) {
                return Err(TopologyError::NonPositiveMcr { vc: VcId(i as u32) });
            }
            let cat = match seen.iter().position(|s| *s == r) {
                Some(c) => c,
                None => {
                    seen.push(r);
                    seen.len() - 1
                }
            };
            Ok(vc_config(i, r, capacity, cat))
        })
        .collect()
}

fn admission_check(vcs: &[VcConfig], capacity: f64) -> Result<(), TopologyError> {
    let total: f64 = vcs.iter().map(|v| v.mcr_bps).sum();
    // equal shares may sum a rounding error above capacity
    if total > capacity * (1.0 + 1e-9) {
        return Err(TopologyError::Admission { total_bps: total, capacity_bps: capacity });
    }
    Ok(())
}

/// Validates `scenario` and assembles its network, ready to run.
pub fn build_n_source(scenario: &Scenario) -> Result<Network, TopologyError> {
    let vcs = scenario.validate()?;
    Ok(Network::new(scenario.clone(), vcs))
}
