use std::fmt;

use crate::buffer::{Admission, DropPolicy, DropRecord, PortBuffer};
use crate::engine::{ComponentId, Engine, Event, Handler, SimTime};
use crate::policer::{PoliceAction, PolicerStats, VcPolicer};
use crate::sched::{Scheduler, SchedulerKind};
use crate::traffic::{
    Cell, FrameTable, Reassembler, Reassembly, SenderStats, TcpReceiver, TcpSegment, TcpSender, VcId,
};

use super::{Port, Scenario, VcConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub(crate) enum Node {
    Port(usize),
    /// Edge policer in front of the bottleneck port.
    Policer,
    Receiver,
    Sender,
}

#[derive(Debug, Clone)]
pub(crate) enum SimEvent {
    Start(VcId),
    Arrive(Node, Cell),
    TxDone(usize),
    Rto(VcId),
    Warmup,
}

impl SimEvent {
    fn kind(&self) -> u8 {
        match self {
            SimEvent::Start(_) => 0,
            SimEvent::Arrive(..) => 1,
            SimEvent::TxDone(_) => 2,
            SimEvent::Rto(_) => 3,
            SimEvent::Warmup => 4,
        }
    }
}

/// Where a port sits in the configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PortRole {
    /// Edge switch toward the egress switch; the only contended port.
    Bottleneck,
    /// Egress switch back toward the edge switch, carrying ACKs.
    ReverseBottleneck,
    SourceNic(VcId),
    EgressToDestination(VcId),
    DestinationNic(VcId),
    EgressToSource(VcId),
}

impl fmt::Display for PortRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PortRole::Bottleneck => write!(f, "sw1-bottleneck"),
            PortRole::ReverseBottleneck => write!(f, "sw2-reverse"),
            PortRole::SourceNic(vc) => write!(f, "src{}-nic", vc.0),
            PortRole::EgressToDestination(vc) => write!(f, "sw2-dst{}", vc.0),
            PortRole::DestinationNic(vc) => write!(f, "dst{}-nic", vc.0),
            PortRole::EgressToSource(vc) => write!(f, "sw1-src{}", vc.0),
        }
    }
}

/// Per-VC results of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct VcOutcome {
    pub vc: VcId,
    pub category: usize,
    pub mcr_bps: f64,
    /// Bytes handed to the destination application after warm-up.
    pub delivered_bytes: u64,
    /// Payload bytes of new data that arrived in untagged frames after warm-up.
    pub clp0_bytes: u64,
    pub sender: SenderStats,
    pub policer: Option<PolicerStats>,
    /// Cells of this VC dropped at the bottleneck.
    pub bottleneck_drops: u64,
    pub corrupt_frames: u64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    /// Length of the measurement window.
    pub measured: SimTime,
    pub vcs: Vec<VcOutcome>,
    /// Cells dropped at every port, in port order.
    pub port_drops: Vec<(PortRole, u64)>,
    pub bottleneck_cells_sent: u64,
    pub bottleneck_peak_occupancy: u64,
    pub events: u64,
    pub trace_digest: u64,
    pub drop_log: Vec<DropRecord>,
}

impl RunResult {
    pub fn total_drops(&self) -> u64 {
        self.port_drops.iter().map(|(_, d)| d).sum()
    }
}

/// A built N-source network plus all endpoint state.
pub struct Network {
    scenario: Scenario,
    vcs: Vec<VcConfig>,
    ports: Vec<Port>,
    roles: Vec<PortRole>,
    policers: Vec<Option<VcPolicer>>,
    senders: Vec<TcpSender>,
    timer_due: Vec<Option<SimTime>>,
    receivers: Vec<TcpReceiver>,
    fwd_frames: Vec<FrameTable>,
    rev_frames: Vec<FrameTable>,
    fwd_reassembly: Vec<Reassembler>,
    rev_reassembly: Vec<Reassembler>,
    clp0_bytes: Vec<u64>,
    warmup_delivered: Vec<u64>,
    warmup_clp0: Vec<u64>,
    check_invariants: bool,
    engine: Engine<SimEvent>,
}

const BOTTLENECK: usize = 0;
const REVERSE: usize = 1;

impl Network {
    pub(super) fn new(scenario: Scenario, vcs: Vec<VcConfig>) -> Self {
        let n = vcs.len();
        let ct = scenario.port_cell_time();
        let prop = scenario.link_delay;
        let weights: Vec<f64> = vcs.iter().map(|v| v.weight).collect();
        let shares: Vec<f64> = vcs.iter().map(|v| v.mcr_bps).collect();
        let rate = scenario.pcr_cells();
        let switch_port = |policy: DropPolicy, log: bool| {
            let mut buffer = PortBuffer::new(scenario.buffer_cells, policy, &weights);
            if log {
                buffer.enable_drop_log();
            }
            Port::new(buffer, Scheduler::new(scenario.scheduler, &shares, rate), ct, prop)
        };
        let host_port = || {
            Port::new(
                PortBuffer::new(u64::MAX, DropPolicy::Tail, &weights),
                Scheduler::new(SchedulerKind::Fifo, &shares, rate),
                ct,
                prop,
            )
        };

        let mut ports = vec![
            switch_port(scenario.buffer_policy, scenario.drop_log),
            switch_port(scenario.buffer_policy, false),
        ];
        let mut roles = vec![PortRole::Bottleneck, PortRole::ReverseBottleneck];
        type RoleOf = fn(VcId) -> PortRole;
        let groups: [(RoleOf, bool); 4] = [
            (PortRole::SourceNic, true),
            (PortRole::EgressToDestination, false),
            (PortRole::DestinationNic, true),
            (PortRole::EgressToSource, false),
        ];
        for (role, host) in groups {
            for i in 0..n {
                ports.push(if host { host_port() } else { switch_port(scenario.buffer_policy, false) });
                roles.push(role(VcId(i as u32)));
            }
        }

        let policers = vcs
            .iter()
            .map(|v| {
                let mode = v.tagging.mode()?;
                let contract = v.contract.clone().expect("validated scenario carries contracts");
                Some(VcPolicer::new(contract, mode))
            })
            .collect();

        Network {
            senders: (0..n).map(|_| TcpSender::new(scenario.tcp.clone())).collect(),
            timer_due: vec![None; n],
            receivers: vec![TcpReceiver::new(); n],
            fwd_frames: (0..n).map(|_| FrameTable::new()).collect(),
            rev_frames: (0..n).map(|_| FrameTable::new()).collect(),
            fwd_reassembly: vec![Reassembler::new(); n],
            rev_reassembly: vec![Reassembler::new(); n],
            clp0_bytes: vec![0; n],
            warmup_delivered: vec![0; n],
            warmup_clp0: vec![0; n],
            check_invariants: false,
            engine: Engine::new(),
            policers,
            ports,
            roles,
            vcs,
            scenario,
        }
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn vcs(&self) -> &[VcConfig] {
        &self.vcs
    }

    pub fn now(&self) -> SimTime {
        self.engine.now()
    }

    /// Check buffer, scheduler and TCP invariants after every event. Slow.
    pub fn set_invariant_checks(&mut self, on: bool) {
        self.check_invariants = on;
    }

    pub fn port(&self, role: PortRole) -> &Port {
        let i = self.roles.iter().position(|r| *r == role).expect("no such port");
        &self.ports[i]
    }

    pub fn sender(&self, vc: VcId) -> &TcpSender {
        &self.senders[vc.index()]
    }

    pub fn receiver(&self, vc: VcId) -> &TcpReceiver {
        &self.receivers[vc.index()]
    }

    fn n(&self) -> usize {
        self.vcs.len()
    }

    fn src_nic(&self, vc: VcId) -> usize {
        2 + vc.index()
    }

    fn egress_to_dst(&self, vc: VcId) -> usize {
        2 + self.n() + vc.index()
    }

    fn dst_nic(&self, vc: VcId) -> usize {
        2 + 2 * self.n() + vc.index()
    }

    fn egress_to_src(&self, vc: VcId) -> usize {
        2 + 3 * self.n() + vc.index()
    }

    fn next_hop(&self, port: usize, vc: VcId) -> Node {
        match self.roles[port] {
            PortRole::Bottleneck => Node::Port(self.egress_to_dst(vc)),
            PortRole::ReverseBottleneck => Node::Port(self.egress_to_src(vc)),
            PortRole::SourceNic(_) => Node::Policer,
            PortRole::EgressToDestination(_) => Node::Receiver,
            PortRole::DestinationNic(_) => Node::Port(REVERSE),
            PortRole::EgressToSource(_) => Node::Sender,
        }
    }

    fn component(node: Node, vc: VcId) -> ComponentId {
        match node {
            Node::Port(p) => ComponentId(p as u32),
            Node::Policer => ComponentId(1_000_000 + vc.0),
            Node::Receiver => ComponentId(2_000_000 + vc.0),
            Node::Sender => ComponentId(3_000_000 + vc.0),
        }
    }

    fn sender_component(vc: VcId) -> ComponentId {
        ComponentId(3_000_000 + vc.0)
    }

    /// Runs the scenario for its full duration and collects results.
    pub fn run(mut self) -> RunResult {
        self.advance_to(self.scenario.duration);
        self.results()
    }

    /// Processes every event due at or before `t` (capped at the scenario
    /// duration). Can be called repeatedly to step through a run.
    pub fn advance_to(&mut self, t: SimTime) {
        if self.engine.dispatched() == 0 && self.engine.pending() == 0 {
            self.prime();
        }
        let end = t.min(self.scenario.duration);
        let mut engine = std::mem::take(&mut self.engine);
        engine.run_until(end, self);
        self.engine = engine;
    }

    fn prime(&mut self) {
        let ct = self.scenario.port_cell_time();
        for i in 0..self.n() {
            let vc = VcId(i as u32);
            self.engine.schedule(SimTime(ct.as_nanos() * i as u64), Self::sender_component(vc), SimEvent::Start(vc));
        }
        if self.scenario.warmup > SimTime::ZERO {
            self.engine.schedule(self.scenario.warmup, ComponentId(u32::MAX), SimEvent::Warmup);
        }
    }

    /// Results as of the current simulated time.
    pub fn results(&self) -> RunResult {
        self.collect()
    }

    fn collect(&self) -> RunResult {
        let vcs = self
            .vcs
            .iter()
            .enumerate()
            .map(|(i, v)| VcOutcome {
                vc: v.vc,
                category: v.category,
                mcr_bps: v.mcr_bps,
                delivered_bytes: self.receivers[i].delivered() - self.warmup_delivered[i],
                clp0_bytes: self.clp0_bytes[i] - self.warmup_clp0[i],
                sender: self.senders[i].stats,
                policer: self.policers[i].as_ref().map(|p| p.stats),
                bottleneck_drops: self.ports[BOTTLENECK].buffer.vc_counters(v.vc).2,
                corrupt_frames: self.fwd_reassembly[i].corrupt_frames,
            })
            .collect();
        RunResult {
            measured: self.scenario.duration - self.scenario.warmup,
            vcs,
            port_drops: self
                .roles
                .iter()
                .zip(&self.ports)
                .map(|(r, p)| (*r, p.buffer.total_dropped()))
                .collect(),
            bottleneck_cells_sent: self.ports[BOTTLENECK].cells_sent,
            bottleneck_peak_occupancy: self.ports[BOTTLENECK].peak_occupancy,
            events: self.engine.dispatched(),
            trace_digest: self.engine.trace_digest(),
            drop_log: self.ports[BOTTLENECK].buffer.drop_log().to_vec(),
        }
    }

    fn offer(&mut self, engine: &mut Engine<SimEvent>, port: usize, cell: Cell) {
        let now = engine.now();
        if self.ports[port].offer(cell, now) == Admission::Enqueue {
            self.kick(engine, port);
        }
    }

    fn kick(&mut self, engine: &mut Engine<SimEvent>, port: usize) {
        let now = engine.now();
        let Some(cell) = self.ports[port].start_transmission(now) else {
            return;
        };
        let p = &self.ports[port];
        let (ct, prop) = (p.cell_time, p.propagation);
        let next = self.next_hop(port, cell.vc);
        engine.schedule(now + ct, ComponentId(port as u32), SimEvent::TxDone(port));
        engine.schedule(now + ct + prop, Self::component(next, cell.vc), SimEvent::Arrive(next, cell));
    }

    fn transmit_segments(&mut self, engine: &mut Engine<SimEvent>, vc: VcId, segments: Vec<TcpSegment>) {
        let nic = self.src_nic(vc);
        let now = engine.now();
        for seg in segments {
            let frame = self.fwd_frames[vc.index()].register(seg, vc);
            for cell in frame.cells() {
                let verdict = self.ports[nic].offer(cell, now);
                debug_assert_eq!(verdict, Admission::Enqueue);
            }
        }
        self.kick(engine, nic);
        self.sync_timer(engine, vc);
    }

    fn sync_timer(&mut self, engine: &mut Engine<SimEvent>, vc: VcId) {
        let i = vc.index();
        let want = self.senders[i].rto_deadline();
        if want == self.timer_due[i] {
            return;
        }
        if let Some(h) = self.senders[i].timer.take() {
            engine.cancel(h);
        }
        if let Some(due) = want {
            self.senders[i].timer = Some(engine.schedule(due, Self::sender_component(vc), SimEvent::Rto(vc)));
        }
        self.timer_due[i] = want;
    }

    fn at_policer(&mut self, engine: &mut Engine<SimEvent>, mut cell: Cell) {
        if let Some(p) = self.policers[cell.vc.index()].as_mut() {
            if p.police(&mut cell, engine.now()) == PoliceAction::Drop {
                return;
            }
        }
        self.offer(engine, BOTTLENECK, cell);
    }

    fn at_receiver(&mut self, engine: &mut Engine<SimEvent>, cell: Cell) {
        let vc = cell.vc;
        let i = vc.index();
        let Reassembly::Complete { frame_id, all_clp0 } = self.fwd_reassembly[i].accept(&cell) else {
            return;
        };
        let Some(frame) = self.fwd_frames[i].take(frame_id) else {
            return;
        };
        let dups = self.receivers[i].duplicate_segments;
        let (ack, _) = self.receivers[i].on_segment(&frame.segment);
        if all_clp0 && self.receivers[i].duplicate_segments == dups {
            self.clp0_bytes[i] += u64::from(frame.payload_len);
        }
        let nic = self.dst_nic(vc);
        let now = engine.now();
        let ack_frame = self.rev_frames[i].register(ack, vc);
        for c in ack_frame.cells() {
            self.ports[nic].offer(c, now);
        }
        self.kick(engine, nic);
    }

    fn at_sender(&mut self, engine: &mut Engine<SimEvent>, cell: Cell) {
        let vc = cell.vc;
        let i = vc.index();
        let Reassembly::Complete { frame_id, .. } = self.rev_reassembly[i].accept(&cell) else {
            return;
        };
        let Some(frame) = self.rev_frames[i].take(frame_id) else {
            return;
        };
        let out = self.senders[i].on_ack(engine.now(), &frame.segment);
        self.transmit_segments(engine, vc, out);
    }

    fn verify(&self, vc: Option<VcId>, port: Option<usize>) {
        if let Some(vc) = vc {
            self.senders[vc.index()].check_invariants();
            let r = &self.receivers[vc.index()];
            assert!(r.delivered() <= self.senders[vc.index()].snd_max, "delivered more than sent");
        }
        if let Some(p) = port {
            self.ports[p].check_invariants();
        }
    }
}

impl Handler<SimEvent> for Network {
    fn handle(&mut self, engine: &mut Engine<SimEvent>, event: Event<SimEvent>) {
        engine.trace_mix(event.payload.kind());
        let (mut touched_vc, mut touched_port) = (None, None);
        match event.payload {
            SimEvent::Start(vc) => {
                let out = self.senders[vc.index()].on_send_opportunity(engine.now());
                self.transmit_segments(engine, vc, out);
                touched_vc = Some(vc);
            }
            SimEvent::Arrive(Node::Port(p), cell) => {
                self.offer(engine, p, cell);
                touched_port = Some(p);
            }
            SimEvent::Arrive(Node::Policer, cell) => {
                self.at_policer(engine, cell);
                touched_port = Some(BOTTLENECK);
            }
            SimEvent::Arrive(Node::Receiver, cell) => self.at_receiver(engine, cell),
            SimEvent::Arrive(Node::Sender, cell) => {
                self.at_sender(engine, cell);
                touched_vc = Some(cell.vc);
            }
            SimEvent::TxDone(p) => {
                self.ports[p].transmission_done();
                self.kick(engine, p);
                touched_port = Some(p);
            }
            SimEvent::Rto(vc) => {
                let i = vc.index();
                self.senders[i].timer = None;
                self.timer_due[i] = None;
                if self.senders[i].rto_deadline() == Some(engine.now()) {
                    let out = self.senders[i].on_timeout(engine.now());
                    self.transmit_segments(engine, vc, out);
                } else {
                    self.sync_timer(engine, vc);
                }
                touched_vc = Some(vc);
            }
            SimEvent::Warmup => {
                for i in 0..self.n() {
                    self.warmup_delivered[i] = self.receivers[i].delivered();
                    self.warmup_clp0[i] = self.clp0_bytes[i];
                }
            }
        }
        if self.check_invariants {
            self.verify(touched_vc, touched_port);
        }
    }
}
