//! Scenario documents, single runs, the eight-row design matrix, and the
//! result files they produce.
//!
//! A scenario document is JSON with four optional sections. Every key has a
//! default; unknown keys are rejected.
//!
//! ```json
//! {
//!   "topology": { "n_sources": 15, "link_bandwidth_bps": 155.52e6,
//!                 "link_delay_ms": 5, "buffer_cells": 12000 },
//!   "tcp":      { "mss_bytes": 1024, "rcv_wnd_bytes": 600000,
//!                 "timer_granularity_ms": 100 },
//!   "gfr":      { "allocation": "equal", "tagging": "off",
//!                 "buffer_policy": { "kind": "selective", "r": 0.9, "z": 0.8 },
//!                 "scheduler": "fifo" },
//!   "run":      { "duration_s": 5, "seed": 0, "warmup_s": 0 }
//! }
//! ```

use std::fs;
use std::io;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::buffer::DropPolicy;
use crate::engine::SimTime;
use crate::metrics::{self, MetricsError, Summary};
use crate::sched::SchedulerKind;
use crate::topology::{Allocation, RunResult, Scenario, Tagging, TopologyError};
use crate::traffic::TcpConfig;

pub const TOOL_NAME: &str = "gfrsim";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{key}: {message}")]
    Invalid { key: &'static str, message: String },
    #[error("matrix base must use the unequal-5-groups allocation")]
    MatrixAllocation,
    #[error("matrix row {row} failed: {message}")]
    RowFailed { row: usize, message: String },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologySection {
    pub n_sources: usize,
    pub link_bandwidth_bps: f64,
    pub link_delay_ms: f64,
    pub buffer_cells: u64,
}

impl Default for TopologySection {
    fn default() -> Self {
        TopologySection {
            n_sources: 15,
            link_bandwidth_bps: 155.52e6,
            link_delay_ms: 5.0,
            buffer_cells: 12_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TcpSection {
    pub mss_bytes: u32,
    pub rcv_wnd_bytes: u64,
    pub timer_granularity_ms: f64,
}

impl Default for TcpSection {
    fn default() -> Self {
        TcpSection {
            mss_bytes: 1024,
            rcv_wnd_bytes: 600_000,
            timer_granularity_ms: 100.0,
        }
    }
}

/// `"equal"`, `"unequal-5-groups"`, or a list of MCRs in bits/s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AllocationSpec {
    Named(String),
    Explicit(Vec<f64>),
}

impl Default for AllocationSpec {
    fn default() -> Self {
        AllocationSpec::Named("equal".into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Tail,
    Epd,
    Selective,
    Wba,
}

/// Buffer policy with optional parameters; omitted ones take the policy's
/// defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub kind: PolicyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<f64>,
}

impl PolicySection {
    pub fn from_policy(policy: DropPolicy) -> Self {
        let (kind, r, z) = match policy {
            DropPolicy::Tail => (PolicyKind::Tail, None, None),
            DropPolicy::Epd { r } => (PolicyKind::Epd, Some(r), None),
            DropPolicy::Selective { r, z } => (PolicyKind::Selective, Some(r), Some(z)),
            DropPolicy::Wba { r, z } => (PolicyKind::Wba, Some(r), Some(z)),
        };
        PolicySection { kind, r, z }
    }

    pub fn to_policy(&self) -> Result<DropPolicy, HarnessError> {
        let unused = |key: &'static str| HarnessError::Invalid {
            key,
            message: format!("not a parameter of the {:?} policy", self.kind).to_lowercase(),
        };
        let policy = match self.kind {
            PolicyKind::Tail => {
                if self.r.is_some() {
                    return Err(unused("gfr.buffer_policy.r"));
                }
                if self.z.is_some() {
                    return Err(unused("gfr.buffer_policy.z"));
                }
                DropPolicy::Tail
            }
            PolicyKind::Epd => {
                if self.z.is_some() {
                    return Err(unused("gfr.buffer_policy.z"));
                }
                let DropPolicy::Epd { r } = DropPolicy::epd_default() else { unreachable!() };
                DropPolicy::Epd { r: self.r.unwrap_or(r) }
            }
            PolicyKind::Selective => {
                let DropPolicy::Selective { r, z } = DropPolicy::selective_default() else { unreachable!() };
                DropPolicy::Selective { r: self.r.unwrap_or(r), z: self.z.unwrap_or(z) }
            }
            PolicyKind::Wba => {
                let DropPolicy::Wba { r, z } = DropPolicy::wba_default() else { unreachable!() };
                DropPolicy::Wba { r: self.r.unwrap_or(r), z: self.z.unwrap_or(z) }
            }
        };
        policy.validate().map_err(|message| HarnessError::Invalid { key: "gfr.buffer_policy", message })?;
        Ok(policy)
    }
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection::from_policy(DropPolicy::selective_default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct GfrSection {
    pub allocation: AllocationSpec,
    pub tagging: Tagging,
    pub buffer_policy: PolicySection,
    pub scheduler: SchedulerKind,
    /// Policer CDVT in seconds; half a cell time at PCR when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cdvt_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub duration_s: f64,
    pub seed: u64,
    pub warmup_s: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { duration_s: 5.0, seed: 0, warmup_s: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioDocument {
    pub topology: TopologySection,
    pub tcp: TcpSection,
    pub gfr: GfrSection,
    pub run: RunSection,
}

/// Command-line values that replace the document's.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub duration_s: Option<f64>,
    pub seed: Option<u64>,
}

fn positive_finite(key: &'static str, v: f64) -> Result<(), HarnessError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(HarnessError::Invalid { key, message: format!("must be a positive number, got {v}") })
    }
}

fn topology_key(e: &TopologyError) -> &'static str {
    match e {
        TopologyError::NoSources | TopologyError::GroupsNotDivisible { .. } => "topology.n_sources",
        TopologyError::ZeroBandwidth => "topology.link_bandwidth_bps",
        TopologyError::EmptyBuffer => "topology.buffer_cells",
        TopologyError::AllocationLength { .. } | TopologyError::Admission { .. } | TopologyError::NonPositiveMcr { .. } => {
            "gfr.allocation"
        }
        TopologyError::Policy(_) => "gfr.buffer_policy",
        TopologyError::Warmup { .. } => "run.warmup_s",
        TopologyError::Tcp(_) => "tcp",
        TopologyError::Contract { .. } => "gfr.cdvt_s",
    }
}

impl ScenarioDocument {
    /// Parses a document, naming the offending key on failure.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let doc: ScenarioDocument = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            HarnessError::Parse {
                path: if path == "." { "document".into() } else { path },
                message: e.into_inner().to_string(),
            }
        })?;
        Ok(doc)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }

    pub fn with_overrides(mut self, o: Overrides) -> Self {
        if let Some(d) = o.duration_s {
            self.run.duration_s = d;
        }
        if let Some(s) = o.seed {
            self.run.seed = s;
        }
        self
    }

    /// Canonical JSON form; the basis of the scenario hash.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("document serializes")
    }

    /// SHA-256 of the canonical form, hex encoded.
    pub fn hash(&self) -> String {
        format!("{:x}", Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// Checks every key and builds the simulation scenario.
    pub fn to_scenario(&self) -> Result<Scenario, HarnessError> {
        let t = &self.topology;
        positive_finite("topology.link_bandwidth_bps", t.link_bandwidth_bps)?;
        if !(t.link_delay_ms >= 0.0 && t.link_delay_ms.is_finite()) {
            return Err(HarnessError::Invalid {
                key: "topology.link_delay_ms",
                message: format!("must be a non-negative number, got {}", t.link_delay_ms),
            });
        }
        positive_finite("tcp.timer_granularity_ms", self.tcp.timer_granularity_ms)?;
        if self.tcp.mss_bytes == 0 {
            return Err(HarnessError::Invalid { key: "tcp.mss_bytes", message: "must be positive".into() });
        }
        if self.tcp.rcv_wnd_bytes < u64::from(self.tcp.mss_bytes) {
            return Err(HarnessError::Invalid {
                key: "tcp.rcv_wnd_bytes",
                message: format!("must hold at least one segment of {} bytes", self.tcp.mss_bytes),
            });
        }
        positive_finite("run.duration_s", self.run.duration_s)?;
        if !(self.run.warmup_s >= 0.0 && self.run.warmup_s.is_finite()) {
            return Err(HarnessError::Invalid {
                key: "run.warmup_s",
                message: format!("must be a non-negative number, got {}", self.run.warmup_s),
            });
        }
        if let Some(c) = self.gfr.cdvt_s {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(HarnessError::Invalid { key: "gfr.cdvt_s", message: format!("must be non-negative, got {c}") });
            }
        }
        let allocation = match &self.gfr.allocation {
            AllocationSpec::Named(n) if n == "equal" => Allocation::Equal,
            AllocationSpec::Named(n) if n == "unequal-5-groups" => Allocation::UnequalFiveGroups,
            AllocationSpec::Named(n) => {
                return Err(HarnessError::Invalid {
                    key: "gfr.allocation",
                    message: format!("unknown allocation '{n}' (expected equal, unequal-5-groups, or a list of rates)"),
                })
            }
            AllocationSpec::Explicit(rates) => Allocation::Explicit(rates.clone()),
        };
        let granularity = SimTime::from_secs_f64(self.tcp.timer_granularity_ms / 1e3);
        let scenario = Scenario {
            n_sources: t.n_sources,
            link_bandwidth: t.link_bandwidth_bps,
            link_delay: SimTime::from_secs_f64(t.link_delay_ms / 1e3),
            buffer_cells: t.buffer_cells,
            tcp: TcpConfig {
                mss: self.tcp.mss_bytes,
                rcv_wnd: self.tcp.rcv_wnd_bytes,
                timer_granularity: granularity,
                min_rto: SimTime(2 * granularity.as_nanos()),
                ..TcpConfig::default()
            },
            allocation,
            tagging: self.gfr.tagging,
            buffer_policy: self.gfr.buffer_policy.to_policy()?,
            scheduler: self.gfr.scheduler,
            duration: SimTime::from_secs_f64(self.run.duration_s),
            warmup: SimTime::from_secs_f64(self.run.warmup_s),
            seed: self.run.seed,
            cdvt: self.gfr.cdvt_s,
            drop_log: false,
        };
        scenario
            .validate()
            .map_err(|e| HarnessError::Invalid { key: topology_key(&e), message: e.to_string() })?;
        Ok(scenario)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DropReport {
    pub bottleneck_cells: u64,
    pub other_port_cells: u64,
}

/// Contents of a run's summary document.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub tool: &'static str,
    pub tool_version: &'static str,
    pub scenario_hash: String,
    pub run_id: String,
    pub seed: u64,
    pub n_sources: usize,
    pub buffer_cells: u64,
    pub buffer_policy: &'static str,
    pub scheduler: SchedulerKind,
    pub tagging: Tagging,
    pub duration_s: f64,
    pub measured_s: f64,
    pub max_tcp_throughput_bps: f64,
    #[serde(flatten)]
    pub summary: Summary,
    pub drops: DropReport,
    pub events: u64,
    pub trace_digest: String,
}

/// Everything a run writes, already rendered.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub run_id: String,
    pub report: RunReport,
    pub stats: Vec<metrics::VcStats>,
    pub vc_table: String,
    pub category_series: String,
    pub summary_json: String,
}

impl RunArtifacts {
    /// Writes `<run_id>.csv`, `<run_id>.summary.json` and
    /// `<run_id>.categories.csv` into `dir`, creating it if needed.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let files = [
            (format!("{}.csv", self.run_id), &self.vc_table),
            (format!("{}.summary.json", self.run_id), &self.summary_json),
            (format!("{}.categories.csv", self.run_id), &self.category_series),
        ];
        let mut written = Vec::new();
        for (name, body) in files {
            let path = dir.join(name);
            fs::write(&path, body).map_err(io_err(&path))?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Builds the report and renderings for a finished run.
pub fn artifacts_for(
    run_id: &str,
    doc: &ScenarioDocument,
    scenario: &Scenario,
    run: &RunResult,
) -> Result<RunArtifacts, HarnessError> {
    let stats = metrics::stats_from_run(run);
    let max = scenario.tcp_capacity();
    let summary = metrics::summarize(&stats, max)?;
    let bottleneck = run.port_drops.first().map_or(0, |(_, d)| *d);
    let report = RunReport {
        tool: TOOL_NAME,
        tool_version: TOOL_VERSION,
        scenario_hash: doc.hash(),
        run_id: run_id.to_string(),
        seed: scenario.seed,
        n_sources: scenario.n_sources,
        buffer_cells: scenario.buffer_cells,
        buffer_policy: scenario.buffer_policy.name(),
        scheduler: scenario.scheduler,
        tagging: scenario.tagging,
        duration_s: scenario.duration.as_secs_f64(),
        measured_s: run.measured.as_secs_f64(),
        max_tcp_throughput_bps: max,
        drops: DropReport { bottleneck_cells: bottleneck, other_port_cells: run.total_drops() - bottleneck },
        events: run.events,
        trace_digest: format!("{:016x}", run.trace_digest),
        summary,
    };
    let mut summary_json = serde_json::to_string_pretty(&report).expect("report serializes");
    summary_json.push('\n');
    Ok(RunArtifacts {
        run_id: run_id.to_string(),
        vc_table: metrics::render_vc_table(run_id, &stats, scenario.tagging != Tagging::Off),
        category_series: metrics::render_category_series(run_id, &report.summary.categories),
        summary_json,
        report,
        stats,
    })
}

/// Validates, builds, and runs one scenario.
pub fn run_scenario(run_id: &str, doc: &ScenarioDocument) -> Result<RunArtifacts, HarnessError> {
    let scenario = doc.to_scenario()?;
    let network = scenario
        .build()
        .map_err(|e| HarnessError::Invalid { key: topology_key(&e), message: e.to_string() })?;
    let run = network.run();
    artifacts_for(run_id, doc, &scenario, &run)
}

/// One of the eight combinations of per-VC accounting, network tagging and
/// per-VC queuing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatrixRow {
    pub row: usize,
    pub accounting: bool,
    pub tagging: bool,
    pub queuing: bool,
}

impl MatrixRow {
    /// Rows in table order: queuing varies slowest, accounting fastest.
    pub fn all() -> [MatrixRow; 8] {
        std::array::from_fn(|i| MatrixRow {
            row: i + 1,
            accounting: i & 1 != 0,
            tagging: i & 2 != 0,
            queuing: i & 4 != 0,
        })
    }

    pub fn run_id(&self) -> String {
        format!("row{}", self.row)
    }

    /// The base document with this row's options switched in. Accounting
    /// selects WBA, otherwise EPD; each keeps the base's parameters when the
    /// base already uses that policy.
    pub fn apply(&self, base: &ScenarioDocument) -> ScenarioDocument {
        let mut doc = base.clone();
        let base_policy = &base.gfr.buffer_policy;
        let want = if self.accounting { PolicyKind::Wba } else { PolicyKind::Epd };
        if base_policy.kind != want {
            let fallback = if self.accounting { DropPolicy::wba_default() } else { DropPolicy::epd_default() };
            doc.gfr.buffer_policy = PolicySection::from_policy(fallback);
        }
        doc.gfr.tagging = match (self.tagging, base.gfr.tagging) {
            (false, _) => Tagging::Off,
            (true, Tagging::Drop) => Tagging::Drop,
            (true, _) => Tagging::Tag,
        };
        doc.gfr.scheduler = if self.queuing { SchedulerKind::Wfq } else { SchedulerKind::Fifo };
        doc
    }
}

/// Outcome of one matrix row.
#[derive(Debug, Clone)]
pub struct MatrixEntry {
    pub row: MatrixRow,
    pub artifacts: RunArtifacts,
}

impl MatrixEntry {
    pub fn verdict(&self) -> bool {
        self.artifacts.report.summary.gfr_verdict
    }
}

fn mark(b: bool) -> &'static str {
    if b {
        "X"
    } else {
        "-"
    }
}

pub fn render_matrix(entries: &[MatrixEntry]) -> String {
    let mut out = String::from(
        "row,per_vc_accounting,network_tagging,per_vc_queuing,buffer_policy,scheduler,efficiency,fairness,min_ratio,gfr\n",
    );
    for e in entries {
        let r = &e.artifacts.report;
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.4},{:.4},{:.4},{}\n",
            e.row.row,
            mark(e.row.accounting),
            mark(e.row.tagging),
            mark(e.row.queuing),
            r.buffer_policy,
            serde_json::to_value(r.scheduler).expect("serializes").as_str().unwrap_or("?"),
            r.summary.efficiency,
            r.summary.fairness,
            r.summary.min_ratio,
            if e.verdict() { "Yes" } else { "No" }
        ));
    }
    out
}

/// Runs all eight rows, using up to `workers` threads.
///
/// When `out` is given, each row's files are written as soon as the
/// matrix finishes, followed by `matrix.csv`. If a row fails, the rows that
/// did finish are still written before the error is returned.
pub fn run_matrix(base: &ScenarioDocument, workers: usize, out: Option<&Path>) -> Result<Vec<MatrixEntry>, HarnessError> {
    if base.gfr.allocation != AllocationSpec::Named("unequal-5-groups".into()) {
        return Err(HarnessError::MatrixAllocation);
    }
    let rows = MatrixRow::all();
    // validate every row before running any
    let docs: Vec<ScenarioDocument> = rows.iter().map(|r| r.apply(base)).collect();
    for d in &docs {
        d.to_scenario()?;
    }
    let results: Mutex<Vec<Option<Result<RunArtifacts, HarnessError>>>> =
        Mutex::new(rows.iter().map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = workers.clamp(1, rows.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= rows.len() {
                    break;
                }
                let id = rows[i].run_id();
                let outcome = panic::catch_unwind(AssertUnwindSafe(|| run_scenario(&id, &docs[i])))
                    .unwrap_or_else(|p| {
                        let message = p
                            .downcast_ref::<String>()
                            .cloned()
                            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                            .unwrap_or_else(|| "run panicked".into());
                        Err(HarnessError::RowFailed { row: rows[i].row, message })
                    });
                results.lock().expect("no poisoned workers")[i] = Some(outcome);
            });
        }
    });

    let mut entries = Vec::new();
    let mut first_error = None;
    for (row, res) in rows.iter().zip(results.into_inner().expect("workers joined")) {
        match res.expect("every row ran") {
            Ok(artifacts) => entries.push(MatrixEntry { row: *row, artifacts }),
            Err(e) => {
                if first_error.is_none() {
                    first_error = Some(match e {
                        e @ HarnessError::RowFailed { .. } => e,
                        other => HarnessError::RowFailed { row: row.row, message: other.to_string() },
                    });
                }
            }
        }
    }
    if let Some(dir) = out {
        for e in &entries {
            e.artifacts.write_to(dir)?;
        }
        let path = dir.join("matrix.csv");
        fs::write(&path, render_matrix(&entries)).map_err(io_err(&path))?;
    }
    match first_error {
        Some(e) => Err(e),
        None => Ok(entries),
    }
}
