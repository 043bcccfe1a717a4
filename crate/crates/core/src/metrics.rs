//! Throughput measures: per-VC goodput, efficiency, Jain's fairness index,
//! per-category ratios, and the GFR verdict, plus their tabular renderings.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::topology::RunResult;
use crate::traffic::VcId;

/// Fraction of its target every VC must reach for a run to count as
/// providing the rate guarantee.
pub const GFR_THRESHOLD: f64 = 0.8;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("measurement window must be positive")]
    ZeroDuration,
    #[error("no throughput samples")]
    Empty,
    #[error("fairness is undefined when every throughput is zero")]
    AllZero,
    #[error("throughput must be finite and non-negative")]
    InvalidThroughput,
    #[error("category {0} has no VCs")]
    EmptyCategory(usize),
    #[error("target throughput of {0} must be positive")]
    InvalidTarget(VcId),
}

/// Goodput counters for one VC over the measurement window.
#[derive(Debug, Clone, PartialEq)]
pub struct VcStats {
    pub vc: VcId,
    pub category: usize,
    pub mcr_bps: f64,
    pub target_bps: f64,
    /// Bytes handed to the destination application.
    pub bytes_delivered: u64,
    /// Of those, bytes that arrived in frames no policer had tagged.
    pub clp0_bytes: u64,
    /// Seconds.
    pub duration: f64,
}

impl VcStats {
    pub fn throughput(&self) -> f64 {
        self.bytes_delivered as f64 * 8.0 / self.duration
    }

    pub fn clp0_throughput(&self) -> f64 {
        self.clp0_bytes as f64 * 8.0 / self.duration
    }

    /// Achieved over target.
    pub fn ratio(&self) -> f64 {
        self.throughput() / self.target_bps
    }
}

/// Per-VC stats of a finished run; each VC's target is its MCR.
pub fn stats_from_run(run: &RunResult) -> Vec<VcStats> {
    let duration = run.measured.as_secs_f64();
    run.vcs
        .iter()
        .map(|v| VcStats {
            vc: v.vc,
            category: v.category,
            mcr_bps: v.mcr_bps,
            target_bps: v.mcr_bps,
            bytes_delivered: v.delivered_bytes,
            clp0_bytes: v.clp0_bytes,
            duration,
        })
        .collect()
}

fn check_durations(stats: &[VcStats]) -> Result<(), MetricsError> {
    if stats.is_empty() {
        return Err(MetricsError::Empty);
    }
    if stats.iter().any(|s| !(s.duration > 0.0 && s.duration.is_finite())) {
        return Err(MetricsError::ZeroDuration);
    }
    Ok(())
}

/// Sum of goodputs over the maximum TCP goodput of the link.
pub fn efficiency(stats: &[VcStats], max_throughput: f64) -> Result<f64, MetricsError> {
    check_durations(stats)?;
    let total: f64 = stats.iter().map(VcStats::throughput).sum();
    Ok(total / max_throughput)
}

/// Jain's index `(Σx)² / (n Σx²)`.
pub fn fairness_index(x: &[f64]) -> Result<f64, MetricsError> {
    if x.is_empty() {
        return Err(MetricsError::Empty);
    }
    if x.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(MetricsError::InvalidThroughput);
    }
    let sum: f64 = x.iter().sum();
    let sum_sq: f64 = x.iter().map(|v| v * v).sum();
    if sum_sq == 0.0 {
        return Err(MetricsError::AllZero);
    }
    Ok(sum * sum / (x.len() as f64 * sum_sq))
}

fn mean_and_stddev(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryReport {
    pub category: usize,
    pub vcs: usize,
    /// Mean target of the category, bits/s.
    pub target_bps: f64,
    pub mean_ratio: f64,
    pub stddev_ratio: f64,
    pub mean_throughput_bps: f64,
    /// Population standard deviation of the category's throughputs.
    pub stddev_throughput_bps: f64,
    pub clp0_mean_ratio: f64,
}

/// One report per category id from 0 to the largest id present.
pub fn category_report(stats: &[VcStats]) -> Result<Vec<CategoryReport>, MetricsError> {
    check_durations(stats)?;
    if let Some(s) = stats.iter().find(|s| s.target_bps.is_nan() || s.target_bps <= 0.0) {
        return Err(MetricsError::InvalidTarget(s.vc));
    }
    let categories = stats.iter().map(|s| s.category).max().unwrap_or(0) + 1;
    (0..categories)
        .map(|c| {
            let members: Vec<&VcStats> = stats.iter().filter(|s| s.category == c).collect();
            if members.is_empty() {
                return Err(MetricsError::EmptyCategory(c));
            }
            let n = members.len();
            let (mean_ratio, stddev_ratio) = mean_and_stddev(members.iter().map(|s| s.ratio()));
            let (mean_x, stddev_x) = mean_and_stddev(members.iter().map(|s| s.throughput()));
            let clp0 = members.iter().map(|s| s.clp0_throughput() / s.target_bps).sum::<f64>() / n as f64;
            Ok(CategoryReport {
                category: c,
                vcs: n,
                target_bps: members.iter().map(|s| s.target_bps).sum::<f64>() / n as f64,
                mean_ratio,
                stddev_ratio,
                mean_throughput_bps: mean_x,
                stddev_throughput_bps: stddev_x,
                clp0_mean_ratio: clp0,
            })
        })
        .collect()
}

/// True when every VC reaches `threshold` of its target.
pub fn gfr_verdict(stats: &[VcStats], threshold: f64) -> bool {
    !stats.is_empty() && stats.iter().all(|s| s.ratio() >= threshold)
}

/// Headline numbers of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub efficiency: f64,
    pub fairness: f64,
    pub min_ratio: f64,
    pub max_ratio: f64,
    /// Largest relative deviation of any VC's throughput from the mean.
    pub max_deviation_from_mean: f64,
    pub gfr_verdict: bool,
    pub clp0_efficiency: f64,
    pub categories: Vec<CategoryReport>,
}

pub fn summarize(stats: &[VcStats], max_throughput: f64) -> Result<Summary, MetricsError> {
    let eff = efficiency(stats, max_throughput)?;
    let x: Vec<f64> = stats.iter().map(VcStats::throughput).collect();
    let fairness = fairness_index(&x)?;
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let ratios = stats.iter().map(VcStats::ratio);
    let clp0_total: f64 = stats.iter().map(VcStats::clp0_throughput).sum();
    Ok(Summary {
        efficiency: eff,
        fairness,
        min_ratio: ratios.clone().fold(f64::INFINITY, f64::min),
        max_ratio: ratios.fold(0.0, f64::max),
        max_deviation_from_mean: x.iter().map(|v| (v / mean - 1.0).abs()).fold(0.0, f64::max),
        gfr_verdict: gfr_verdict(stats, GFR_THRESHOLD),
        clp0_efficiency: clp0_total / max_throughput,
        categories: category_report(stats)?,
    })
}

/// Per-VC table: `run_id,vc,category,mcr_bps,throughput_bps,target_bps,ratio`,
/// with `clp0_throughput_bps` appended when `with_clp0` is set.
pub fn render_vc_table(run_id: &str, stats: &[VcStats], with_clp0: bool) -> String {
    let mut out = String::from("run_id,vc,category,mcr_bps,throughput_bps,target_bps,ratio");
    if with_clp0 {
        out.push_str(",clp0_throughput_bps");
    }
    out.push('\n');
    for s in stats {
        write!(
            out,
            "{run_id},{},{},{:.0},{:.0},{:.0},{:.4}",
            s.vc.0,
            s.category,
            s.mcr_bps,
            s.throughput(),
            s.target_bps,
            s.ratio()
        )
        .expect("string write");
        if with_clp0 {
            write!(out, ",{:.0}", s.clp0_throughput()).expect("string write");
        }
        out.push('\n');
    }
    out
}

/// One row per category for plotting ratio with a stddev band.
pub fn render_category_series(run_id: &str, categories: &[CategoryReport]) -> String {
    let mut out = String::from("run_id,category,target_bps,mean_ratio,low,high,stddev_throughput_bps\n");
    for c in categories {
        writeln!(
            out,
            "{run_id},{},{:.0},{:.4},{:.4},{:.4},{:.0}",
            c.category,
            c.target_bps,
            c.mean_ratio,
            c.mean_ratio - c.stddev_ratio,
            c.mean_ratio + c.stddev_ratio,
            c.stddev_throughput_bps
        )
        .expect("string write");
    }
    out
}
