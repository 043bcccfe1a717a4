use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use gfr_core::harness::{self, Overrides, ScenarioDocument};
use gfr_core::policer::{classify_frame_trace, parse_trace, GfrContract};

const DEFAULTS: &str = "\
Scenario documents are JSON. Every key is optional; unknown keys are errors.

  topology.n_sources            15
  topology.link_bandwidth_bps   155.52e6
  topology.link_delay_ms        5
  topology.buffer_cells         12000
  tcp.mss_bytes                 1024
  tcp.rcv_wnd_bytes             600000
  tcp.timer_granularity_ms      100   (minimum RTO is two ticks)
  gfr.allocation                \"equal\" | \"unequal-5-groups\" | [mcr_bps, ...]
  gfr.tagging                   \"off\" | \"tag\" | \"drop\"
  gfr.buffer_policy             {\"kind\": \"selective\", \"r\": 0.9, \"z\": 0.8}
                                kinds: tail; epd (r 0.8); selective (r 0.9, z 0.8);
                                wba (r 0.5, z 1); r is a fraction of the buffer
  gfr.scheduler                 \"fifo\" | \"wfq\"
  gfr.cdvt_s                    half a cell time at PCR
  run.duration_s                5
  run.seed                      0
  run.warmup_s                  0

Command-line flags override the document's values.";

#[derive(Parser)]
#[command(name = "gfrsim", version, about = "TCP over ATM GFR simulator", after_help = DEFAULTS)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its result files.
    Simulate {
        scenario: PathBuf,
        /// Output directory.
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Simulated seconds; overrides run.duration_s.
        #[arg(long)]
        duration_s: Option<f64>,
        /// Overrides run.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Name used for the output files.
        #[arg(long, default_value = "run")]
        run_id: String,
    },
    /// Run the eight accounting/tagging/queuing combinations on a base
    /// scenario with the unequal-5-groups allocation.
    Matrix {
        scenario: PathBuf,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Worker threads; defaults to the available parallelism.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Classify the frames of a trace against a GFR contract. Each trace
    /// line is `arrival_ns frame_cells`; cells follow at PCR spacing.
    PoliceTrace {
        trace: PathBuf,
        /// Minimum cell rate, cells/s.
        #[arg(long)]
        mcr: f64,
        /// Peak cell rate, cells/s.
        #[arg(long)]
        pcr: f64,
        #[arg(long)]
        max_frame_cells: u32,
        /// Cell delay variation tolerance, seconds.
        #[arg(long, default_value_t = 0.0)]
        cdvt: f64,
    },
    /// Check a scenario document without running it.
    Validate { scenario: PathBuf },
}

fn load(path: &Path, overrides: Overrides) -> Result<ScenarioDocument> {
    let doc = ScenarioDocument::load(path).with_context(|| format!("invalid scenario {}", path.display()))?;
    let doc = doc.with_overrides(overrides);
    doc.to_scenario().with_context(|| format!("invalid scenario {}", path.display()))?;
    Ok(doc)
}

fn simulate(path: &Path, out: &Path, overrides: Overrides, run_id: &str) -> Result<()> {
    let doc = load(path, overrides)?;
    let artifacts = harness::run_scenario(run_id, &doc)?;
    let files = artifacts.write_to(out)?;
    let s = &artifacts.report.summary;
    println!(
        "efficiency {:.3}  fairness {:.3}  min ratio {:.3}  gfr {}",
        s.efficiency,
        s.fairness,
        s.min_ratio,
        if s.gfr_verdict { "yes" } else { "no" }
    );
    for c in &s.categories {
        println!(
            "  category {}: {} vcs, target {:.2} Mb/s, ratio {:.3} +/- {:.3}",
            c.category,
            c.vcs,
            c.target_bps / 1e6,
            c.mean_ratio,
            c.stddev_ratio
        );
    }
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn matrix(path: &Path, out: &Path, jobs: Option<usize>) -> Result<()> {
    let doc = load(path, Overrides::default())?;
    let workers = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let entries = harness::run_matrix(&doc, workers, Some(out))?;
    print!("{}", harness::render_matrix(&entries));
    println!("wrote {}", out.join("matrix.csv").display());
    Ok(())
}

fn police_trace(path: &Path, mcr: f64, pcr: f64, max_frame_cells: u32, cdvt: f64) -> Result<()> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let trace = parse_trace(&text).with_context(|| format!("parsing {}", path.display()))?;
    let contract = GfrContract::new(mcr, pcr, max_frame_cells, cdvt)?;
    let verdicts = classify_frame_trace(&trace, &contract)?;
    println!("frame,arrival_ns,cells,verdict");
    let mut conforming = 0;
    for (i, (f, v)) in trace.iter().zip(&verdicts).enumerate() {
        println!("{i},{},{},{v}", f.arrival.as_nanos(), f.cells);
        if *v == gfr_core::Verdict::Conforming {
            conforming += 1;
        }
    }
    eprintln!("{conforming} of {} frames conforming", verdicts.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { scenario, out, duration_s, seed, run_id } => {
            simulate(scenario, out, Overrides { duration_s: *duration_s, seed: *seed }, run_id)
        }
        Command::Matrix { scenario, out, jobs } => matrix(scenario, out, *jobs),
        Command::PoliceTrace { trace, mcr, pcr, max_frame_cells, cdvt } => {
            police_trace(trace, *mcr, *pcr, *max_frame_cells, *cdvt)
        }
        Command::Validate { scenario } => load(scenario, Overrides::default()).map(|doc| {
            println!("ok {}", doc.hash());
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
