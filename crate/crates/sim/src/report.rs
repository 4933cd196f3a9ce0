//! CSV output: per-class results, the per-policy summary and query traces.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use sas_core::dataplane::QueuePolicy;

use crate::engine::TraceRecord;
use crate::sweep::{gain_percent, ClassRow, SweepResult};

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

fn csv_err(e: csv::Error) -> io::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => e,
        other => io::Error::other(format!("{other:?}")),
    }
}

pub fn write_results<W: Write>(out: W, rows: &[ClassRow]) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["policy", "class", "rate", "p99_us", "slo_us", "met", "deadline_miss_frac"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.policy.name().to_string(),
            r.class.to_string(),
            format!("{:.3}", r.rate),
            r.p99_us.map_or_else(String::new, |v| v.to_string()),
            r.slo_us.to_string(),
            r.met.to_string(),
            format!("{:.6}", r.deadline_miss_frac),
        ])
        .map_err(csv_err)?;
    }
    w.flush()
}

fn label(p: QueuePolicy) -> &'static str {
    match p {
        QueuePolicy::Edfq => "EDFQ",
        QueuePolicy::Fifo => "FIFO",
        QueuePolicy::Spr => "SPR",
    }
}

/// Max rate per policy, then EDFQ's gain over each other policy.
pub fn write_summary<W: Write>(out: W, sweeps: &[SweepResult]) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["metric", "policy", "value"]).map_err(csv_err)?;
    for s in sweeps {
        w.write_record(["max_rate", s.policy.name(), &format!("{:.3}", s.max_rate)])
            .map_err(csv_err)?;
    }
    if let Some(edfq) = sweeps.iter().find(|s| s.policy == QueuePolicy::Edfq) {
        for other in sweeps.iter().filter(|s| s.policy != QueuePolicy::Edfq) {
            let name = format!("EDFQ over {}", label(other.policy));
            let g = gain_percent(edfq.max_rate, other.max_rate);
            w.write_record(["gain_percent", &name, &format!("{g:.2}")]).map_err(csv_err)?;
        }
    }
    w.flush()
}

pub fn write_trace<W: Write>(out: W, trace: &[TraceRecord]) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["query_id", "class", "arrival_us", "finish_us", "k_q", "k_t", "deadline_misses"])
        .map_err(csv_err)?;
    for t in trace {
        let kt: Vec<String> = t.task_fanouts.iter().map(u32::to_string).collect();
        w.write_record([
            t.query.to_string(),
            t.class.clone(),
            t.arrival_us.to_string(),
            t.finish_us.to_string(),
            t.query_fanout.to_string(),
            kt.join(";"),
            t.deadline_misses.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()
}

/// Writes `results.csv` (every evaluated point of every sweep) and
/// `summary.csv` into `dir`. Returns the paths written.
pub fn emit_report(dir: &Path, sweeps: &[SweepResult]) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let rows: Vec<ClassRow> =
        sweeps.iter().flat_map(|s| s.points.iter().flat_map(|p| p.rows.iter().cloned())).collect();
    let results = dir.join(RESULTS_FILE);
    write_results(io::BufWriter::new(fs::File::create(&results)?), &rows)?;
    let summary = dir.join(SUMMARY_FILE);
    write_summary(io::BufWriter::new(fs::File::create(&summary)?), sweeps)?;
    Ok(vec![results, summary])
}
