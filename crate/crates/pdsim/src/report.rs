//! Report files.
//!
//! * `report.json`: run metadata and aggregate metrics.
//! * `requests.csv`: one row per completed request, columns in
//!   [`REQUEST_COLUMNS`] order.
//! * `events.jsonl`: the optional event trace, one event per line.
//! * `sweep.{csv,json}`, `goodput.json`, `breakdown.{csv,json}` for the
//!   multi-run commands.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use pdsim_core::engine::{Mode, RunOutput, TraceEvent};
use pdsim_core::metrics::{self, Aggregates, GoodputResult, LinearFit, RequestMetrics};
use pdsim_core::SloConfig;
use serde::{Deserialize, Serialize};

use crate::experiment::{BreakdownTable, SweepRow};

pub const REQUEST_COLUMNS: [&str; 14] = [
    "id",
    "prompt_len",
    "output_len",
    "prefill_instance",
    "ttft_ms",
    "tpot_ms",
    "interference_intensity",
    "migration_count",
    "backflow_count",
    "prefill_queue_ms",
    "prefill_exec_ms",
    "transfer_ms",
    "decode_queue_ms",
    "meets_slo",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub seed: u64,
    pub slo: SloConfig,
    pub aggregates: Aggregates,
    /// Per-request TPOT regressed on interference intensity.
    pub tpot_vs_intensity: Option<LinearFit>,
}

impl RunReport {
    pub fn new(mode: Mode, seed: u64, output: &RunOutput) -> Self {
        Self {
            mode,
            seed,
            slo: output.report.slo,
            aggregates: output.report.aggregates.clone(),
            tpot_vs_intensity: tpot_intensity_fit(&output.report.requests),
        }
    }
}

/// Fit over requests with at least two output tokens.
pub fn tpot_intensity_fit(requests: &[RequestMetrics]) -> Option<LinearFit> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = requests
        .iter()
        .filter(|r| r.output_len > 1)
        .map(|r| (r.interference_intensity, r.tpot_ms))
        .unzip();
    metrics::fit_line(&xs, &ys)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn write_requests_csv<W: Write>(out: W, requests: &[RequestMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REQUEST_COLUMNS)?;
    for r in requests {
        w.write_record([
            r.id.0.to_string(),
            r.prompt_len.to_string(),
            r.output_len.to_string(),
            r.prefill_instance.map(|i| i.0.to_string()).unwrap_or_default(),
            r.ttft_ms.to_string(),
            r.tpot_ms.to_string(),
            r.interference_intensity.to_string(),
            r.migration_count.to_string(),
            r.backflow_count.to_string(),
            r.breakdown.prefill_queue_ms.to_string(),
            r.breakdown.prefill_exec_ms.to_string(),
            r.breakdown.transfer_ms.to_string(),
            r.breakdown.decode_queue_ms.to_string(),
            r.meets_slo.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_events<W: Write>(mut out: W, events: &[TraceEvent]) -> io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Writes `report.json`, `requests.csv` and (when recorded) `events.jsonl`.
pub fn write_run(dir: &Path, report: &RunReport, output: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join("report.json"), report)?;
    let csv = BufWriter::new(File::create(dir.join("requests.csv"))?);
    write_requests_csv(csv, &output.report.requests)?;
    if !output.events.is_empty() {
        let mut out = BufWriter::new(File::create(dir.join("events.jsonl"))?);
        write_events(&mut out, &output.events)?;
        out.flush()?;
    }
    Ok(())
}

pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "axis",
        "value",
        "attainment",
        "p90_ttft_ms",
        "p90_tpot_ms",
        "mean_interference_intensity",
        "tail_prefill_queue_ms",
        "tail_prefill_exec_ms",
        "tail_transfer_ms",
        "tail_decode_queue_ms",
        "degrade_migrations",
        "backflow_migrations",
        "prefill_capacity_tokens_per_s",
        "error",
    ])?;
    for row in rows {
        let mut rec = vec![row.axis.to_string(), row.value.clone()];
        match &row.point {
            Some(p) => rec.extend([
                p.attainment.to_string(),
                p.p90_ttft_ms.to_string(),
                p.p90_tpot_ms.to_string(),
                p.mean_interference_intensity.to_string(),
                p.p90_tail_breakdown.prefill_queue_ms.to_string(),
                p.p90_tail_breakdown.prefill_exec_ms.to_string(),
                p.p90_tail_breakdown.transfer_ms.to_string(),
                p.p90_tail_breakdown.decode_queue_ms.to_string(),
                p.degrade_migrations.to_string(),
                p.backflow_migrations.to_string(),
                p.prefill_capacity_tokens_per_s.to_string(),
            ]),
            None => rec.extend(std::iter::repeat_n(String::new(), 11)),
        }
        rec.push(row.error.clone().unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_breakdown_csv<W: Write>(out: W, table: &BreakdownTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["stage".to_string()];
    header.extend(table.seeds.iter().map(|s| format!("attainment_seed_{s}")));
    header.extend(
        [
            "mean_attainment",
            "mean_p90_ttft_ms",
            "mean_p90_tpot_ms",
            "degrade_migrations",
            "backflow_migrations",
        ]
        .map(String::from),
    );
    w.write_record(&header)?;
    for row in &table.stages {
        let mut rec = vec![row.label.clone()];
        rec.extend(row.attainment_per_seed.iter().map(f64::to_string));
        rec.extend([
            row.mean_attainment.to_string(),
            row.mean_p90_ttft_ms.to_string(),
            row.mean_p90_tpot_ms.to_string(),
            row.degrade_migrations.to_string(),
            row.backflow_migrations.to_string(),
        ]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep(dir: &Path, rows: &[SweepRow]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join("sweep.json"), &rows)?;
    write_sweep_csv(BufWriter::new(File::create(dir.join("sweep.csv"))?), rows)
}

pub fn write_breakdown(dir: &Path, table: &BreakdownTable) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join("breakdown.json"), table)?;
    write_breakdown_csv(BufWriter::new(File::create(dir.join("breakdown.csv"))?), table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoodputReport {
    pub mode: Mode,
    pub slo: SloConfig,
    #[serde(flatten)]
    pub result: GoodputResult,
}

pub fn write_goodput(dir: &Path, report: &GoodputReport) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join("goodput.json"), report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pdsim_core::metrics::TtftBreakdown;
    use pdsim_core::{InstanceId, RequestId};

    #[test]
    fn csv_header_and_row() {
        let r = RequestMetrics {
            id: RequestId(4),
            prompt_len: 100,
            output_len: 5,
            prefill_instance: Some(InstanceId(1)),
            ttft_ms: 12.5,
            tpot_ms: 50.0,
            interference_intensity: 2.0,
            migration_count: 1,
            backflow_count: 0,
            breakdown: TtftBreakdown {
                prefill_queue_ms: 1.0,
                prefill_exec_ms: 10.0,
                transfer_ms: 0.5,
                decode_queue_ms: 1.0,
            },
            meets_slo: true,
        };
        let mut buf = Vec::new();
        write_requests_csv(&mut buf, &[r]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), REQUEST_COLUMNS.join(","));
        assert_eq!(lines.next().unwrap(), "4,100,5,1,12.5,50,2,1,0,1,10,0.5,1,true");
    }
}
