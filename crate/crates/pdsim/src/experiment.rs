//! Experiment orchestration: single runs, slider sweeps, goodput search and
//! the staged technique breakdown. Multi-run commands fan out over a rayon
//! pool; every run is independent and results are merged in input order, so
//! parallel and sequential execution give identical output.

use anyhow::{anyhow, bail, Context, Result};
use pdsim_core::engine::{self, Mode, PrefillRouting, RunOutput, SimConfig};
use pdsim_core::metrics::{self, GoodputResult, TtftBreakdown};
use pdsim_core::TraceRecord;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, SweepAxis};

/// Runs `f` on a pool of `jobs` threads (rayon's default when `None`).
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build()?;
            Ok(pool.install(f))
        }
    }
}

pub fn run_once(cfg: &ExperimentConfig, records: &[TraceRecord], seed: u64) -> Result<RunOutput> {
    let arrivals = cfg.arrivals(records, seed);
    run_sim(&cfg.sim_config(seed), &arrivals)
}

fn run_sim(sim: &SimConfig, arrivals: &[pdsim_core::Arrival]) -> Result<RunOutput> {
    engine::run(sim, arrivals).map_err(|e| anyhow!(e))
}

/// Applies one sweep value to a copy of the config.
pub fn apply_axis(cfg: &ExperimentConfig, axis: SweepAxis, value: &str) -> Result<ExperimentConfig> {
    let mut out = cfg.clone();
    let v = value.trim();
    match axis {
        SweepAxis::RatioPd => {
            let (p, d) = v
                .split_once(':')
                .ok_or_else(|| anyhow!("R_PD value {v:?} is not of the form P:D"))?;
            out.cluster.n_p_heavy = p.trim().parse().with_context(|| format!("R_PD value {v:?}"))?;
            out.cluster.n_d_heavy = d.trim().parse().with_context(|| format!("R_PD value {v:?}"))?;
        }
        SweepAxis::ChunkP => {
            out.cluster.s_p_tokens = v.parse().with_context(|| format!("S_P value {v:?}"))?;
            if out.mode == Mode::Aggregation {
                out.cluster.s_d_tokens = out.cluster.s_p_tokens;
            }
        }
        SweepAxis::ChunkD => {
            out.cluster.s_d_tokens = v.parse().with_context(|| format!("S_D value {v:?}"))?;
            if out.mode == Mode::Aggregation {
                out.cluster.s_p_tokens = out.cluster.s_d_tokens;
            }
        }
        SweepAxis::Qps => {
            out.workload.qps = v.parse().with_context(|| format!("QPS value {v:?}"))?;
        }
    }
    out.validate()?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub attainment: f64,
    pub p90_ttft_ms: f64,
    pub p90_tpot_ms: f64,
    pub mean_interference_intensity: f64,
    pub p90_tail_breakdown: TtftBreakdown,
    pub degrade_migrations: usize,
    pub backflow_migrations: usize,
    /// Modeled prefill tokens/s at 3000-token prompts and 16 decodes.
    pub prefill_capacity_tokens_per_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: String,
    pub point: Option<SweepPoint>,
    pub error: Option<String>,
}

pub fn sweep_point(cfg: &ExperimentConfig, records: &[TraceRecord], seed: u64) -> Result<SweepPoint> {
    let out = run_once(cfg, records, seed)?;
    let a = &out.report.aggregates;
    Ok(SweepPoint {
        attainment: a.attainment,
        p90_ttft_ms: a.ttft_ms.p90,
        p90_tpot_ms: a.tpot_ms.p90,
        mean_interference_intensity: a.mean_interference_intensity,
        p90_tail_breakdown: a.p90_tail_breakdown,
        degrade_migrations: a.degrade_migrations,
        backflow_migrations: a.backflow_migrations,
        prefill_capacity_tokens_per_s: engine::prefill_capacity(&cfg.sim_config(seed), 3000, 16),
    })
}

/// One run per axis value. A failing point is recorded and the sweep goes on.
pub fn sweep(
    cfg: &ExperimentConfig,
    records: &[TraceRecord],
    axis: SweepAxis,
    values: &[String],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        bail!("sweep needs at least one value");
    }
    Ok(values
        .par_iter()
        .map(|value| {
            let result = apply_axis(cfg, axis, value).and_then(|c| sweep_point(&c, records, seed));
            match result {
                Ok(point) => SweepRow {
                    axis,
                    value: value.clone(),
                    point: Some(point),
                    error: None,
                },
                Err(e) => SweepRow {
                    axis,
                    value: value.clone(),
                    point: None,
                    error: Some(format!("{e:#}")),
                },
            }
        })
        .collect())
}

pub fn goodput(
    cfg: &ExperimentConfig,
    records: &[TraceRecord],
    qps_grid: &[f64],
    seeds: &[u64],
) -> Result<GoodputResult> {
    if qps_grid.is_empty() || !qps_grid.windows(2).all(|w| w[0] < w[1]) {
        bail!("qps grid must be nonempty and strictly increasing");
    }
    if seeds.is_empty() {
        bail!("goodput search needs at least one seed");
    }
    let jobs: Vec<(f64, u64)> = qps_grid
        .iter()
        .flat_map(|q| seeds.iter().map(move |s| (*q, *s)))
        .collect();
    let attainments = jobs
        .par_iter()
        .map(|&(qps, seed)| {
            let mut c = cfg.clone();
            c.workload.qps = qps;
            run_once(&c, records, seed).map(|o| o.report.aggregates.attainment)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(metrics::goodput_from_grid(
        qps_grid,
        seeds,
        &attainments,
        cfg.slo.attainment_target,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Uniform small chunk on every instance, round-robin prefill.
    BaseAggregation,
    /// Differentiated chunks, round-robin prefill, decode in place.
    Arch,
    /// Adds flowing decode.
    FlowingDecode,
    /// Adds length-aware prefill routing.
    LengthAwarePrefill,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::BaseAggregation,
        Stage::Arch,
        Stage::FlowingDecode,
        Stage::LengthAwarePrefill,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Stage::BaseAggregation => "base",
            Stage::Arch => "+arch",
            Stage::FlowingDecode => "+flowing_decode",
            Stage::LengthAwarePrefill => "+length_aware_prefill",
        }
    }

    pub fn configure(self, cfg: &ExperimentConfig, base_chunk: u32) -> ExperimentConfig {
        let mut c = cfg.clone();
        match self {
            Stage::BaseAggregation => {
                c.mode = Mode::Aggregation;
                c.cluster.s_p_tokens = base_chunk;
                c.cluster.s_d_tokens = base_chunk;
                c.policy.routing = PrefillRouting::RoundRobin;
                c.policy.flowing_decode = false;
            }
            Stage::Arch => {
                c.mode = Mode::Hybrid;
                c.policy.routing = PrefillRouting::RoundRobin;
                c.policy.flowing_decode = false;
            }
            Stage::FlowingDecode => {
                c.mode = Mode::Hybrid;
                c.policy.routing = PrefillRouting::RoundRobin;
                c.policy.flowing_decode = true;
            }
            Stage::LengthAwarePrefill => {
                c.mode = Mode::Hybrid;
                c.policy.routing = PrefillRouting::LengthAware;
                c.policy.flowing_decode = true;
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: Stage,
    pub label: String,
    pub attainment_per_seed: Vec<f64>,
    pub mean_attainment: f64,
    pub mean_p90_ttft_ms: f64,
    pub mean_p90_tpot_ms: f64,
    pub degrade_migrations: usize,
    pub backflow_migrations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownTable {
    pub seeds: Vec<u64>,
    pub base_chunk_tokens: u32,
    pub stages: Vec<StageRow>,
}

pub fn breakdown(
    cfg: &ExperimentConfig,
    records: &[TraceRecord],
    base_chunk: u32,
    seeds: &[u64],
) -> Result<BreakdownTable> {
    if seeds.is_empty() {
        bail!("breakdown needs at least one seed");
    }
    let jobs: Vec<(Stage, u64)> = Stage::ALL
        .iter()
        .flat_map(|st| seeds.iter().map(move |s| (*st, *s)))
        .collect();
    let outputs = jobs
        .par_iter()
        .map(|&(stage, seed)| {
            let c = stage.configure(cfg, base_chunk);
            run_once(&c, records, seed).map(|o| o.report.aggregates)
        })
        .collect::<Result<Vec<_>>>()?;

    let n = seeds.len();
    let stages = Stage::ALL
        .iter()
        .zip(outputs.chunks(n))
        .map(|(stage, aggs)| {
            let mean = |f: &dyn Fn(&metrics::Aggregates) -> f64| aggs.iter().map(f).sum::<f64>() / n as f64;
            StageRow {
                stage: *stage,
                label: stage.label().to_string(),
                attainment_per_seed: aggs.iter().map(|a| a.attainment).collect(),
                mean_attainment: mean(&|a| a.attainment),
                mean_p90_ttft_ms: mean(&|a| a.ttft_ms.p90),
                mean_p90_tpot_ms: mean(&|a| a.tpot_ms.p90),
                degrade_migrations: aggs.iter().map(|a| a.degrade_migrations).sum(),
                backflow_migrations: aggs.iter().map(|a| a.backflow_migrations).sum(),
            }
        })
        .collect();
    Ok(BreakdownTable {
        seeds: seeds.to_vec(),
        base_chunk_tokens: base_chunk,
        stages,
    })
}
