//! Latency, interference, SLO attainment and goodput.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::{InstanceId, RequestId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SloConfig {
    pub ttft_ms: f64,
    pub tpot_ms: f64,
    #[serde(default = "default_attainment_target")]
    pub attainment_target: f64,
}

fn default_attainment_target() -> f64 {
    0.90
}

impl SloConfig {
    pub fn new(ttft_ms: f64, tpot_ms: f64) -> Self {
        Self {
            ttft_ms,
            tpot_ms,
            attainment_target: default_attainment_target(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.ttft_ms.is_finite() && self.ttft_ms > 0.0) {
            return Err(ConfigError::field("slo", "ttft_ms", "must be a finite positive number"));
        }
        if !(self.tpot_ms.is_finite() && self.tpot_ms > 0.0) {
            return Err(ConfigError::field("slo", "tpot_ms", "must be a finite positive number"));
        }
        if !(self.attainment_target > 0.0 && self.attainment_target <= 1.0) {
            return Err(ConfigError::field("slo", "attainment_target", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MigrationReason {
    /// KV handoff from the prefill instance to the first decode host.
    Init,
    Degrade,
    Backflow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Migration {
    pub time_ms: f64,
    pub from: InstanceId,
    pub to: InstanceId,
    pub reason: MigrationReason,
    /// Prefill tokens co-scheduled with this request on `from` since its
    /// previous migration.
    pub segment_prefill_tokens: u64,
}

/// Everything the engine records about one request.
///
/// TTFT runs from arrival to the first token, where the first token is
/// emitted when the request is admitted to its first decode host. It thus
/// splits exactly into prefill queueing (`arrival → prefill_start`), prefill
/// execution (`→ prefill_done`), KV transfer (`→ decode_ready`) and decode
/// queueing (`→ first_token`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestLifecycle {
    pub id: RequestId,
    pub prompt_len: u32,
    pub output_len: u32,
    pub arrival_ms: f64,
    pub prefill_instance: Option<InstanceId>,
    pub prefill_assign_ms: Option<f64>,
    pub prefill_start_ms: Option<f64>,
    pub prefill_done_ms: Option<f64>,
    pub decode_ready_ms: Option<f64>,
    pub first_token_ms: Option<f64>,
    pub completion_ms: Option<f64>,
    /// Filled only when token times are recorded.
    pub token_emit_times: Vec<f64>,
    pub migrations: Vec<Migration>,
    pub co_scheduled_prefill_tokens: u64,
    /// Times the decode was swapped out for lack of KV slots.
    pub preemptions: u32,
    pub fallback_routed: bool,
    pub rejected: bool,
}

impl RequestLifecycle {
    pub fn new(id: RequestId, prompt_len: u32, output_len: u32, arrival_ms: f64) -> Self {
        Self {
            id,
            prompt_len,
            output_len,
            arrival_ms,
            prefill_instance: None,
            prefill_assign_ms: None,
            prefill_start_ms: None,
            prefill_done_ms: None,
            decode_ready_ms: None,
            first_token_ms: None,
            completion_ms: None,
            token_emit_times: Vec::new(),
            migrations: Vec::new(),
            co_scheduled_prefill_tokens: 0,
            preemptions: 0,
            fallback_routed: false,
            rejected: false,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.completion_ms.is_some()
    }

    pub fn count_migrations(&self, reason: MigrationReason) -> usize {
        self.migrations.iter().filter(|m| m.reason == reason).count()
    }
}

/// Arrival to first token; `None` if no first token was recorded.
pub fn compute_ttft(lc: &RequestLifecycle) -> Option<f64> {
    lc.first_token_ms.map(|t| t - lc.arrival_ms)
}

/// Mean gap between output tokens after the first. Zero for single-token
/// outputs; `None` for incomplete requests.
pub fn compute_tpot(lc: &RequestLifecycle) -> Option<f64> {
    let done = lc.completion_ms?;
    let first = lc.first_token_ms?;
    if lc.output_len <= 1 {
        return Some(0.0);
    }
    Some((done - first) / (lc.output_len - 1) as f64)
}

/// Prefill tokens co-scheduled with a request's decode iterations per
/// output token.
pub fn interference_intensity<I>(output_len: u32, co_scheduled_prefill: I) -> f64
where
    I: IntoIterator<Item = u64>,
{
    let total: u64 = co_scheduled_prefill.into_iter().sum();
    total as f64 / output_len as f64
}

/// TTFT split into its recorded segments.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TtftBreakdown {
    pub prefill_queue_ms: f64,
    pub prefill_exec_ms: f64,
    pub transfer_ms: f64,
    pub decode_queue_ms: f64,
}

impl TtftBreakdown {
    pub fn of(lc: &RequestLifecycle) -> Option<Self> {
        Some(Self {
            prefill_queue_ms: lc.prefill_start_ms? - lc.arrival_ms,
            prefill_exec_ms: lc.prefill_done_ms? - lc.prefill_start_ms?,
            transfer_ms: lc.decode_ready_ms? - lc.prefill_done_ms?,
            decode_queue_ms: lc.first_token_ms? - lc.decode_ready_ms?,
        })
    }

    pub fn total(&self) -> f64 {
        self.prefill_queue_ms + self.prefill_exec_ms + self.transfer_ms + self.decode_queue_ms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestMetrics {
    pub id: RequestId,
    pub prompt_len: u32,
    pub output_len: u32,
    pub prefill_instance: Option<InstanceId>,
    pub ttft_ms: f64,
    pub tpot_ms: f64,
    pub interference_intensity: f64,
    pub migration_count: u32,
    pub backflow_count: u32,
    pub breakdown: TtftBreakdown,
    pub meets_slo: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub n_requests: usize,
    pub n_completed: usize,
    pub n_rejected: usize,
    pub n_unfinished: usize,
    pub n_fallback_routed: usize,
    /// Fraction of all arrived requests meeting both SLOs. Rejected
    /// requests count as misses.
    pub attainment: f64,
    pub ttft_ms: Percentiles,
    pub tpot_ms: Percentiles,
    pub mean_interference_intensity: f64,
    pub init_transfers: usize,
    pub degrade_migrations: usize,
    pub backflow_migrations: usize,
    pub preemptions: usize,
    /// Mean TTFT segments over requests at or above the p90 TTFT.
    pub p90_tail_breakdown: TtftBreakdown,
    pub makespan_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub slo: SloConfig,
    pub aggregates: Aggregates,
    pub requests: Vec<RequestMetrics>,
}

/// Nearest-rank percentile of an ascending slice, `permille` in 1..=1000.
pub fn percentile(sorted: &[f64], permille: u32) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let n = sorted.len();
    let rank = (permille as usize * n).div_ceil(1000).max(1);
    sorted[rank.min(n) - 1]
}

fn percentiles(mut values: Vec<f64>) -> Percentiles {
    values.sort_by(f64::total_cmp);
    Percentiles {
        p50: percentile(&values, 500),
        p90: percentile(&values, 900),
        p99: percentile(&values, 990),
    }
}

pub fn request_metrics(lc: &RequestLifecycle, slo: &SloConfig) -> Option<RequestMetrics> {
    let ttft = compute_ttft(lc)?;
    let tpot = compute_tpot(lc)?;
    Some(RequestMetrics {
        id: lc.id,
        prompt_len: lc.prompt_len,
        output_len: lc.output_len,
        prefill_instance: lc.prefill_instance,
        ttft_ms: ttft,
        tpot_ms: tpot,
        interference_intensity: interference_intensity(lc.output_len, [lc.co_scheduled_prefill_tokens]),
        migration_count: lc
            .migrations
            .iter()
            .filter(|m| m.reason != MigrationReason::Init)
            .count() as u32,
        backflow_count: lc.count_migrations(MigrationReason::Backflow) as u32,
        breakdown: TtftBreakdown::of(lc).unwrap_or_default(),
        meets_slo: ttft <= slo.ttft_ms && tpot <= slo.tpot_ms,
    })
}

/// Builds the report. Requests are listed in id order regardless of the
/// order of `lifecycles`.
pub fn summarize(lifecycles: &[RequestLifecycle], slo: &SloConfig) -> MetricsReport {
    let mut requests: Vec<RequestMetrics> = lifecycles.iter().filter_map(|lc| request_metrics(lc, slo)).collect();
    requests.sort_by_key(|r| r.id);

    let n_requests = lifecycles.len();
    let n_rejected = lifecycles.iter().filter(|lc| lc.rejected).count();
    let n_completed = requests.len();
    let met = requests.iter().filter(|r| r.meets_slo).count();

    let ttft = percentiles(requests.iter().map(|r| r.ttft_ms).collect());
    let tpot = percentiles(requests.iter().map(|r| r.tpot_ms).collect());

    let mut tail = TtftBreakdown::default();
    let tail_members: Vec<&RequestMetrics> = requests.iter().filter(|r| r.ttft_ms >= ttft.p90).collect();
    if !tail_members.is_empty() {
        let k = tail_members.len() as f64;
        for r in &tail_members {
            tail.prefill_queue_ms += r.breakdown.prefill_queue_ms / k;
            tail.prefill_exec_ms += r.breakdown.prefill_exec_ms / k;
            tail.transfer_ms += r.breakdown.transfer_ms / k;
            tail.decode_queue_ms += r.breakdown.decode_queue_ms / k;
        }
    }

    let count = |reason| lifecycles.iter().map(|lc| lc.count_migrations(reason)).sum();
    let first_arrival = lifecycles.iter().map(|lc| lc.arrival_ms).fold(f64::INFINITY, f64::min);
    let last_done = lifecycles
        .iter()
        .filter_map(|lc| lc.completion_ms)
        .fold(f64::NEG_INFINITY, f64::max);

    let aggregates = Aggregates {
        n_requests,
        n_completed,
        n_rejected,
        n_unfinished: n_requests - n_completed - n_rejected,
        n_fallback_routed: lifecycles.iter().filter(|lc| lc.fallback_routed).count(),
        attainment: if n_requests == 0 {
            0.0
        } else {
            met as f64 / n_requests as f64
        },
        ttft_ms: ttft,
        tpot_ms: tpot,
        mean_interference_intensity: if n_completed == 0 {
            0.0
        } else {
            requests.iter().map(|r| r.interference_intensity).sum::<f64>() / n_completed as f64
        },
        init_transfers: count(MigrationReason::Init),
        degrade_migrations: count(MigrationReason::Degrade),
        backflow_migrations: count(MigrationReason::Backflow),
        preemptions: lifecycles.iter().map(|lc| lc.preemptions as usize).sum(),
        p90_tail_breakdown: tail,
        makespan_ms: if n_completed == 0 {
            0.0
        } else {
            last_done - first_arrival
        },
    };
    MetricsReport {
        slo: *slo,
        aggregates,
        requests,
    }
}

/// Highest grid rate whose attainment meets `target`, scanning every point
/// rather than stopping at the first miss. Zero when no point passes.
pub fn scan_goodput(qps_grid: &[f64], attainments: &[f64], target: f64) -> f64 {
    qps_grid
        .iter()
        .zip(attainments)
        .filter(|(_, a)| **a >= target)
        .map(|(q, _)| *q)
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoodputPoint {
    pub qps: f64,
    pub attainment_per_seed: Vec<f64>,
    pub mean_attainment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoodputResult {
    pub goodput_qps: f64,
    pub attainment_target: f64,
    pub seeds: Vec<u64>,
    pub points: Vec<GoodputPoint>,
}

/// Goodput from per-(rate, seed) attainments laid out rate-major.
pub fn goodput_from_grid(qps_grid: &[f64], seeds: &[u64], attainments: &[f64], target: f64) -> GoodputResult {
    assert_eq!(attainments.len(), qps_grid.len() * seeds.len());
    let points: Vec<GoodputPoint> = qps_grid
        .iter()
        .zip(attainments.chunks(seeds.len().max(1)))
        .map(|(qps, per_seed)| GoodputPoint {
            qps: *qps,
            attainment_per_seed: per_seed.to_vec(),
            mean_attainment: per_seed.iter().sum::<f64>() / per_seed.len() as f64,
        })
        .collect();
    let means: Vec<f64> = points.iter().map(|p| p.mean_attainment).collect();
    GoodputResult {
        goodput_qps: scan_goodput(qps_grid, &means, target),
        attainment_target: target,
        seeds: seeds.to_vec(),
        points,
    }
}

/// Sequential goodput search; `attainment_at(qps, seed)` runs one simulation.
pub fn goodput_search<E, F>(
    qps_grid: &[f64],
    seeds: &[u64],
    target: f64,
    mut attainment_at: F,
) -> Result<GoodputResult, E>
where
    F: FnMut(f64, u64) -> Result<f64, E>,
{
    assert!(
        qps_grid.windows(2).all(|w| w[0] < w[1]),
        "qps grid must be strictly increasing"
    );
    assert!(!seeds.is_empty(), "at least one seed is required");
    let mut attainments = Vec::with_capacity(qps_grid.len() * seeds.len());
    for &qps in qps_grid {
        for &seed in seeds {
            attainments.push(attainment_at(qps, seed)?);
        }
    }
    Ok(goodput_from_grid(qps_grid, seeds, &attainments, target))
}

/// Ordinary least squares fit `y = slope * x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn fit_line(xs: &[f64], ys: &[f64]) -> Option<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some(LinearFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
    })
}
