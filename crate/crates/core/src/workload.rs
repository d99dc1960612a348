//! Request lengths and arrival streams.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// One request's lengths. `output_len` is only read by the engine to know
/// when a decode terminates; schedulers never see it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub prompt_len: u32,
    pub output_len: u32,
}

impl TraceRecord {
    pub fn is_valid(&self) -> bool {
        self.prompt_len >= 1 && self.output_len >= 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub qps: f64,
    pub seed: u64,
    pub n_requests: u32,
    pub max_prompt_len: u32,
    pub max_output_len: u32,
    /// Replay trace records in file order (cycling) instead of sampling.
    #[serde(default)]
    pub replay_in_order: bool,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.qps.is_finite() && self.qps > 0.0) {
            return Err(ConfigError::field("workload", "qps", "must be a finite positive rate"));
        }
        if self.n_requests == 0 {
            return Err(ConfigError::field("workload", "n_requests", "must be at least 1"));
        }
        if self.max_prompt_len == 0 {
            return Err(ConfigError::field("workload", "max_prompt_len", "must be positive"));
        }
        if self.max_output_len == 0 {
            return Err(ConfigError::field("workload", "max_output_len", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arrival {
    pub arrival_time_ms: f64,
    #[serde(flatten)]
    pub record: TraceRecord,
}

pub fn filter_lengths(records: &[TraceRecord], max_prompt: u32, max_output: u32) -> Vec<TraceRecord> {
    records
        .iter()
        .filter(|r| r.prompt_len <= max_prompt && r.output_len <= max_output)
        .copied()
        .collect()
}

/// Seeded Poisson arrival stream over records drawn from `records`.
///
/// Gaps are exponential with mean `1000 / qps` ms. Arrival times are
/// strictly increasing. Panics on an empty record set.
pub fn generate_arrivals(spec: &WorkloadSpec, records: &[TraceRecord]) -> Vec<Arrival> {
    assert!(!records.is_empty(), "arrival generation needs at least one record");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gap = Exp::new(spec.qps / 1000.0).expect("qps is validated positive");
    let mut now = 0.0f64;
    let mut out = Vec::with_capacity(spec.n_requests as usize);
    for n in 0..spec.n_requests as usize {
        let next = now + gap.sample(&mut rng);
        now = if next > now { next } else { now.next_up() };
        let record = if spec.replay_in_order {
            records[n % records.len()]
        } else {
            records[rng.random_range(0..records.len())]
        };
        out.push(Arrival {
            arrival_time_ms: now,
            record,
        });
    }
    out
}

/// Log-normal length model for synthetic traces.
///
/// These are synthetic stand-ins shaped loosely like public chat and
/// summarization length histograms, not samples of any real dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTrace {
    pub prompt_median: f64,
    pub prompt_sigma: f64,
    pub output_median: f64,
    pub output_sigma: f64,
    pub min_prompt: u32,
    pub max_prompt: u32,
    pub min_output: u32,
    pub max_output: u32,
}

impl SyntheticTrace {
    /// Short prompts and medium outputs, chat-like.
    pub const fn chat() -> Self {
        Self {
            prompt_median: 300.0,
            prompt_sigma: 1.0,
            output_median: 200.0,
            output_sigma: 0.9,
            min_prompt: 4,
            max_prompt: 2048,
            min_output: 1,
            max_output: 2048,
        }
    }

    /// Long prompts and short-to-medium outputs, summarization-like.
    pub const fn summarization() -> Self {
        Self {
            prompt_median: 3000.0,
            prompt_sigma: 0.6,
            output_median: 180.0,
            output_sigma: 0.5,
            min_prompt: 256,
            max_prompt: 16_384,
            min_output: 8,
            max_output: 1024,
        }
    }

    pub fn generate(&self, n: usize, seed: u64) -> Vec<TraceRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prompt = LogNormal::new(libm_ln(self.prompt_median), self.prompt_sigma).expect("sigma is non-negative");
        let output = LogNormal::new(libm_ln(self.output_median), self.output_sigma).expect("sigma is non-negative");
        (0..n)
            .map(|_| TraceRecord {
                prompt_len: clamp_round(prompt.sample(&mut rng), self.min_prompt, self.max_prompt),
                output_len: clamp_round(output.sample(&mut rng), self.min_output, self.max_output),
            })
            .collect()
    }
}

fn clamp_round(x: f64, lo: u32, hi: u32) -> u32 {
    let v = (x + 0.5) as u64;
    (v as u32).clamp(lo, hi)
}

fn libm_ln(x: f64) -> f64 {
    use rand_distr::num_traits::Float;
    Float::ln(x)
}
