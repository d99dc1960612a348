//! Experiment configuration file (TOML).
//!
//! Every quantity carries its unit in the field name: `*_ms`, `*_tokens`,
//! `*_bytes`. See `configs/` in the repository for complete examples.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pdsim_core::engine::{Mode, PrefillRouting, SimConfig};
use pdsim_core::workload::{self, SyntheticTrace};
use pdsim_core::{
    Arrival, CalibrationProfile, ClusterConfig, ConfigError, FlowPolicy, SloConfig, TraceRecord, WorkloadSpec,
};
use serde::{Deserialize, Serialize};

use crate::trace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub cluster: ClusterConfig,
    pub slo: SloConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub profile: CalibrationProfile,
    pub workload: WorkloadConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goodput: Option<GoodputConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<BreakdownConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub watermark_m: f64,
    pub approach_factor_alpha: f64,
    pub flowing_decode: bool,
    pub routing: PrefillRouting,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        let flow = FlowPolicy::default();
        Self {
            watermark_m: flow.watermark_m,
            approach_factor_alpha: flow.approach_factor_alpha,
            flowing_decode: true,
            routing: PrefillRouting::LengthAware,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    Chat,
    Summarization,
}

impl SyntheticKind {
    pub fn model(self) -> SyntheticTrace {
        match self {
            SyntheticKind::Chat => SyntheticTrace::chat(),
            SyntheticKind::Summarization => SyntheticTrace::summarization(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    pub qps: f64,
    pub n_requests: u32,
    pub max_prompt_tokens: u32,
    pub max_output_tokens: u32,
    #[serde(default)]
    pub replay_in_order: bool,
    /// Line-delimited trace file, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_path: Option<PathBuf>,
    /// Synthetic length model used when no trace file is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticKind>,
    #[serde(default = "default_trace_records")]
    pub synthetic_records: usize,
    #[serde(default)]
    pub synthetic_seed: u64,
}

fn default_trace_records() -> usize {
    4096
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Seeds for multi-run commands (goodput, breakdown).
    pub seeds: Vec<u64>,
    pub early_reject: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            seeds: vec![1, 2, 3],
            early_reject: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub write_events: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            write_events: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    #[serde(rename = "R_PD", alias = "r_pd")]
    RatioPd,
    #[serde(rename = "S_P", alias = "s_p")]
    ChunkP,
    #[serde(rename = "S_D", alias = "s_d")]
    ChunkD,
    #[serde(rename = "QPS", alias = "qps")]
    Qps,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::RatioPd => "R_PD",
            SweepAxis::ChunkP => "S_P",
            SweepAxis::ChunkD => "S_D",
            SweepAxis::Qps => "QPS",
        })
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "R_PD" | "RPD" | "RATIO" => Ok(SweepAxis::RatioPd),
            "S_P" | "SP" => Ok(SweepAxis::ChunkP),
            "S_D" | "SD" => Ok(SweepAxis::ChunkD),
            "QPS" => Ok(SweepAxis::Qps),
            _ => anyhow::bail!("unknown sweep axis {s:?} (expected R_PD, S_P, S_D or QPS)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    /// Axis values as text: `"6:2"` for R_PD, integers for chunk sizes,
    /// decimals for QPS.
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoodputConfig {
    pub qps_grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BreakdownConfig {
    /// Uniform chunk size of the aggregation baseline stage.
    pub base_chunk_tokens: u32,
}

/// All validation problems found in a config, one per line.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationErrors(pub Vec<ConfigError>);

impl fmt::Display for ValidationErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (n, e) in self.0.iter().enumerate() {
            if n > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ValidationErrors {}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).context("parsing config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates a config; relative trace paths resolve against
    /// the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::from_toml(&text).with_context(|| format!("in {}", path.display()))?;
        if let (Some(trace), Some(dir)) = (&cfg.workload.trace_path, path.parent()) {
            if trace.is_relative() {
                cfg.workload.trace_path = Some(dir.join(trace));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn flow_policy(&self) -> FlowPolicy {
        FlowPolicy {
            watermark_m: self.policy.watermark_m,
            approach_factor_alpha: self.policy.approach_factor_alpha,
        }
    }

    pub fn workload_spec(&self, seed: u64) -> WorkloadSpec {
        let w = &self.workload;
        WorkloadSpec {
            qps: w.qps,
            seed,
            n_requests: w.n_requests,
            max_prompt_len: w.max_prompt_tokens,
            max_output_len: w.max_output_tokens,
            replay_in_order: w.replay_in_order,
        }
    }

    pub fn sim_config(&self, seed: u64) -> SimConfig {
        SimConfig {
            mode: self.mode,
            cluster: self.cluster,
            slo: self.slo,
            policy: self.flow_policy(),
            profile: self.profile,
            routing: self.policy.routing,
            flowing_decode: self.policy.flowing_decode,
            early_reject: self.run.early_reject,
            seed,
            record_events: self.output.write_events,
            record_token_times: false,
            check_invariants: false,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), ValidationErrors> {
        let mut errors = Vec::new();
        let sections = [
            self.cluster.validate(),
            self.slo.validate(),
            self.flow_policy().validate(),
            self.profile.validate(),
        ];
        let sections_ok = sections.iter().all(Result::is_ok);
        errors.extend(sections.into_iter().filter_map(Result::err));
        // Mode/slider consistency only makes sense once each section is sane.
        if sections_ok {
            if let Err(e) = self.sim_config(self.run.seed).validate() {
                errors.push(e);
            }
        }
        if let Err(e) = self.workload_spec(self.run.seed).validate() {
            errors.push(e);
        }
        let w = &self.workload;
        if w.trace_path.is_some() == w.synthetic.is_some() {
            errors.push(ConfigError::field(
                "workload",
                "trace_path",
                "set exactly one of trace_path or synthetic",
            ));
        }
        if w.max_prompt_tokens > self.cluster.max_context_tokens {
            errors.push(ConfigError::field(
                "workload",
                "max_prompt_tokens",
                "exceeds cluster.max_context_tokens",
            ));
        }
        if u64::from(w.max_prompt_tokens) + u64::from(w.max_output_tokens) > self.cluster.kv_capacity_tokens {
            errors.push(ConfigError::field(
                "workload",
                "max_output_tokens",
                "max_prompt_tokens + max_output_tokens exceeds cluster.kv_capacity_tokens",
            ));
        }
        if self.run.seeds.is_empty() {
            errors.push(ConfigError::field("run", "seeds", "needs at least one seed"));
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                errors.push(ConfigError::field("sweep", "values", "must not be empty"));
            }
        }
        if let Some(g) = &self.goodput {
            if g.qps_grid.is_empty() || !g.qps_grid.windows(2).all(|p| p[0] < p[1]) || g.qps_grid[0] <= 0.0 {
                errors.push(ConfigError::field(
                    "goodput",
                    "qps_grid",
                    "must be a nonempty, positive, strictly increasing list",
                ));
            }
        }
        if let Some(b) = &self.breakdown {
            if b.base_chunk_tokens == 0 || b.base_chunk_tokens > self.cluster.max_context_tokens {
                errors.push(ConfigError::field(
                    "breakdown",
                    "base_chunk_tokens",
                    "must lie in 1..=max_context_tokens",
                ));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ValidationErrors(errors))
        }
    }

    /// Length-filtered trace records the arrival generator samples from.
    pub fn load_records(&self) -> Result<Vec<TraceRecord>> {
        let w = &self.workload;
        let raw = match (&w.trace_path, w.synthetic) {
            (Some(path), _) => trace::load_trace(path).with_context(|| format!("loading trace {}", path.display()))?,
            (None, Some(kind)) => kind.model().generate(w.synthetic_records, w.synthetic_seed),
            (None, None) => anyhow::bail!("workload: no trace source"),
        };
        let kept = workload::filter_lengths(&raw, w.max_prompt_tokens, w.max_output_tokens);
        anyhow::ensure!(!kept.is_empty(), "workload: every trace record exceeds the length caps");
        Ok(kept)
    }

    pub fn arrivals(&self, records: &[TraceRecord], seed: u64) -> Vec<Arrival> {
        workload::generate_arrivals(&self.workload_spec(seed), records)
    }
}
