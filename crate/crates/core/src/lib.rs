//! Deterministic discrete-event simulator for multi-instance LLM serving.
//!
//! Instances are either P-heavy (large prefill chunk) or D-heavy (small
//! prefill chunk, possibly zero). Three cluster-wide knobs select the
//! operating point: the P-heavy to D-heavy instance ratio and the two chunk
//! sizes. Equal chunk sizes give classic prefill/decode aggregation, a zero
//! D-heavy chunk gives disaggregation, and anything in between runs the
//! hybrid mode with flowing decode and length-aware prefill routing.
//!
//! ```text
//!   arrivals ──▶ proxy (prefill routing) ──▶ instance prefill queues
//!                                               │ chunked prefill
//!                                               ▼
//!          D-heavy decode  ◀── degrade / backflow ──▶  P-heavy decode
//! ```
//!
//! The crate is `no_std` and only needs `alloc`. File formats, reports and
//! the command-line driver live in the `pdsim` crate.

#![no_std]

extern crate alloc;

pub mod cluster;
pub mod cost_model;
pub mod decode_flow;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod proxy;
pub mod workload;

use serde::{Deserialize, Serialize};

pub use cluster::{BatchPlan, ClusterConfig, Instance, InstanceKind};
pub use cost_model::CalibrationProfile;
pub use decode_flow::{DecodeView, FlowPolicy};
pub use engine::{run, Mode, PrefillRouting, RunOutput, SimConfig};
pub use error::{ConfigError, SimError};
pub use metrics::{MetricsReport, SloConfig};
pub use proxy::FeasibilityEstimate;
pub use workload::{Arrival, TraceRecord, WorkloadSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequestId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstanceId(pub u32);

impl InstanceId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RequestId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}
