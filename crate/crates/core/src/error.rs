use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::RequestId;

/// A field-level configuration problem.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{section}.{field}: {message}")]
pub struct ConfigError {
    pub section: &'static str,
    pub field: &'static str,
    pub message: String,
}

impl ConfigError {
    pub fn field(section: &'static str, field: &'static str, message: impl Into<String>) -> Self {
        Self {
            section,
            field,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("workload is empty")]
    EmptyWorkload,
    #[error("no instance admits prefill (all chunk sizes are zero)")]
    NoPrefillInstance,
    #[error("deadlock at t={time_ms:.3} ms: {} request(s) unfinished with no pending event, first stuck: {stuck:?}", .unfinished)]
    Deadlock {
        time_ms: f64,
        unfinished: usize,
        stuck: Vec<StuckRequest>,
    },
}

/// Diagnostic for a request found unfinished when the event queue drained.
#[derive(Debug, Clone, PartialEq)]
pub struct StuckRequest {
    pub id: RequestId,
    pub phase: &'static str,
    pub instance: Option<u32>,
}
