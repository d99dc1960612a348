//! Length-aware prefill routing.
//!
//! For every instance the proxy estimates the TTFT a new prompt would see
//! there: the estimated execution of everything already queued, plus its own
//! execution, plus the KV transfer when prefill happens on a P-heavy instance
//! and decode will move away. Among instances that stay under the TTFT SLO
//! it picks the one with the fewest queued prefill tokens. Short prompts thus
//! tend to land on the slow D-heavy instances, which hold fewer queued tokens
//! under the same SLO.

use alloc::vec::Vec;

use rand::Rng;

use crate::cluster::{Instance, InstanceKind};
use crate::cost_model::CalibrationProfile;
use crate::error::SimError;
use crate::InstanceId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeasibilityEstimate {
    pub instance_id: InstanceId,
    pub q_ms: f64,
    pub e_ms: f64,
    pub t_ms: f64,
    pub feasible: bool,
}

/// Estimates TTFT components for a `prompt_len`-token prompt on `instance`.
///
/// `transfer_from_p_heavy` says whether a P-heavy prefill will hand its KV
/// to another instance for decode; it is off when decodes stay in place.
/// Returns `None` for instances that admit no prefill.
pub fn estimate(
    prompt_len: u32,
    instance: &Instance,
    profile: &CalibrationProfile,
    ttft_slo_ms: f64,
    transfer_from_p_heavy: bool,
) -> Option<FeasibilityEstimate> {
    if !instance.admits_prefill() {
        return None;
    }
    let chunk = instance.chunk_size as u64;
    let batch = instance.running_decode_count();
    let q_ms = profile.estimate_queue_time(instance.queued_remaining(), chunk, batch);
    let e_ms = profile.estimate_prefill_execution(prompt_len as u64, chunk, batch);
    let t_ms = if transfer_from_p_heavy && instance.kind == InstanceKind::PHeavy {
        profile.transfer_time(prompt_len as u64)
    } else {
        0.0
    };
    Some(FeasibilityEstimate {
        instance_id: instance.id,
        q_ms,
        e_ms,
        t_ms,
        feasible: q_ms + e_ms + t_ms < ttft_slo_ms,
    })
}

pub fn estimate_all(
    prompt_len: u32,
    instances: &[Instance],
    profile: &CalibrationProfile,
    ttft_slo_ms: f64,
    transfer_from_p_heavy: bool,
) -> Vec<FeasibilityEstimate> {
    instances
        .iter()
        .filter_map(|i| estimate(prompt_len, i, profile, ttft_slo_ms, transfer_from_p_heavy))
        .collect()
}

/// Picks the feasible instance with the fewest queued prefill tokens (lowest
/// id on ties). `None` when no instance can meet the TTFT SLO.
pub fn schedule_prefill(
    prompt_len: u32,
    instances: &[Instance],
    profile: &CalibrationProfile,
    ttft_slo_ms: f64,
    transfer_from_p_heavy: bool,
) -> Option<InstanceId> {
    instances
        .iter()
        .filter(|i| estimate(prompt_len, i, profile, ttft_slo_ms, transfer_from_p_heavy).is_some_and(|e| e.feasible))
        .min_by_key(|i| i.queued_prefill_tokens())
        .map(|i| i.id)
}

/// Uniform random choice among instances that admit prefill.
pub fn fallback_assign<R: Rng + ?Sized>(instances: &[Instance], rng: &mut R) -> Result<InstanceId, SimError> {
    let eligible: Vec<InstanceId> = instances.iter().filter(|i| i.admits_prefill()).map(|i| i.id).collect();
    if eligible.is_empty() {
        return Err(SimError::NoPrefillInstance);
    }
    Ok(eligible[rng.random_range(0..eligible.len())])
}

/// Cycles over instances that admit prefill, ignoring load.
#[derive(Debug, Clone, Default)]
pub struct RoundRobin {
    next: usize,
}

impl RoundRobin {
    pub fn assign(&mut self, instances: &[Instance]) -> Result<InstanceId, SimError> {
        let eligible: Vec<InstanceId> = instances.iter().filter(|i| i.admits_prefill()).map(|i| i.id).collect();
        if eligible.is_empty() {
            return Err(SimError::NoPrefillInstance);
        }
        let id = eligible[self.next % eligible.len()];
        self.next += 1;
        Ok(id)
    }
}
