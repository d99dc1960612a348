//! Reference implementations and random state builders shared by the
//! integration tests. The references are deliberately naive: plain loops
//! over the inputs, no sorting and no early exits.

#![allow(dead_code)]

use pdsim_core::cluster::{DecodeSlot, Instance, InstanceKind, PrefillJob};
use pdsim_core::decode_flow::DecodeView;
use pdsim_core::{CalibrationProfile, InstanceId, RequestId};
use rand::Rng;

/// Degrade selection as a literal loop: while usage minus what
/// is already released exceeds the watermark, take the longest remaining
/// decode. Ties on length go to the earlier first token, then the lower id.
/// Stops when every candidate is taken.
pub fn degrade_reference(views: &[DecodeView], m: u64, watermark: u64) -> Vec<RequestId> {
    let mut d: Vec<RequestId> = Vec::new();
    let mut m_release: u64 = 0;
    while m as i128 - m_release as i128 > watermark as i128 {
        let mut best: Option<&DecodeView> = None;
        for r in views {
            if d.contains(&r.id) {
                continue;
            }
            best = match best {
                None => Some(r),
                Some(b) => {
                    let longer = r.current_output_len > b.current_output_len;
                    let tie = r.current_output_len == b.current_output_len;
                    let earlier =
                        r.first_token_ms < b.first_token_ms || (r.first_token_ms == b.first_token_ms && r.id < b.id);
                    if longer || (tie && earlier) {
                        Some(r)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        let Some(r_star) = best else { break };
        d.push(r_star.id);
        m_release += r_star.kv_footprint;
    }
    d
}

/// Backflow selection: every decode whose visible TPOT exceeds alpha * tau.
pub fn backflow_reference(views: &[DecodeView], tau_tpot: f64, alpha: f64) -> Vec<RequestId> {
    let mut o = Vec::new();
    for r in views {
        let produced = r.current_output_len.saturating_sub(1).max(1) as f64;
        let tpot = r.decode_elapsed_ms / produced;
        if tpot > tau_tpot * alpha {
            o.push(r.id);
        }
    }
    o
}

pub fn random_views<R: Rng>(rng: &mut R, n: usize) -> Vec<DecodeView> {
    (0..n)
        .map(|k| {
            let len = rng.random_range(1..40u32);
            DecodeView {
                id: RequestId(k as u32),
                current_output_len: len,
                decode_elapsed_ms: rng.random_range(0.0..(len as f64 * 150.0)),
                kv_footprint: rng.random_range(1..5_000u64),
                // Coarse grid so equal first-token times actually occur.
                first_token_ms: rng.random_range(0..6u32) as f64 * 10.0,
            }
        })
        .collect()
}

/// One instance as the proxy sees it, independent of the real `Instance`.
#[derive(Debug, Clone)]
pub struct ProxyState {
    pub kind: InstanceKind,
    pub chunk: u32,
    pub decodes: u32,
    /// Remaining prefill tokens per queued prompt, head first.
    pub queue: Vec<u32>,
}

impl ProxyState {
    /// Builds a real instance carrying the same proxy-visible state. The
    /// head prompt may be partially prefilled.
    pub fn build(&self, id: u32, partial_head: u32) -> Instance {
        let mut inst = Instance::new(InstanceId(id), self.kind, self.chunk, 10_000_000);
        for (k, &rem) in self.queue.iter().enumerate() {
            let mut job = PrefillJob::new(RequestId(id * 1_000 + k as u32), rem, 4);
            if k == 0 {
                job.prompt_len += partial_head;
            }
            job.remaining = rem;
            inst.enqueue_prefill(job);
        }
        for k in 0..self.decodes {
            let slot = DecodeSlot::after_prefill(RequestId(900_000 + id * 1_000 + k), 50, 100);
            inst.admit_decode(slot);
        }
        inst
    }
}

/// Prefill estimate by walking the prompt chunk by chunk.
pub fn estimate_reference(p: &CalibrationProfile, len: u64, chunk: u64, batch: u64) -> f64 {
    let mut left = len;
    let mut total = 0.0;
    while left > 0 {
        let tokens = left.min(chunk);
        let affine = p.base_iter_ms
            + p.per_prefill_token_ms * tokens as f64
            + p.per_decode_req_ms * (batch as f64 - p.ref_decode_batch as f64);
        let floor = p.per_decode_req_ms * batch as f64 + p.per_prefill_token_ms * tokens as f64;
        total += affine.max(floor);
        left -= tokens;
    }
    total
}

/// Brute-force prefill routing: evaluate every instance, collect the
/// feasible ones, then scan for the fewest queued tokens (first wins).
pub fn route_reference(
    p: &CalibrationProfile,
    states: &[ProxyState],
    prompt_len: u32,
    tau_ttft: f64,
    transfer_from_p_heavy: bool,
) -> Option<u32> {
    let mut feasible = Vec::new();
    for (id, s) in states.iter().enumerate() {
        if s.chunk == 0 {
            continue;
        }
        let (chunk, batch) = (s.chunk as u64, s.decodes as u64);
        let q: f64 = s
            .queue
            .iter()
            .map(|&r| estimate_reference(p, r as u64, chunk, batch))
            .sum();
        let e = estimate_reference(p, prompt_len as u64, chunk, batch);
        let t = if transfer_from_p_heavy && s.kind == InstanceKind::PHeavy {
            prompt_len as f64 * p.kv_bytes_per_token as f64 / p.link_bandwidth_bytes_per_ms
        } else {
            0.0
        };
        if q + e + t < tau_ttft {
            feasible.push(id);
        }
    }
    let mut best: Option<(usize, u64)> = None;
    for id in feasible {
        let tokens: u64 = states[id].queue.iter().map(|&r| r as u64).sum();
        if best.is_none_or(|(_, b)| tokens < b) {
            best = Some((id, tokens));
        }
    }
    best.map(|(id, _)| id as u32)
}

pub fn random_proxy_states<R: Rng>(rng: &mut R) -> Vec<ProxyState> {
    let n = rng.random_range(1..=8usize);
    let mut budget = 20usize;
    (0..n)
        .map(|_| {
            let kind = if rng.random_bool(0.5) {
                InstanceKind::PHeavy
            } else {
                InstanceKind::DHeavy
            };
            let chunk = match kind {
                InstanceKind::PHeavy => [512, 1024, 2048, 4096][rng.random_range(0..4)],
                InstanceKind::DHeavy => [0, 64, 128, 256][rng.random_range(0..4)],
            };
            let depth = rng.random_range(0..=budget.min(6));
            budget -= depth;
            ProxyState {
                kind,
                chunk,
                decodes: rng.random_range(0..48),
                queue: (0..depth).map(|_| rng.random_range(1..6_000)).collect(),
            }
        })
        .collect()
}
