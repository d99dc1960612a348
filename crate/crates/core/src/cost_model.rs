//! Analytical execution-time model.
//!
//! Iteration time is affine in the number of piggybacked prefill tokens and
//! in the decode batch size. Prefill execution and queuing estimates are
//! built from that by walking a prompt's chunk decomposition, and KV transfer
//! time is context size divided by link bandwidth.

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Coefficients of the iteration-time and transfer-time model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationProfile {
    /// Iteration time of a decode-only batch of `ref_decode_batch` requests.
    pub base_iter_ms: f64,
    /// Marginal cost of one piggybacked prefill token.
    pub per_prefill_token_ms: f64,
    /// Marginal cost of one decode request beyond `ref_decode_batch`.
    pub per_decode_req_ms: f64,
    pub ref_decode_batch: u32,
    pub kv_bytes_per_token: u64,
    pub link_bandwidth_bytes_per_ms: f64,
}

impl Default for CalibrationProfile {
    fn default() -> Self {
        Self::reference()
    }
}

impl CalibrationProfile {
    /// The shipped default: 44 ms decode-only iterations at batch 16,
    /// 0.2 ms per prefill token, 160 KiB of KV per token over a
    /// 75 MiB/ms link.
    pub const fn reference() -> Self {
        Self {
            base_iter_ms: 44.0,
            per_prefill_token_ms: 0.2,
            per_decode_req_ms: 0.05,
            ref_decode_batch: 16,
            kv_bytes_per_token: 160 * 1024,
            link_bandwidth_bytes_per_ms: 78_643_200.0,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("base_iter_ms", self.base_iter_ms),
            ("per_prefill_token_ms", self.per_prefill_token_ms),
            ("per_decode_req_ms", self.per_decode_req_ms),
            ("link_bandwidth_bytes_per_ms", self.link_bandwidth_bytes_per_ms),
        ];
        for (field, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(ConfigError::field("profile", field, "must be a finite positive number"));
            }
        }
        if self.ref_decode_batch == 0 {
            return Err(ConfigError::field("profile", "ref_decode_batch", "must be positive"));
        }
        if self.kv_bytes_per_token == 0 {
            return Err(ConfigError::field("profile", "kv_bytes_per_token", "must be positive"));
        }
        if self.per_prefill_token_ms > self.base_iter_ms {
            return Err(ConfigError::field(
                "profile",
                "per_prefill_token_ms",
                "must not exceed base_iter_ms",
            ));
        }
        Ok(())
    }

    /// Wall time of one iteration carrying `prefill_tokens` prefill tokens
    /// and `decode_reqs` decode requests. `None` for the empty batch.
    ///
    /// Small decode batches can push the affine form to zero or below; the
    /// result is then floored at the cost of the work actually present,
    /// which keeps it positive and monotone in both arguments.
    pub fn iteration_time(&self, prefill_tokens: u64, decode_reqs: u64) -> Option<f64> {
        if prefill_tokens == 0 && decode_reqs == 0 {
            return None;
        }
        let prefill = self.per_prefill_token_ms * prefill_tokens as f64;
        let affine =
            self.base_iter_ms + prefill + self.per_decode_req_ms * (decode_reqs as f64 - self.ref_decode_batch as f64);
        let floor = self.per_decode_req_ms * decode_reqs as f64 + prefill;
        Some(if affine > floor { affine } else { floor })
    }

    /// Estimated time to prefill a `prompt_len`-token prompt alone on an
    /// instance with the given chunk size, with `assumed_decode_reqs`
    /// decodes riding along in every iteration.
    pub fn estimate_prefill_execution(&self, prompt_len: u64, chunk_size: u64, assumed_decode_reqs: u64) -> f64 {
        assert!(prompt_len >= 1, "prompt_len must be at least one token");
        assert!(chunk_size >= 1, "chunk_size must be at least one token");
        let full_chunks = prompt_len / chunk_size;
        let tail = prompt_len % chunk_size;
        let mut total = 0.0;
        if full_chunks > 0 {
            let full = self
                .iteration_time(chunk_size, assumed_decode_reqs)
                .expect("full chunk is nonempty");
            total += full * full_chunks as f64;
        }
        if tail > 0 {
            total += self
                .iteration_time(tail, assumed_decode_reqs)
                .expect("tail chunk is nonempty");
        }
        total
    }

    /// Sum of prefill execution estimates over a queue of prompt lengths.
    pub fn estimate_queue_time<I>(&self, queued_prompts: I, chunk_size: u64, assumed_decode_reqs: u64) -> f64
    where
        I: IntoIterator<Item = u64>,
    {
        queued_prompts
            .into_iter()
            .map(|len| self.estimate_prefill_execution(len, chunk_size, assumed_decode_reqs))
            .sum()
    }

    /// Time to move the KV cache of `context_tokens` tokens between instances.
    pub fn transfer_time(&self, context_tokens: u64) -> f64 {
        (context_tokens as f64 * self.kv_bytes_per_token as f64) / self.link_bandwidth_bytes_per_ms
    }

    /// Prefill tokens per second one instance sustains on back-to-back
    /// prompts of `prompt_len` tokens with `decode_reqs` decodes in every batch.
    pub fn prefill_throughput(&self, prompt_len: u64, chunk_size: u64, decode_reqs: u64) -> f64 {
        if chunk_size == 0 {
            return 0.0;
        }
        let ms = self.estimate_prefill_execution(prompt_len, chunk_size, decode_reqs);
        prompt_len as f64 * 1000.0 / ms
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig_profile() -> CalibrationProfile {
        CalibrationProfile {
            base_iter_ms: 44.0,
            per_prefill_token_ms: 0.2,
            per_decode_req_ms: 0.05,
            ref_decode_batch: 16,
            ..CalibrationProfile::reference()
        }
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-9
    }

    #[test]
    fn reference_batch_without_prefill_costs_the_intercept() {
        assert!(close(fig_profile().iteration_time(0, 16).unwrap(), 44.0));
    }

    #[test]
    fn full_chunk_iteration() {
        assert!(close(fig_profile().iteration_time(1024, 16).unwrap(), 248.8));
    }

    #[test]
    fn slope_is_per_prefill_token() {
        let p = fig_profile();
        let d = p.iteration_time(1, 16).unwrap() - p.iteration_time(0, 16).unwrap();
        assert!(close(d, 0.2));
    }

    #[test]
    fn empty_batch_is_rejected() {
        assert_eq!(fig_profile().iteration_time(0, 0), None);
    }

    #[test]
    fn small_batches_stay_positive() {
        let p = CalibrationProfile {
            base_iter_ms: 1.0,
            per_decode_req_ms: 0.5,
            ref_decode_batch: 16,
            ..fig_profile()
        };
        // affine form would give 1 + 0.5 * (1 - 16) < 0
        assert!(close(p.iteration_time(0, 1).unwrap(), 0.5));
        assert!(close(p.iteration_time(3, 0).unwrap(), 0.6));
    }

    #[test]
    fn prefill_estimates() {
        let p = fig_profile();
        assert!(close(p.estimate_prefill_execution(2048, 1024, 16), 497.6));
        assert!(close(
            p.estimate_prefill_execution(1, 1024, 16),
            p.iteration_time(1, 16).unwrap()
        ));
        assert!(close(
            p.estimate_prefill_execution(1500, 1024, 16),
            p.iteration_time(1024, 16).unwrap() + p.iteration_time(476, 16).unwrap()
        ));
    }

    #[test]
    fn queue_estimates() {
        let p = fig_profile();
        assert_eq!(p.estimate_queue_time([], 1024, 16), 0.0);
        assert!(close(p.estimate_queue_time([1024], 1024, 16), 248.8));
        assert!(close(p.estimate_queue_time([1024, 512], 1024, 16), 395.2));
    }

    #[test]
    fn transfer_times() {
        let p = CalibrationProfile::reference();
        assert_eq!(p.transfer_time(0), 0.0);
        assert!(close(p.transfer_time(3000), 6.25));
        assert!(close(p.transfer_time(6000), 2.0 * p.transfer_time(3000)));
    }

    #[test]
    fn validation() {
        assert!(CalibrationProfile::reference().validate().is_ok());
        let bad = CalibrationProfile {
            per_prefill_token_ms: 50.0,
            ..CalibrationProfile::reference()
        };
        assert!(bad.validate().is_err());
        let bad = CalibrationProfile {
            base_iter_ms: 0.0,
            ..CalibrationProfile::reference()
        };
        assert!(bad.validate().is_err());
    }
}
