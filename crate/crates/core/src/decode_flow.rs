//! Flowing decode scheduling.
//!
//! Decodes start on the least-loaded D-heavy instance. When a D-heavy
//! instance climbs above the memory watermark, its longest-running decodes
//! are degraded onto P-heavy instances. A degraded decode whose
//! scheduler-visible TPOT approaches the SLO flows back to a D-heavy
//! instance with its counters reset.

use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::cluster::{Instance, InstanceKind};
use crate::error::ConfigError;
use crate::{InstanceId, RequestId};

/// What the decode scheduler sees of one resident request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeView {
    pub id: RequestId,
    /// Tokens produced since the first token or the last backflow reset.
    pub current_output_len: u32,
    pub decode_elapsed_ms: f64,
    pub kv_footprint: u64,
    /// True first-token time, used only to break length ties.
    pub first_token_ms: f64,
}

impl DecodeView {
    pub fn current_tpot_ms(&self) -> f64 {
        let gaps = self.current_output_len.saturating_sub(1).max(1);
        self.decode_elapsed_ms / gaps as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowPolicy {
    /// KV usage fraction above which D-heavy instances degrade decodes.
    pub watermark_m: f64,
    /// Backflow fires once scheduler-visible TPOT exceeds `alpha * tpot_slo`.
    pub approach_factor_alpha: f64,
}

impl Default for FlowPolicy {
    fn default() -> Self {
        Self {
            watermark_m: 0.95,
            approach_factor_alpha: 0.96,
        }
    }
}

impl FlowPolicy {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.watermark_m > 0.0 && self.watermark_m < 1.0) {
            return Err(ConfigError::field("policy", "watermark_m", "must lie in (0, 1)"));
        }
        if !(self.approach_factor_alpha > 0.0 && self.approach_factor_alpha < 1.0) {
            return Err(ConfigError::field(
                "policy",
                "approach_factor_alpha",
                "must lie in (0, 1)",
            ));
        }
        Ok(())
    }

    /// Watermark expressed in KV token slots.
    ///
    /// The product is nudged up before truncation so that e.g. 0.95 of
    /// 100 000 slots is 95 000 rather than 94 999.
    pub fn watermark_tokens(&self, kv_capacity: u64) -> u64 {
        (self.watermark_m * kv_capacity as f64 + 1e-6) as u64
    }

    pub fn backflow_threshold_ms(&self, tpot_slo_ms: f64) -> f64 {
        tpot_slo_ms * self.approach_factor_alpha
    }
}

/// Order for longest-first selection: longest current output, then earliest
/// first token, then lowest id.
fn longer_first(a: &DecodeView, b: &DecodeView) -> Ordering {
    b.current_output_len
        .cmp(&a.current_output_len)
        .then(a.first_token_ms.total_cmp(&b.first_token_ms))
        .then(a.id.cmp(&b.id))
}

/// Decodes to degrade off a D-heavy instance, in selection order.
///
/// Takes the longest decodes until the KV they release brings usage down to
/// the watermark. Stops early if the candidates run out.
pub fn select_degrade(
    candidates: &[DecodeView],
    kv_used: u64,
    kv_capacity: u64,
    policy: &FlowPolicy,
) -> Vec<RequestId> {
    let watermark = policy.watermark_tokens(kv_capacity);
    if kv_used <= watermark {
        return Vec::new();
    }
    let mut order: Vec<&DecodeView> = candidates.iter().collect();
    order.sort_by(|a, b| longer_first(a, b));

    let mut released = 0u64;
    let mut chosen = Vec::new();
    for view in order {
        if kv_used.saturating_sub(released) <= watermark {
            break;
        }
        released += view.kv_footprint;
        chosen.push(view.id);
    }
    chosen
}

/// Decodes on a P-heavy instance whose scheduler-visible TPOT is past the
/// approach threshold.
pub fn select_backflow(views: &[DecodeView], tpot_slo_ms: f64, policy: &FlowPolicy) -> Vec<RequestId> {
    let threshold = policy.backflow_threshold_ms(tpot_slo_ms);
    views
        .iter()
        .filter(|v| v.current_tpot_ms() > threshold)
        .map(|v| v.id)
        .collect()
}

/// Where a freshly prefilled request starts decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    InPlace(InstanceId),
    Transfer(InstanceId),
}

impl Placement {
    pub fn instance(self) -> InstanceId {
        match self {
            Placement::InPlace(i) | Placement::Transfer(i) => i,
        }
    }
}

fn least_loaded<'a>(instances: impl Iterator<Item = &'a Instance>) -> Option<&'a Instance> {
    // min_by_key keeps the first minimum, so ties go to the lowest id
    instances.min_by_key(|i| i.decode_load())
}

/// Low-interference decode init: stay in place after a D-heavy prefill,
/// otherwise go to the D-heavy instance with the least decode load. With no
/// D-heavy instance the decode stays where it was prefilled.
pub fn place_initial_decode(prefill_on: InstanceId, instances: &[Instance]) -> Placement {
    let host = &instances[prefill_on.index()];
    if host.kind == InstanceKind::DHeavy {
        return Placement::InPlace(prefill_on);
    }
    match least_loaded(instances.iter().filter(|i| i.kind == InstanceKind::DHeavy)) {
        Some(target) => Placement::Transfer(target.id),
        None => Placement::InPlace(prefill_on),
    }
}

/// P-heavy instance with the least decode load, for degraded decodes.
pub fn degrade_destination(instances: &[Instance]) -> Option<InstanceId> {
    least_loaded(instances.iter().filter(|i| i.kind == InstanceKind::PHeavy)).map(|i| i.id)
}

/// D-heavy instance with the least decode load, provided it can take
/// `footprint` more KV slots. `None` leaves the request where it is.
pub fn backflow_destination(instances: &[Instance], footprint: u64) -> Option<InstanceId> {
    least_loaded(instances.iter().filter(|i| i.kind == InstanceKind::DHeavy))
        .filter(|i| i.decode_load() + footprint <= i.kv_capacity)
        .map(|i| i.id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::DecodeSlot;
    use alloc::vec;

    fn view(id: u32, len: u32, footprint: u64, first: f64) -> DecodeView {
        DecodeView {
            id: RequestId(id),
            current_output_len: len,
            decode_elapsed_ms: 0.0,
            kv_footprint: footprint,
            first_token_ms: first,
        }
    }

    fn tpot_view(id: u32, tpot: f64) -> DecodeView {
        DecodeView {
            id: RequestId(id),
            current_output_len: 101,
            decode_elapsed_ms: tpot * 100.0,
            kv_footprint: 1,
            first_token_ms: 0.0,
        }
    }

    #[test]
    fn degrade_longest_until_watermark() {
        let views = [
            view(0, 400, 3_000, 0.0),
            view(1, 100, 2_000, 0.0),
            view(2, 50, 1_000, 0.0),
        ];
        let chosen = select_degrade(&views, 98_000, 100_000, &FlowPolicy::default());
        assert_eq!(chosen, vec![RequestId(0)]);
    }

    #[test]
    fn degrade_at_watermark_is_empty() {
        let views = [view(0, 400, 3_000, 0.0)];
        assert!(select_degrade(&views, 95_000, 100_000, &FlowPolicy::default()).is_empty());
    }

    #[test]
    fn degrade_ties_prefer_earlier_first_token() {
        let views = [
            view(5, 200, 3_000, 20.0),
            view(7, 200, 3_000, 10.0),
            view(1, 10, 3_000, 0.0),
        ];
        let chosen = select_degrade(&views, 97_000, 100_000, &FlowPolicy::default());
        assert_eq!(chosen, vec![RequestId(7)]);
    }

    #[test]
    fn degrade_may_take_a_lone_request() {
        let views = [view(0, 3, 99_000, 0.0)];
        assert_eq!(
            select_degrade(&views, 99_000, 100_000, &FlowPolicy::default()),
            vec![RequestId(0)]
        );
    }

    #[test]
    fn degrade_stops_when_candidates_run_out() {
        let views = [view(0, 3, 100, 0.0)];
        assert_eq!(
            select_degrade(&views, 99_000, 100_000, &FlowPolicy::default()),
            vec![RequestId(0)]
        );
    }

    #[test]
    fn backflow_threshold_filter() {
        let views = [tpot_view(0, 97.0), tpot_view(1, 95.0), tpot_view(2, 96.1)];
        let chosen = select_backflow(&views, 100.0, &FlowPolicy::default());
        assert_eq!(chosen, vec![RequestId(0), RequestId(2)]);
    }

    #[test]
    fn backflow_boundary_is_strict() {
        let views = [tpot_view(0, 96.0)];
        assert!(select_backflow(&views, 100.0, &FlowPolicy::default()).is_empty());
        assert!(select_backflow(&[], 100.0, &FlowPolicy::default()).is_empty());
    }

    #[test]
    fn tpot_of_fresh_request_uses_single_gap() {
        let v = DecodeView {
            current_output_len: 1,
            decode_elapsed_ms: 30.0,
            ..view(0, 1, 1, 0.0)
        };
        assert_eq!(v.current_tpot_ms(), 30.0);
    }

    #[test]
    fn reset_restarts_visible_tpot() {
        let mut slot = DecodeSlot::after_prefill(RequestId(0), 100, 500);
        slot.first_token_ms = Some(0.0);
        slot.sched_output_len = 51;
        assert!((slot.view(4_800.0).current_tpot_ms() - 96.0).abs() < 1e-12);
        slot.reset_counters(4_800.0);
        let v = slot.view(4_800.0);
        assert_eq!(v.current_output_len, 1);
        assert_eq!(v.current_tpot_ms(), 0.0);
        assert_eq!(slot.first_token_ms, Some(0.0));
    }

    fn cluster(kinds: &[(InstanceKind, u64)]) -> Vec<Instance> {
        kinds
            .iter()
            .enumerate()
            .map(|(i, (k, used))| {
                let mut inst = Instance::new(InstanceId(i as u32), *k, 256, 100_000);
                if *used > 0 {
                    let slot = DecodeSlot::after_prefill(RequestId(1_000 + i as u32), *used as u32 - 1, 10);
                    inst.admit_decode(slot);
                }
                inst
            })
            .collect()
    }

    #[test]
    fn initial_placement() {
        use InstanceKind::*;
        let c = cluster(&[(PHeavy, 0), (DHeavy, 80_000), (DHeavy, 60_000), (DHeavy, 90_000)]);
        assert_eq!(
            place_initial_decode(InstanceId(3), &c),
            Placement::InPlace(InstanceId(3))
        );
        assert_eq!(
            place_initial_decode(InstanceId(0), &c),
            Placement::Transfer(InstanceId(2))
        );

        let agg = cluster(&[(PHeavy, 0), (PHeavy, 0)]);
        assert_eq!(
            place_initial_decode(InstanceId(1), &agg),
            Placement::InPlace(InstanceId(1))
        );
    }

    #[test]
    fn destinations() {
        use InstanceKind::*;
        let c = cluster(&[(PHeavy, 500), (PHeavy, 200), (DHeavy, 96_000), (DHeavy, 97_000)]);
        assert_eq!(degrade_destination(&c), Some(InstanceId(1)));
        assert_eq!(backflow_destination(&c, 3_000), Some(InstanceId(2)));
        assert_eq!(backflow_destination(&c, 5_000), None);
    }
}
