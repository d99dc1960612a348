//! Instance state machines: prefill queues, chunked-prefill batch formation,
//! KV-slot accounting and per-iteration execution.
//!
//! HBM is modelled as a number of KV token slots. A decode request occupies
//! `prompt_len + generated` slots while it is resident in `running`; prefill
//! work and decodes waiting in `pending` hold no slots.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cost_model::CalibrationProfile;
use crate::decode_flow::DecodeView;
use crate::error::ConfigError;
use crate::{InstanceId, RequestId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InstanceKind {
    PHeavy,
    DHeavy,
}

/// The three sliders plus per-instance capacity.
///
/// Instances `0..n_p_heavy` are P-heavy and the remaining `n_d_heavy` are
/// D-heavy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub n_p_heavy: u32,
    pub n_d_heavy: u32,
    /// Prefill chunk budget of P-heavy instances.
    pub s_p_tokens: u32,
    /// Prefill chunk budget of D-heavy instances; zero admits no prefill.
    pub s_d_tokens: u32,
    pub kv_capacity_tokens: u64,
    pub max_context_tokens: u32,
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_p_heavy + self.n_d_heavy == 0 {
            return Err(ConfigError::field(
                "cluster",
                "n_p_heavy",
                "cluster needs at least one instance",
            ));
        }
        if self.max_context_tokens == 0 {
            return Err(ConfigError::field("cluster", "max_context_tokens", "must be positive"));
        }
        if self.s_p_tokens > self.max_context_tokens {
            return Err(ConfigError::field(
                "cluster",
                "s_p_tokens",
                "exceeds max_context_tokens",
            ));
        }
        if self.s_d_tokens > self.max_context_tokens {
            return Err(ConfigError::field(
                "cluster",
                "s_d_tokens",
                "exceeds max_context_tokens",
            ));
        }
        if self.n_p_heavy > 0 && self.s_p_tokens == 0 {
            return Err(ConfigError::field(
                "cluster",
                "s_p_tokens",
                "P-heavy chunk size must be positive",
            ));
        }
        if self.kv_capacity_tokens == 0 {
            return Err(ConfigError::field("cluster", "kv_capacity_tokens", "must be positive"));
        }
        Ok(())
    }

    pub fn instance_count(&self) -> usize {
        (self.n_p_heavy + self.n_d_heavy) as usize
    }

    pub fn build_instances(&self) -> Vec<Instance> {
        let p = (0..self.n_p_heavy).map(|_| (InstanceKind::PHeavy, self.s_p_tokens));
        let d = (0..self.n_d_heavy).map(|_| (InstanceKind::DHeavy, self.s_d_tokens));
        p.chain(d)
            .enumerate()
            .map(|(i, (kind, chunk))| Instance::new(InstanceId(i as u32), kind, chunk, self.kv_capacity_tokens))
            .collect()
    }
}

/// A prompt waiting for (or part-way through) chunked prefill.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefillJob {
    pub id: RequestId,
    pub prompt_len: u32,
    pub remaining: u32,
    pub output_len: u32,
}

impl PrefillJob {
    pub fn new(id: RequestId, prompt_len: u32, output_len: u32) -> Self {
        Self {
            id,
            prompt_len,
            remaining: prompt_len,
            output_len,
        }
    }
}

/// A decode request resident on (or waiting for) an instance.
///
/// `generated` and `first_token_ms` are the true lifecycle values. The
/// `sched_*` counters are what the flowing-decode scheduler sees and are
/// reset on backflow.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeSlot {
    pub id: RequestId,
    pub prompt_len: u32,
    pub output_len: u32,
    pub generated: u32,
    pub first_token_ms: Option<f64>,
    pub sched_output_len: u32,
    pub sched_anchor_ms: f64,
    /// Iterations completed on the current host.
    pub iterations_here: u32,
    /// Prefill tokens co-scheduled with this request's decode iterations.
    pub co_scheduled_prefill: u64,
    pub migrations: u32,
}

impl DecodeSlot {
    /// A request whose prefill just completed; it holds one generated token.
    pub fn after_prefill(id: RequestId, prompt_len: u32, output_len: u32) -> Self {
        Self {
            id,
            prompt_len,
            output_len,
            generated: 1,
            first_token_ms: None,
            sched_output_len: 1,
            sched_anchor_ms: 0.0,
            iterations_here: 0,
            co_scheduled_prefill: 0,
            migrations: 0,
        }
    }

    pub fn footprint(&self) -> u64 {
        self.prompt_len as u64 + self.generated as u64
    }

    pub fn is_done(&self) -> bool {
        self.generated >= self.output_len
    }

    pub fn view(&self, now_ms: f64) -> DecodeView {
        DecodeView {
            id: self.id,
            current_output_len: self.sched_output_len,
            decode_elapsed_ms: now_ms - self.sched_anchor_ms,
            kv_footprint: self.footprint(),
            first_token_ms: self.first_token_ms.unwrap_or(now_ms),
        }
    }

    /// Scheduler-visible restart used on backflow.
    pub fn reset_counters(&mut self, now_ms: f64) {
        self.sched_output_len = 1;
        self.sched_anchor_ms = now_ms;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefillSlice {
    pub id: RequestId,
    pub tokens: u32,
    /// First slice of this prompt.
    pub first: bool,
    /// Last slice of this prompt.
    pub last: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchPlan {
    pub prefill: Vec<PrefillSlice>,
    pub decodes: Vec<RequestId>,
}

impl BatchPlan {
    pub fn prefill_tokens(&self) -> u64 {
        self.prefill.iter().map(|s| s.tokens as u64).sum()
    }

    pub fn decode_reqs(&self) -> u64 {
        self.decodes.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.prefill.is_empty() && self.decodes.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Admitted,
    Queued,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CompletionReport {
    /// Prompts whose final chunk ran in this iteration, in FIFO order.
    pub finished_prefills: Vec<PrefillJob>,
    /// Requests that emitted one decode token.
    pub emitted_tokens: Vec<RequestId>,
    /// Requests that produced their last token; their KV slots are freed.
    pub finished_decodes: Vec<DecodeSlot>,
    pub elapsed_ms: f64,
    pub prefill_tokens: u64,
}

#[derive(Debug, Clone)]
struct InFlight {
    plan: BatchPlan,
    elapsed_ms: f64,
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub id: InstanceId,
    pub kind: InstanceKind,
    pub chunk_size: u32,
    pub kv_capacity: u64,
    kv_used: u64,
    /// KV of requests in transit towards this instance.
    kv_inbound: u64,
    prefill_queue: VecDeque<PrefillJob>,
    running: Vec<DecodeSlot>,
    pending: VecDeque<DecodeSlot>,
    in_flight: Option<InFlight>,
}

impl Instance {
    pub fn new(id: InstanceId, kind: InstanceKind, chunk_size: u32, kv_capacity: u64) -> Self {
        Self {
            id,
            kind,
            chunk_size,
            kv_capacity,
            kv_used: 0,
            kv_inbound: 0,
            prefill_queue: VecDeque::new(),
            running: Vec::new(),
            pending: VecDeque::new(),
            in_flight: None,
        }
    }

    pub fn kv_used(&self) -> u64 {
        self.kv_used
    }

    /// Decode load used for placement: resident KV plus KV in transit here.
    pub fn decode_load(&self) -> u64 {
        self.kv_used + self.kv_inbound
    }

    pub fn admits_prefill(&self) -> bool {
        self.chunk_size > 0
    }

    pub fn is_busy(&self) -> bool {
        self.in_flight.is_some()
    }

    pub fn prefill_queue(&self) -> impl ExactSizeIterator<Item = &PrefillJob> + '_ {
        self.prefill_queue.iter()
    }

    /// Remaining prefill tokens of every queued prompt, head first.
    pub fn queued_remaining(&self) -> impl Iterator<Item = u64> + '_ {
        self.prefill_queue.iter().map(|j| j.remaining as u64)
    }

    pub fn queued_prefill_tokens(&self) -> u64 {
        self.queued_remaining().sum()
    }

    pub fn running(&self) -> &[DecodeSlot] {
        &self.running
    }

    pub fn pending(&self) -> impl ExactSizeIterator<Item = &DecodeSlot> + '_ {
        self.pending.iter()
    }

    pub fn running_decode_count(&self) -> u64 {
        self.running.len() as u64
    }

    pub fn has_runnable_work(&self) -> bool {
        (!self.prefill_queue.is_empty() && self.chunk_size > 0) || !self.running.is_empty()
    }

    pub fn enqueue_prefill(&mut self, job: PrefillJob) {
        self.prefill_queue.push_back(job);
    }

    pub fn reserve_inbound(&mut self, tokens: u64) {
        self.kv_inbound += tokens;
    }

    pub fn release_inbound(&mut self, tokens: u64) {
        self.kv_inbound -= tokens;
    }

    /// Slots left after every resident decode grows by one token.
    fn free_slots(&self) -> u64 {
        self.kv_capacity
            .saturating_sub(self.kv_used + self.running.len() as u64)
    }

    /// A decode fits when its KV plus one token of its own growth fits
    /// beside the residents' next-token growth.
    fn fits(&self, slot: &DecodeSlot) -> bool {
        slot.footprint() < self.free_slots()
    }

    /// Admits a decode into `running` if its KV fits, otherwise appends it
    /// to the decode queue. Nothing jumps ahead of an already queued decode.
    pub fn admit_decode(&mut self, slot: DecodeSlot) -> Admission {
        if self.pending.is_empty() && self.fits(&slot) {
            self.kv_used += slot.footprint();
            self.running.push(slot);
            Admission::Admitted
        } else {
            self.pending.push_back(slot);
            Admission::Queued
        }
    }

    /// Moves decode-queue entries into `running` in FIFO order while the head
    /// fits. Returns the admitted slots' ids.
    pub fn admit_pending(&mut self) -> Vec<RequestId> {
        let mut admitted = Vec::new();
        while let Some(head) = self.pending.front() {
            if !self.fits(head) {
                break;
            }
            let slot = self.pending.pop_front().expect("head exists");
            self.kv_used += slot.footprint();
            admitted.push(slot.id);
            self.running.push(slot);
        }
        admitted
    }

    /// Swaps the most recently admitted decodes back to the head of the
    /// decode queue until every remaining resident can grow by one token.
    /// Their KV leaves the instance's slots; they resume in FIFO order.
    pub fn preempt_for_growth(&mut self) -> Vec<RequestId> {
        let mut preempted = Vec::new();
        while !self.running.is_empty() && self.kv_used + self.running.len() as u64 > self.kv_capacity {
            let slot = self.running.pop().expect("nonempty");
            self.kv_used -= slot.footprint();
            preempted.push(slot.id);
            self.pending.push_front(slot);
        }
        preempted
    }

    pub fn running_mut(&mut self, id: RequestId) -> Option<&mut DecodeSlot> {
        self.running.iter_mut().find(|s| s.id == id)
    }

    /// Removes a resident decode and frees its KV slots.
    pub fn take_running(&mut self, id: RequestId) -> Option<DecodeSlot> {
        let pos = self.running.iter().position(|s| s.id == id)?;
        let slot = self.running.remove(pos);
        self.kv_used -= slot.footprint();
        Some(slot)
    }

    /// Scheduler views of resident decodes that have run at least one
    /// iteration here.
    pub fn settled_views(&self, now_ms: f64) -> Vec<DecodeView> {
        self.running
            .iter()
            .filter(|s| s.iterations_here > 0)
            .map(|s| s.view(now_ms))
            .collect()
    }

    pub fn views(&self, now_ms: f64) -> Vec<DecodeView> {
        self.running.iter().map(|s| s.view(now_ms)).collect()
    }

    /// Plans the next iteration without mutating state.
    ///
    /// Every resident decode rides along; callers run
    /// [`Instance::preempt_for_growth`] first so each has a slot for its next
    /// token. Up to `chunk_size` prefill tokens are
    /// taken from the head of the queue; a chunk may finish one prompt and
    /// start the next.
    pub fn form_batch(&self) -> BatchPlan {
        debug_assert!(self.kv_used + self.running.len() as u64 <= self.kv_capacity);
        let decodes = self.running.iter().map(|s| s.id).collect();

        let mut prefill = Vec::new();
        let mut budget = self.chunk_size;
        for job in &self.prefill_queue {
            if budget == 0 {
                break;
            }
            let tokens = job.remaining.min(budget);
            budget -= tokens;
            prefill.push(PrefillSlice {
                id: job.id,
                tokens,
                first: job.remaining == job.prompt_len,
                last: tokens == job.remaining,
            });
        }
        BatchPlan { prefill, decodes }
    }

    /// Forms and launches the next batch. Returns its wall time, or `None`
    /// when nothing is runnable (the instance goes idle).
    pub fn start_iteration(&mut self, profile: &CalibrationProfile) -> Option<(&BatchPlan, f64)> {
        assert!(self.in_flight.is_none(), "instance {} already running", self.id.0);
        let plan = self.form_batch();
        let elapsed_ms = profile.iteration_time(plan.prefill_tokens(), plan.decode_reqs())?;
        let flight = self.in_flight.insert(InFlight { plan, elapsed_ms });
        Some((&flight.plan, flight.elapsed_ms))
    }

    pub fn in_flight_plan(&self) -> Option<&BatchPlan> {
        self.in_flight.as_ref().map(|f| &f.plan)
    }

    /// Applies the in-flight batch: prefill progress, one token for every
    /// participating decode, and completion of finished decodes.
    pub fn complete_iteration(&mut self) -> CompletionReport {
        let InFlight { plan, elapsed_ms } = self.in_flight.take().expect("no iteration in flight");
        let prefill_tokens = plan.prefill_tokens();
        let mut report = CompletionReport {
            elapsed_ms,
            prefill_tokens,
            ..CompletionReport::default()
        };

        for slice in &plan.prefill {
            let head = self.prefill_queue.front_mut().expect("planned prompt left the queue");
            debug_assert_eq!(head.id, slice.id);
            head.remaining -= slice.tokens;
            if head.remaining == 0 {
                let done = self.prefill_queue.pop_front().expect("head exists");
                report.finished_prefills.push(done);
            }
        }

        for id in &plan.decodes {
            let slot = self
                .running
                .iter_mut()
                .find(|s| s.id == *id)
                .expect("planned decode left the instance");
            slot.generated += 1;
            slot.sched_output_len += 1;
            slot.iterations_here += 1;
            slot.co_scheduled_prefill += prefill_tokens;
            self.kv_used += 1;
            report.emitted_tokens.push(*id);
        }

        let mut i = 0;
        while i < self.running.len() {
            if self.running[i].is_done() {
                let slot = self.running.remove(i);
                self.kv_used -= slot.footprint();
                report.finished_decodes.push(slot);
            } else {
                i += 1;
            }
        }
        report
    }

    /// Recomputes resident KV from scratch; used by invariant checks.
    pub fn resident_kv(&self) -> u64 {
        self.running.iter().map(DecodeSlot::footprint).sum()
    }

    pub fn holds(&self, id: RequestId) -> bool {
        self.prefill_queue.iter().any(|j| j.id == id)
            || self.running.iter().any(|s| s.id == id)
            || self.pending.iter().any(|s| s.id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(chunk: u32, cap: u64) -> Instance {
        Instance::new(InstanceId(0), InstanceKind::PHeavy, chunk, cap)
    }

    fn decoder(id: u32, footprint: u32) -> DecodeSlot {
        let mut s = DecodeSlot::after_prefill(RequestId(id), footprint - 1, 1_000);
        s.first_token_ms = Some(0.0);
        s
    }

    #[test]
    fn chunk_packing_spans_prompt_boundary() {
        let mut i = inst(1024, 1_000_000);
        i.enqueue_prefill(PrefillJob::new(RequestId(100), 1500, 10));
        i.enqueue_prefill(PrefillJob::new(RequestId(101), 2000, 10));
        for n in 0..8 {
            assert_eq!(i.admit_decode(decoder(n, 10)), Admission::Admitted);
        }
        let p = CalibrationProfile::reference();

        let (plan, _) = i.start_iteration(&p).unwrap();
        assert_eq!((plan.prefill_tokens(), plan.decode_reqs()), (1024, 8));
        i.complete_iteration();

        let (plan, _) = i.start_iteration(&p).unwrap();
        assert_eq!(plan.decode_reqs(), 8);
        assert_eq!(
            plan.prefill,
            alloc::vec![
                PrefillSlice {
                    id: RequestId(100),
                    tokens: 476,
                    first: false,
                    last: true
                },
                PrefillSlice {
                    id: RequestId(101),
                    tokens: 548,
                    first: true,
                    last: false
                },
            ]
        );
        let report = i.complete_iteration();
        assert_eq!(report.finished_prefills.len(), 1);
        assert_eq!(report.finished_prefills[0].id, RequestId(100));
        assert_eq!(i.queued_remaining().collect::<Vec<_>>(), alloc::vec![1452]);
    }

    #[test]
    fn zero_chunk_admits_no_prefill() {
        let mut i = Instance::new(InstanceId(3), InstanceKind::DHeavy, 0, 1_000_000);
        i.enqueue_prefill(PrefillJob::new(RequestId(9), 100, 10));
        for n in 0..5 {
            i.admit_decode(decoder(n, 10));
        }
        let plan = i.form_batch();
        assert_eq!((plan.prefill_tokens(), plan.decode_reqs()), (0, 5));
    }

    #[test]
    fn pure_decode_batch() {
        let mut i = inst(512, 1_000_000);
        for n in 0..16 {
            i.admit_decode(decoder(n, 10));
        }
        let plan = i.form_batch();
        assert_eq!((plan.prefill_tokens(), plan.decode_reqs()), (0, 16));
    }

    #[test]
    fn nothing_runnable_gives_empty_plan() {
        let mut i = inst(512, 100);
        assert!(i.form_batch().is_empty());
        assert!(i.start_iteration(&CalibrationProfile::reference()).is_none());
        assert!(!i.is_busy());
    }

    #[test]
    fn admission_arithmetic() {
        let mut i = inst(512, 100_000);
        i.admit_decode(decoder(0, 60_000));
        assert_eq!(i.admit_decode(decoder(1, 30_000)), Admission::Admitted);
        assert_eq!(i.kv_used(), 90_000);

        let mut j = inst(512, 100_000);
        j.admit_decode(decoder(0, 95_000));
        assert_eq!(j.admit_decode(decoder(1, 30_000)), Admission::Queued);
        assert_eq!(j.kv_used(), 95_000);
    }

    #[test]
    fn pending_readmitted_fifo_after_completion() {
        let mut i = inst(512, 100);
        let mut short = decoder(0, 60);
        short.output_len = 2;
        i.admit_decode(short);
        assert_eq!(i.admit_decode(decoder(1, 50)), Admission::Queued);
        assert_eq!(i.admit_decode(decoder(2, 10)), Admission::Queued);
        i.start_iteration(&CalibrationProfile::reference()).unwrap();
        let report = i.complete_iteration();
        assert_eq!(report.finished_decodes.len(), 1);
        assert_eq!(report.finished_decodes[0].footprint(), 61);
        assert_eq!(i.kv_used(), 0);
        assert_eq!(i.admit_pending(), alloc::vec![RequestId(1), RequestId(2)]);
        assert_eq!(i.kv_used(), 60);
    }

    #[test]
    fn fifo_head_blocks_smaller_followers() {
        let mut i = inst(512, 100);
        i.admit_decode(decoder(0, 80));
        i.admit_decode(decoder(1, 50));
        assert_eq!(i.admit_decode(decoder(2, 5)), Admission::Queued);
        assert!(i.admit_pending().is_empty());
    }

    #[test]
    fn output_len_one_never_enters_decode() {
        let mut i = inst(1024, 1_000);
        i.enqueue_prefill(PrefillJob::new(RequestId(0), 1024, 1));
        let (_, elapsed) = i.start_iteration(&CalibrationProfile::reference()).unwrap();
        assert!(elapsed > 0.0);
        let report = i.complete_iteration();
        assert_eq!(report.finished_prefills[0].output_len, 1);
        assert!(report.emitted_tokens.is_empty());
    }

    #[test]
    fn iteration_elapsed_follows_cost_model() {
        let mut i = inst(1024, 1_000_000);
        i.enqueue_prefill(PrefillJob::new(RequestId(99), 4096, 10));
        for n in 0..16 {
            i.admit_decode(decoder(n, 10));
        }
        let (_, elapsed) = i.start_iteration(&CalibrationProfile::reference()).unwrap();
        assert!((elapsed - 248.8).abs() < 1e-9);
    }

    #[test]
    fn kv_growth_and_release_conserve() {
        let mut i = inst(0, 1_000);
        let mut a = decoder(0, 100);
        a.output_len = 3;
        i.admit_decode(a);
        i.admit_decode(decoder(1, 200));
        let p = CalibrationProfile::reference();
        for _ in 0..2 {
            i.start_iteration(&p).unwrap();
            i.complete_iteration();
            assert_eq!(i.kv_used(), i.resident_kv());
        }
        assert_eq!(i.running().len(), 1);
        assert_eq!(i.kv_used(), 202);
    }

    #[test]
    fn full_instance_preempts_newest_decode() {
        let mut i = inst(0, 25);
        i.admit_decode(decoder(0, 10));
        i.admit_decode(decoder(1, 10));
        i.admit_decode(decoder(2, 2));
        assert_eq!(i.admit_decode(decoder(3, 20)), Admission::Queued);
        let p = CalibrationProfile::reference();
        i.start_iteration(&p).unwrap();
        i.complete_iteration();
        assert_eq!(i.kv_used(), 25);
        assert_eq!(i.preempt_for_growth(), alloc::vec![RequestId(2)]);
        assert_eq!(i.kv_used(), 22);
        let queued: alloc::vec::Vec<_> = i.pending().map(|s| s.id).collect();
        assert_eq!(queued, alloc::vec![RequestId(2), RequestId(3)]);
        assert_eq!(i.form_batch().decodes, alloc::vec![RequestId(0), RequestId(1)]);
    }

    #[test]
    fn admission_respects_in_flight_growth() {
        let mut i = inst(0, 20);
        i.admit_decode(decoder(0, 10));
        i.start_iteration(&CalibrationProfile::reference()).unwrap();
        assert_eq!(i.admit_decode(decoder(1, 10)), Admission::Queued);
        i.complete_iteration();
        assert!(i.kv_used() <= i.kv_capacity);
    }

    #[test]
    fn cluster_layout() {
        let cfg = ClusterConfig {
            n_p_heavy: 2,
            n_d_heavy: 3,
            s_p_tokens: 1024,
            s_d_tokens: 256,
            kv_capacity_tokens: 1000,
            max_context_tokens: 4096,
        };
        cfg.validate().unwrap();
        let instances = cfg.build_instances();
        assert_eq!(instances.len(), 5);
        assert_eq!(instances[1].kind, InstanceKind::PHeavy);
        assert_eq!(instances[2].kind, InstanceKind::DHeavy);
        assert_eq!(instances[4].chunk_size, 256);
        assert_eq!(instances[4].id, InstanceId(4));

        let bad = ClusterConfig {
            s_p_tokens: 8192,
            ..cfg
        };
        assert!(bad.validate().is_err());
        let empty = ClusterConfig {
            n_p_heavy: 0,
            n_d_heavy: 0,
            ..cfg
        };
        assert!(empty.validate().is_err());
    }
}
