//! Deterministic discrete-event loop.
//!
//! Each instance runs its own iteration clock; an iteration is scheduled
//! when the instance has runnable work and completes `iteration_time` later.
//! Events at the same timestamp are ordered KV transfer completions first,
//! then arrivals, then iteration completions, then by insertion sequence.

use alloc::collections::BinaryHeap;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{Admission, ClusterConfig, DecodeSlot, Instance, InstanceKind, PrefillJob};
use crate::cost_model::CalibrationProfile;
use crate::decode_flow::{self, FlowPolicy, Placement};
use crate::error::{ConfigError, SimError, StuckRequest};
use crate::metrics::{self, MetricsReport, Migration, MigrationReason, RequestLifecycle, SloConfig};
use crate::proxy::{self, RoundRobin};
use crate::workload::Arrival;
use crate::{InstanceId, RequestId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Every instance prefills with the same chunk and decodes in place.
    Aggregation,
    /// P-heavy instances only prefill, D-heavy instances (chunk 0) only decode.
    Disaggregation,
    /// Differentiated chunks with flowing decode.
    Hybrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefillRouting {
    #[default]
    LengthAware,
    RoundRobin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub mode: Mode,
    pub cluster: ClusterConfig,
    pub slo: SloConfig,
    pub policy: FlowPolicy,
    pub profile: CalibrationProfile,
    pub routing: PrefillRouting,
    /// Hybrid only. When off, decodes stay on their prefill instance and
    /// never migrate.
    pub flowing_decode: bool,
    /// Drop requests no instance can prefill within the TTFT SLO instead of
    /// assigning them at random.
    pub early_reject: bool,
    /// Seed of the fallback-routing generator.
    pub seed: u64,
    pub record_events: bool,
    pub record_token_times: bool,
    /// Verify cluster invariants after every event and panic on violation.
    /// Costs a pass over all resident requests per event.
    #[serde(default)]
    pub check_invariants: bool,
}

impl SimConfig {
    pub fn new(mode: Mode, cluster: ClusterConfig, slo: SloConfig, profile: CalibrationProfile) -> Self {
        Self {
            mode,
            cluster,
            slo,
            policy: FlowPolicy::default(),
            profile,
            routing: PrefillRouting::LengthAware,
            flowing_decode: true,
            early_reject: false,
            seed: 0,
            record_events: false,
            record_token_times: false,
            check_invariants: false,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.cluster.validate()?;
        self.slo.validate()?;
        self.policy.validate()?;
        self.profile.validate()?;
        let c = &self.cluster;
        match self.mode {
            Mode::Aggregation => {
                if c.n_d_heavy > 0 && c.s_d_tokens != c.s_p_tokens {
                    return Err(ConfigError::field(
                        "cluster",
                        "s_d_tokens",
                        "aggregation requires s_d_tokens = s_p_tokens",
                    ));
                }
                if c.s_p_tokens == 0 {
                    return Err(ConfigError::field(
                        "cluster",
                        "s_p_tokens",
                        "aggregation requires a positive chunk size",
                    ));
                }
            }
            Mode::Disaggregation => {
                if c.s_d_tokens != 0 {
                    return Err(ConfigError::field(
                        "cluster",
                        "s_d_tokens",
                        "disaggregation requires s_d_tokens = 0",
                    ));
                }
                if c.n_p_heavy == 0 {
                    return Err(ConfigError::field(
                        "cluster",
                        "n_p_heavy",
                        "disaggregation needs a prefill instance",
                    ));
                }
                if c.n_d_heavy == 0 {
                    return Err(ConfigError::field(
                        "cluster",
                        "n_d_heavy",
                        "disaggregation needs a decode instance",
                    ));
                }
            }
            Mode::Hybrid => {
                let p_prefills = c.n_p_heavy > 0 && c.s_p_tokens > 0;
                let d_prefills = c.n_d_heavy > 0 && c.s_d_tokens > 0;
                if !p_prefills && !d_prefills {
                    return Err(ConfigError::field("cluster", "n_p_heavy", "no instance admits prefill"));
                }
            }
        }
        Ok(())
    }

    /// Decodes leave P-heavy instances for the least-loaded D-heavy one.
    fn decodes_on_d_heavy(&self) -> bool {
        match self.mode {
            Mode::Aggregation => false,
            Mode::Disaggregation => true,
            Mode::Hybrid => self.flowing_decode,
        }
    }

    fn migrates(&self) -> bool {
        self.mode == Mode::Hybrid && self.flowing_decode
    }
}

/// Modeled prefill tokens per second of the whole cluster on back-to-back
/// `prompt_len`-token prompts, with `decode_batch` decodes piggybacked on
/// every instance that also decodes.
pub fn prefill_capacity(cfg: &SimConfig, prompt_len: u64, decode_batch: u64) -> f64 {
    cfg.cluster
        .build_instances()
        .iter()
        .filter(|i| i.admits_prefill())
        .map(|i| {
            let prefill_only = cfg.mode == Mode::Disaggregation && i.kind == InstanceKind::PHeavy;
            let batch = if prefill_only { 0 } else { decode_batch };
            cfg.profile.prefill_throughput(prompt_len, i.chunk_size as u64, batch)
        })
        .sum()
}

/// One entry of the optional trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Arrival {
        time_ms: f64,
        request: RequestId,
    },
    Assign {
        time_ms: f64,
        request: RequestId,
        instance: InstanceId,
        fallback: bool,
    },
    Reject {
        time_ms: f64,
        request: RequestId,
    },
    Iteration {
        start_ms: f64,
        end_ms: f64,
        instance: InstanceId,
        prefill_tokens: u64,
        decodes: Vec<RequestId>,
    },
    PrefillDone {
        time_ms: f64,
        request: RequestId,
        instance: InstanceId,
    },
    TransferStart {
        time_ms: f64,
        request: RequestId,
        from: InstanceId,
        to: InstanceId,
        reason: MigrationReason,
    },
    TransferDone {
        time_ms: f64,
        request: RequestId,
        instance: InstanceId,
    },
    DecodeQueued {
        time_ms: f64,
        request: RequestId,
        instance: InstanceId,
    },
    /// KV ran out; the decode went back to the head of the decode queue.
    Preempt {
        time_ms: f64,
        request: RequestId,
        instance: InstanceId,
    },
    FirstToken {
        time_ms: f64,
        request: RequestId,
        instance: InstanceId,
    },
    Complete {
        time_ms: f64,
        request: RequestId,
        instance: InstanceId,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub lifecycles: Vec<RequestLifecycle>,
    /// Empty unless `record_events` is set.
    pub events: Vec<TraceEvent>,
}

pub fn run(cfg: &SimConfig, arrivals: &[Arrival]) -> Result<RunOutput, SimError> {
    cfg.validate()?;
    if arrivals.is_empty() {
        return Err(SimError::EmptyWorkload);
    }
    let mut engine = Engine::new(cfg, arrivals);
    engine.run()?;
    let report = metrics::summarize(&engine.lifecycles, &cfg.slo);
    Ok(RunOutput {
        report,
        lifecycles: engine.lifecycles,
        events: engine.events,
    })
}

#[derive(Debug)]
enum EventKind {
    TransferComplete {
        slot: DecodeSlot,
        to: InstanceId,
        reason: MigrationReason,
    },
    Arrival(usize),
    IterationComplete(InstanceId),
}

impl EventKind {
    fn rank(&self) -> u8 {
        match self {
            EventKind::TransferComplete { .. } => 0,
            EventKind::Arrival(_) => 1,
            EventKind::IterationComplete(_) => 2,
        }
    }
}

#[derive(Debug)]
struct Scheduled {
    time_ms: f64,
    seq: u64,
    kind: EventKind,
}

impl Scheduled {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.time_ms
            .total_cmp(&other.time_ms)
            .then(self.kind.rank().cmp(&other.kind.rank()))
            .then(self.seq.cmp(&other.seq))
    }
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.key_cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (time, rank, seq)
        other.key_cmp(self)
    }
}

struct Engine<'a> {
    cfg: &'a SimConfig,
    arrivals: &'a [Arrival],
    instances: Vec<Instance>,
    lifecycles: Vec<RequestLifecycle>,
    /// `co_scheduled_prefill` value at each request's last migration.
    segment_base: Vec<u64>,
    queue: BinaryHeap<Scheduled>,
    seq: u64,
    now: f64,
    rng: ChaCha8Rng,
    round_robin: RoundRobin,
    unfinished: usize,
    events: Vec<TraceEvent>,
    iteration_start: Vec<f64>,
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a SimConfig, arrivals: &'a [Arrival]) -> Self {
        let instances = cfg.cluster.build_instances();
        let n = instances.len();
        Self {
            cfg,
            arrivals,
            instances,
            lifecycles: Vec::with_capacity(arrivals.len()),
            segment_base: Vec::with_capacity(arrivals.len()),
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            round_robin: RoundRobin::default(),
            unfinished: 0,
            events: Vec::new(),
            iteration_start: alloc::vec![0.0; n],
        }
    }

    fn push(&mut self, time_ms: f64, kind: EventKind) {
        self.seq += 1;
        self.queue.push(Scheduled {
            time_ms,
            seq: self.seq,
            kind,
        });
    }

    fn trace(&mut self, event: impl FnOnce() -> TraceEvent) {
        if self.cfg.record_events {
            self.events.push(event());
        }
    }

    fn run(&mut self) -> Result<(), SimError> {
        self.push(self.arrivals[0].arrival_time_ms, EventKind::Arrival(0));
        while let Some(ev) = self.queue.pop() {
            debug_assert!(ev.time_ms >= self.now);
            self.now = ev.time_ms;
            match ev.kind {
                EventKind::Arrival(k) => self.on_arrival(k)?,
                EventKind::IterationComplete(i) => self.on_iteration_complete(i),
                EventKind::TransferComplete { slot, to, reason } => self.on_transfer_complete(slot, to, reason),
            }
            if self.cfg.check_invariants {
                self.check_invariants();
            }
        }
        if self.unfinished > 0 {
            return Err(self.deadlock());
        }
        Ok(())
    }

    /// KV conservation and bounds, single residency, and work conservation.
    fn check_invariants(&self) {
        let mut seen = alloc::vec![false; self.lifecycles.len()];
        let mut mark = |id: RequestId, at: InstanceId| {
            assert!(
                !seen[id.index()],
                "t={}: request {} resident twice (instance {})",
                self.now,
                id.0,
                at.0
            );
            seen[id.index()] = true;
        };
        for inst in &self.instances {
            assert_eq!(
                inst.kv_used(),
                inst.resident_kv(),
                "t={}: KV drift on instance {}",
                self.now,
                inst.id.0
            );
            assert!(
                inst.kv_used() <= inst.kv_capacity,
                "t={}: instance {} over capacity",
                self.now,
                inst.id.0
            );
            assert!(
                inst.is_busy() || !inst.has_runnable_work(),
                "t={}: instance {} idle with runnable work",
                self.now,
                inst.id.0
            );
            inst.prefill_queue().for_each(|j| mark(j.id, inst.id));
            inst.running().iter().for_each(|s| mark(s.id, inst.id));
            inst.pending().for_each(|s| mark(s.id, inst.id));
        }
    }

    fn deadlock(&self) -> SimError {
        let mut stuck = Vec::new();
        for lc in self.lifecycles.iter().filter(|lc| !lc.is_complete() && !lc.rejected) {
            if stuck.len() == 8 {
                break;
            }
            let mut entry = StuckRequest {
                id: lc.id,
                phase: "unknown",
                instance: None,
            };
            for inst in &self.instances {
                if inst.prefill_queue().any(|j| j.id == lc.id) {
                    entry.phase = "prefill_queue";
                } else if inst.pending().any(|s| s.id == lc.id) {
                    entry.phase = "decode_queue";
                } else if inst.running().iter().any(|s| s.id == lc.id) {
                    entry.phase = "running_without_kv_growth";
                } else {
                    continue;
                }
                entry.instance = Some(inst.id.0);
            }
            stuck.push(entry);
        }
        SimError::Deadlock {
            time_ms: self.now,
            unfinished: self.unfinished,
            stuck,
        }
    }

    fn on_arrival(&mut self, k: usize) -> Result<(), SimError> {
        if let Some(next) = self.arrivals.get(k + 1) {
            self.push(next.arrival_time_ms, EventKind::Arrival(k + 1));
        }
        let arrival = self.arrivals[k];
        let id = RequestId(k as u32);
        let rec = arrival.record;
        self.lifecycles
            .push(RequestLifecycle::new(id, rec.prompt_len, rec.output_len, self.now));
        self.segment_base.push(0);
        self.unfinished += 1;
        let now = self.now;
        self.trace(|| TraceEvent::Arrival {
            time_ms: now,
            request: id,
        });

        let mut fallback = false;
        let target = match self.cfg.routing {
            PrefillRouting::RoundRobin => self.round_robin.assign(&self.instances)?,
            PrefillRouting::LengthAware => {
                let chosen = proxy::schedule_prefill(
                    rec.prompt_len,
                    &self.instances,
                    &self.cfg.profile,
                    self.cfg.slo.ttft_ms,
                    self.cfg.decodes_on_d_heavy(),
                );
                match chosen {
                    Some(i) => i,
                    None if self.cfg.early_reject => {
                        self.lifecycles[k].rejected = true;
                        self.unfinished -= 1;
                        self.trace(|| TraceEvent::Reject {
                            time_ms: now,
                            request: id,
                        });
                        return Ok(());
                    }
                    None => {
                        fallback = true;
                        proxy::fallback_assign(&self.instances, &mut self.rng)?
                    }
                }
            }
        };

        let lc = &mut self.lifecycles[k];
        lc.prefill_instance = Some(target);
        lc.prefill_assign_ms = Some(now);
        lc.fallback_routed = fallback;
        self.trace(|| TraceEvent::Assign {
            time_ms: now,
            request: id,
            instance: target,
            fallback,
        });
        self.instances[target.index()].enqueue_prefill(PrefillJob::new(id, rec.prompt_len, rec.output_len));
        self.kick(target);
        Ok(())
    }

    /// Starts an iteration on an idle instance.
    fn kick(&mut self, i: InstanceId) {
        if !self.instances[i.index()].is_busy() {
            self.start_iteration(i);
        }
    }

    fn start_iteration(&mut self, i: InstanceId) {
        if self.cfg.migrates() {
            self.flow_step(i);
        }
        let now = self.now;
        for id in self.instances[i.index()].preempt_for_growth() {
            self.lifecycles[id.index()].preemptions += 1;
            self.trace(|| TraceEvent::Preempt {
                time_ms: now,
                request: id,
                instance: i,
            });
        }
        let Some((plan, elapsed)) = self.instances[i.index()].start_iteration(&self.cfg.profile) else {
            return;
        };
        for slice in plan.prefill.iter().filter(|s| s.first) {
            self.lifecycles[slice.id.index()].prefill_start_ms = Some(now);
        }
        self.iteration_start[i.index()] = now;
        self.push(now + elapsed, EventKind::IterationComplete(i));
    }

    /// Runs the decode selection for one instance at the start of its
    /// iteration and launches the resulting migrations.
    fn flow_step(&mut self, i: InstanceId) {
        let now = self.now;
        let inst = &self.instances[i.index()];
        match inst.kind {
            InstanceKind::PHeavy => {
                let views = inst.views(now);
                let chosen = decode_flow::select_backflow(&views, self.cfg.slo.tpot_ms, &self.cfg.policy);
                for id in chosen {
                    let footprint = views
                        .iter()
                        .find(|v| v.id == id)
                        .expect("selected from views")
                        .kv_footprint;
                    if let Some(to) = decode_flow::backflow_destination(&self.instances, footprint) {
                        self.migrate(id, i, to, MigrationReason::Backflow);
                    }
                }
            }
            InstanceKind::DHeavy => {
                if decode_flow::degrade_destination(&self.instances).is_none() {
                    return;
                }
                let views = inst.settled_views(now);
                let chosen = decode_flow::select_degrade(&views, inst.kv_used(), inst.kv_capacity, &self.cfg.policy);
                for id in chosen {
                    let to = decode_flow::degrade_destination(&self.instances).expect("checked above");
                    self.migrate(id, i, to, MigrationReason::Degrade);
                }
            }
        }
        self.admit_pending(i);
    }

    fn migrate(&mut self, id: RequestId, from: InstanceId, to: InstanceId, reason: MigrationReason) {
        let now = self.now;
        let mut slot = self.instances[from.index()]
            .take_running(id)
            .expect("migrating a resident decode");
        if reason == MigrationReason::Backflow {
            slot.reset_counters(now);
        }
        slot.iterations_here = 0;
        slot.migrations += 1;
        let base = &mut self.segment_base[id.index()];
        let segment = slot.co_scheduled_prefill - *base;
        *base = slot.co_scheduled_prefill;
        self.lifecycles[id.index()].migrations.push(Migration {
            time_ms: now,
            from,
            to,
            reason,
            segment_prefill_tokens: segment,
        });
        self.send(slot, from, to, reason, None);
    }

    fn send(
        &mut self,
        slot: DecodeSlot,
        from: InstanceId,
        to: InstanceId,
        reason: MigrationReason,
        tokens: Option<u64>,
    ) {
        let now = self.now;
        let id = slot.id;
        let footprint = slot.footprint();
        let moved = tokens.unwrap_or(footprint);
        self.instances[to.index()].reserve_inbound(footprint);
        self.trace(|| TraceEvent::TransferStart {
            time_ms: now,
            request: id,
            from,
            to,
            reason,
        });
        let done = now + self.cfg.profile.transfer_time(moved);
        self.push(done, EventKind::TransferComplete { slot, to, reason });
    }

    fn on_transfer_complete(&mut self, slot: DecodeSlot, to: InstanceId, reason: MigrationReason) {
        let now = self.now;
        let id = slot.id;
        self.instances[to.index()].release_inbound(slot.footprint());
        self.trace(|| TraceEvent::TransferDone {
            time_ms: now,
            request: id,
            instance: to,
        });
        if reason == MigrationReason::Init {
            self.lifecycles[id.index()].decode_ready_ms = Some(now);
        }
        self.place(slot, to);
        self.kick(to);
    }

    /// Admits a decode on `to`, emitting its first token if it gets in.
    fn place(&mut self, slot: DecodeSlot, to: InstanceId) {
        let id = slot.id;
        match self.instances[to.index()].admit_decode(slot) {
            Admission::Admitted => self.on_admitted(id, to),
            Admission::Queued => {
                let now = self.now;
                self.trace(|| TraceEvent::DecodeQueued {
                    time_ms: now,
                    request: id,
                    instance: to,
                });
            }
        }
    }

    fn admit_pending(&mut self, i: InstanceId) {
        for id in self.instances[i.index()].admit_pending() {
            self.on_admitted(id, i);
        }
    }

    fn on_admitted(&mut self, id: RequestId, at: InstanceId) {
        let now = self.now;
        let slot = self.instances[at.index()].running_mut(id).expect("just admitted");
        if slot.first_token_ms.is_some() {
            return;
        }
        slot.first_token_ms = Some(now);
        slot.sched_anchor_ms = now;
        let lc = &mut self.lifecycles[id.index()];
        lc.first_token_ms = Some(now);
        if self.cfg.record_token_times {
            lc.token_emit_times.push(now);
        }
        self.trace(|| TraceEvent::FirstToken {
            time_ms: now,
            request: id,
            instance: at,
        });
    }

    fn on_iteration_complete(&mut self, i: InstanceId) {
        let now = self.now;
        if self.cfg.record_events {
            let plan = self.instances[i.index()].in_flight_plan().expect("iteration in flight");
            let event = TraceEvent::Iteration {
                start_ms: self.iteration_start[i.index()],
                end_ms: now,
                instance: i,
                prefill_tokens: plan.prefill_tokens(),
                decodes: plan.decodes.clone(),
            };
            self.events.push(event);
        }
        let report = self.instances[i.index()].complete_iteration();

        if self.cfg.record_token_times {
            for id in &report.emitted_tokens {
                self.lifecycles[id.index()].token_emit_times.push(now);
            }
        }
        for slot in report.finished_decodes {
            self.finish(slot.id, i, slot.co_scheduled_prefill);
        }
        for job in report.finished_prefills {
            self.on_prefill_done(job, i);
        }
        self.admit_pending(i);
        self.start_iteration(i);
    }

    fn finish(&mut self, id: RequestId, at: InstanceId, co_scheduled: u64) {
        let now = self.now;
        let lc = &mut self.lifecycles[id.index()];
        lc.completion_ms = Some(now);
        lc.co_scheduled_prefill_tokens = co_scheduled;
        self.unfinished -= 1;
        self.trace(|| TraceEvent::Complete {
            time_ms: now,
            request: id,
            instance: at,
        });
    }

    fn on_prefill_done(&mut self, job: PrefillJob, i: InstanceId) {
        let now = self.now;
        let id = job.id;
        self.lifecycles[id.index()].prefill_done_ms = Some(now);
        self.trace(|| TraceEvent::PrefillDone {
            time_ms: now,
            request: id,
            instance: i,
        });

        if job.output_len <= 1 {
            let lc = &mut self.lifecycles[id.index()];
            lc.decode_ready_ms = Some(now);
            lc.first_token_ms = Some(now);
            if self.cfg.record_token_times {
                lc.token_emit_times.push(now);
            }
            self.trace(|| TraceEvent::FirstToken {
                time_ms: now,
                request: id,
                instance: i,
            });
            self.finish(id, i, 0);
            return;
        }

        let slot = DecodeSlot::after_prefill(id, job.prompt_len, job.output_len);
        let placement = if self.cfg.decodes_on_d_heavy() {
            decode_flow::place_initial_decode(i, &self.instances)
        } else {
            Placement::InPlace(i)
        };
        match placement {
            Placement::InPlace(at) => {
                self.lifecycles[id.index()].decode_ready_ms = Some(now);
                self.place(slot, at);
            }
            Placement::Transfer(to) => {
                self.lifecycles[id.index()].migrations.push(Migration {
                    time_ms: now,
                    from: i,
                    to,
                    reason: MigrationReason::Init,
                    segment_prefill_tokens: 0,
                });
                self.send(slot, i, to, MigrationReason::Init, Some(job.prompt_len as u64));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::TraceRecord;
    use alloc::vec;

    fn one_instance(chunk: u32) -> ClusterConfig {
        ClusterConfig {
            n_p_heavy: 1,
            n_d_heavy: 0,
            s_p_tokens: chunk,
            s_d_tokens: chunk,
            kv_capacity_tokens: 1_000_000,
            max_context_tokens: 16_384,
        }
    }

    fn arrival(t: f64, prompt: u32, out: u32) -> Arrival {
        Arrival {
            arrival_time_ms: t,
            record: TraceRecord {
                prompt_len: prompt,
                output_len: out,
            },
        }
    }

    fn cfg(mode: Mode, cluster: ClusterConfig) -> SimConfig {
        let mut c = SimConfig::new(
            mode,
            cluster,
            SloConfig::new(10_000.0, 200.0),
            CalibrationProfile::reference(),
        );
        c.record_events = true;
        c.record_token_times = true;
        c.check_invariants = true;
        c
    }

    #[test]
    fn single_request_hand_simulated() {
        let c = cfg(Mode::Aggregation, one_instance(1024));
        let out = run(&c, &[arrival(0.0, 1024, 3)]).unwrap();
        let p = c.profile;
        let prefill = p.iteration_time(1024, 0).unwrap();
        let decode = p.iteration_time(0, 1).unwrap();
        let lc = &out.lifecycles[0];
        assert!((lc.first_token_ms.unwrap() - prefill).abs() < 1e-9);
        assert!((lc.completion_ms.unwrap() - (prefill + 2.0 * decode)).abs() < 1e-9);
        assert_eq!(lc.token_emit_times.len(), 3);
        let r = &out.report.requests[0];
        assert!((r.tpot_ms - decode).abs() < 1e-9);
        assert_eq!(r.interference_intensity, 0.0);
    }

    #[test]
    fn output_len_one_completes_at_prefill() {
        let c = cfg(Mode::Aggregation, one_instance(512));
        let out = run(&c, &[arrival(5.0, 700, 1)]).unwrap();
        let lc = &out.lifecycles[0];
        assert_eq!(lc.first_token_ms, lc.completion_ms);
        assert_eq!(out.report.requests[0].tpot_ms, 0.0);
        assert_eq!(lc.token_emit_times.len(), 1);
    }

    #[test]
    fn deadlock_is_reported() {
        let mut cluster = one_instance(1024);
        cluster.kv_capacity_tokens = 100;
        let c = cfg(Mode::Aggregation, cluster);
        match run(&c, &[arrival(0.0, 500, 5)]) {
            Err(SimError::Deadlock { unfinished, stuck, .. }) => {
                assert_eq!(unfinished, 1);
                assert_eq!(stuck[0].phase, "decode_queue");
            }
            other => panic!("expected deadlock, got {other:?}"),
        }
    }

    #[test]
    fn disaggregated_request_transfers_once() {
        let cluster = ClusterConfig {
            n_p_heavy: 1,
            n_d_heavy: 1,
            s_p_tokens: 16_384,
            s_d_tokens: 0,
            kv_capacity_tokens: 1_000_000,
            max_context_tokens: 16_384,
        };
        let c = cfg(Mode::Disaggregation, cluster);
        let out = run(&c, &[arrival(0.0, 3000, 4)]).unwrap();
        let lc = &out.lifecycles[0];
        assert_eq!(lc.migrations.len(), 1);
        assert_eq!(lc.migrations[0].reason, MigrationReason::Init);
        let transfer = c.profile.transfer_time(3000);
        assert!((lc.decode_ready_ms.unwrap() - lc.prefill_done_ms.unwrap() - transfer).abs() < 1e-9);
        assert_eq!(lc.first_token_ms, lc.decode_ready_ms);
    }

    #[test]
    fn validation_rules() {
        let mut c = cfg(Mode::Disaggregation, one_instance(512));
        assert!(c.validate().is_err());
        c.mode = Mode::Hybrid;
        c.cluster = ClusterConfig {
            n_p_heavy: 0,
            n_d_heavy: 2,
            s_d_tokens: 0,
            ..one_instance(512)
        };
        assert!(c.validate().is_err());
        c.cluster.s_d_tokens = 128;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn empty_workload_is_an_error() {
        let c = cfg(Mode::Aggregation, one_instance(512));
        assert_eq!(run(&c, &[]), Err(SimError::EmptyWorkload));
    }

    #[test]
    fn events_are_time_ordered() {
        let c = cfg(Mode::Aggregation, one_instance(256));
        let arrivals = vec![arrival(0.0, 600, 5), arrival(1.0, 300, 3), arrival(400.0, 100, 2)];
        let out = run(&c, &arrivals).unwrap();
        assert_eq!(out.report.aggregates.n_completed, 3);
        let times: Vec<f64> = out
            .events
            .iter()
            .map(|e| match e {
                TraceEvent::Iteration { end_ms, .. } => *end_ms,
                TraceEvent::Arrival { time_ms, .. }
                | TraceEvent::Assign { time_ms, .. }
                | TraceEvent::Reject { time_ms, .. }
                | TraceEvent::PrefillDone { time_ms, .. }
                | TraceEvent::TransferStart { time_ms, .. }
                | TraceEvent::TransferDone { time_ms, .. }
                | TraceEvent::DecodeQueued { time_ms, .. }
                | TraceEvent::Preempt { time_ms, .. }
                | TraceEvent::FirstToken { time_ms, .. }
                | TraceEvent::Complete { time_ms, .. } => *time_ms,
            })
            .collect();
        assert!(times.windows(2).all(|w| w[0] <= w[1]));
    }
}
