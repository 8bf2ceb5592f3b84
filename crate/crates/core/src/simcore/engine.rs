//! The discrete-event loop.
//!
//! Per decode iteration, an instance walks its layers. Each layer runs
//! attention locally, then (disaggregated mode) sends two LoRA executions
//! through the server's stage pipeline — one per fine-tuned projection —
//! while the expert GEMM runs locally. With overlap enabled the layer costs
//!
//! ```text
//! attention + max(moe_gemm, max(0, lora_chain - moe_gemm))
//! ```
//!
//! where `lora_chain` is the measured wall time of both LoRA round trips
//! including all stage queueing; with overlap disabled the chain is strictly
//! serial (`attention + moe_gemm + lora_chain`). The chain for the next layer
//! cannot enter the server before the previous chain left it, so under
//! saturation the layer cadence degrades to the server bottleneck rate, which
//! is exactly the max-stage behavior the throughput constraint formalizes.
//!
//! Admission follows the token-level scheduler flow: at every arrival and
//! every iteration boundary, each queued request is admitted iff its
//! instance has batch room and its adapter is resident or loadable
//! (free slot, or an inactive resident to evict). Admitted requests join
//! their instance's next iteration start.

use super::scenario::{Policy, ServingMode, SimScenario};
use super::server::{LoraCache, StageGroups};
use super::{net, SimEvent};
use crate::error::{Error, Result};
use crate::metrics::{build_report, MetricsReport, RequestRecord, TimePoint};
use crate::parcost::Stage;
use std::collections::BinaryHeap;

#[derive(Debug)]
struct TimedEvent {
    time: f64,
    seq: u64,
    event: SimEvent,
}

impl PartialEq for TimedEvent {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl Eq for TimedEvent {}
impl PartialOrd for TimedEvent {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for TimedEvent {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Reversed: BinaryHeap is a max-heap, we pop the earliest (time, seq).
        other
            .time
            .total_cmp(&self.time)
            .then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone, Copy)]
struct ServiceTimes {
    attn: f64,
    moe: f64,
    recv: f64,
    comp: f64,
    send: f64,
    /// Coupled mode: one full iteration, precomputed.
    coupled_iteration: f64,
}

#[derive(Debug)]
struct ReqState {
    trace_id: u64,
    adapter: usize,
    arrival: f64,
    output_tokens: u32,
    instance: usize,
    admitted: Option<f64>,
    admission_seq: u64,
    /// Earliest iteration start this request may join (coupled-mode loads).
    ready_at: f64,
    first_token: Option<f64>,
    completion: Option<f64>,
    tokens_done: u32,
}

#[derive(Debug)]
struct IterCtx {
    layer: u32,
    /// Model-clock end of the current layer's attention phase.
    attn_end: f64,
    times: ServiceTimes,
}

#[derive(Debug)]
struct Instance {
    /// Requests waiting for admission, kept in policy order.
    queue: Vec<usize>,
    /// Admitted requests waiting to join the next iteration start.
    pending: Vec<usize>,
    /// Requests decoding in the current iteration.
    batch: Vec<usize>,
    iter: Option<IterCtx>,
    /// Private adapter cache in coupled mode.
    cache: Option<LoraCache>,
}

pub(super) struct Engine<'a> {
    scenario: &'a SimScenario,
    events: BinaryHeap<TimedEvent>,
    seq: u64,
    now: f64,
    requests: Vec<ReqState>,
    instances: Vec<Instance>,
    server_cache: LoraCache,
    stages: StageGroups,
    stage_count: u32,
    admission_counter: u64,
    completed: usize,
    comm_scale: f64,
    service_memo: std::collections::HashMap<u32, ServiceTimes>,
    batch_series: Vec<TimePoint>,
    active_series: Vec<TimePoint>,
}

impl<'a> Engine<'a> {
    pub(super) fn new(scenario: &'a SimScenario) -> Result<Self> {
        scenario.validate()?;
        let cluster = &scenario.cluster;
        let owner = scenario.adapter_assignment()?;

        let layer_transfer =
            scenario.catalog.layer_bytes() as f64 / cluster.pcie_bandwidth;
        let layerwise = scenario.ablation.layerwise_loading;
        let layers = scenario.catalog.layers;

        let requests: Vec<ReqState> = scenario
            .trace
            .requests
            .iter()
            .map(|r| ReqState {
                trace_id: r.id,
                adapter: r.adapter_id,
                arrival: r.arrival_time,
                output_tokens: r.output_tokens.max(1),
                instance: owner[r.adapter_id],
                admitted: None,
                admission_seq: 0,
                ready_at: 0.0,
                first_token: None,
                completion: None,
                tokens_done: 0,
            })
            .collect();

        let coupled = scenario.mode == ServingMode::Coupled;
        let per_instance_capacity = if coupled {
            (cluster.cache_capacity / cluster.instances as usize).max(1)
        } else {
            0
        };
        let instances = (0..cluster.instances)
            .map(|_| Instance {
                queue: Vec::new(),
                pending: Vec::new(),
                batch: Vec::new(),
                iter: None,
                cache: coupled.then(|| {
                    // Coupled baselines load whole adapters before admission
                    // takes effect; layer-wise pipelining is the
                    // disaggregated server's optimization.
                    LoraCache::new(per_instance_capacity, layers, layer_transfer, false)
                }),
            })
            .collect();

        let stage_count = cluster.strategy.stage_count(cluster.server_gpus);

        let mut engine = Engine {
            scenario,
            events: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
            requests,
            instances,
            server_cache: LoraCache::new(
                cluster.cache_capacity,
                layers,
                layer_transfer,
                layerwise,
            ),
            stages: StageGroups::new(stage_count as usize),
            stage_count,
            admission_counter: 0,
            completed: 0,
            comm_scale: 1.0,
            service_memo: std::collections::HashMap::new(),
            batch_series: Vec::new(),
            active_series: Vec::new(),
        };

        for idx in 0..engine.requests.len() {
            let t = engine.requests[idx].arrival;
            engine.schedule(t, SimEvent::Arrival { request: idx });
        }
        if !engine.requests.is_empty() {
            engine.schedule(0.0, SimEvent::SampleTick);
        }
        Ok(engine)
    }

    fn schedule(&mut self, time: f64, event: SimEvent) {
        debug_assert!(time.is_finite());
        self.events.push(TimedEvent {
            time,
            seq: self.seq,
            event,
        });
        self.seq += 1;
    }

    /// Per-iteration service times at a given batch size, memoized.
    fn service_times(&mut self, batch: u32) -> Result<ServiceTimes> {
        if let Some(t) = self.service_memo.get(&batch) {
            return Ok(*t);
        }
        let s = self.scenario;
        let cluster = &s.cluster;
        let tokens = batch as f64 * s.top_k as f64;
        let attn = s.attention_base + s.attention_per_req * batch as f64;
        let moe = s
            .latency
            .moe_time(&cluster.strategy, cluster.server_gpus, tokens)?;
        let payload = tokens * s.hidden as f64 * 2.0;
        let scale = net::comm_scale_factor(&cluster.net, payload);
        let recv = scale
            * s.latency
                .stage_latency(&cluster.strategy, cluster.server_gpus, Stage::Recv, tokens)?;
        let comp = s
            .latency
            .stage_latency(&cluster.strategy, cluster.server_gpus, Stage::Comp, tokens)?;
        let send = scale
            * s.latency
                .stage_latency(&cluster.strategy, cluster.server_gpus, Stage::Send, tokens)?;
        // Coupled baseline: serial LoRA compute for both projections on the
        // instance, no server round trip.
        let coupled_iteration =
            s.catalog.layers as f64 * (attn + moe + 2.0 * comp);
        let times = ServiceTimes {
            attn,
            moe,
            recv,
            comp,
            send,
            coupled_iteration,
        };
        self.service_memo.insert(batch, times);
        Ok(times)
    }

    fn cache_for(instances: &mut [Instance], server: &mut LoraCache, i: usize) -> *mut LoraCache {
        match instances[i].cache.as_mut() {
            Some(c) => c as *mut _,
            None => server as *mut _,
        }
    }

    /// Scheduler pass over one instance's queue: admit every request whose
    /// adapter is resident or loadable while batch room remains.
    fn admission_pass(&mut self, i: usize) {
        let prefetch = self.scenario.ablation.prefetch;
        let coupled = self.scenario.mode == ServingMode::Coupled;
        let cap = self.scenario.cluster.batch_cap as usize;
        let now = self.now;

        // One cache to consult: the shared server cache, or this instance's
        // private one in coupled mode.
        let cache_ptr = Self::cache_for(&mut self.instances, &mut self.server_cache, i);
        let cache: &mut LoraCache = unsafe { &mut *cache_ptr };

        let inst = &mut self.instances[i];
        let mut remaining: Vec<usize> = Vec::with_capacity(inst.queue.len());
        for &req_idx in inst.queue.iter() {
            let in_flight = inst.batch.len() + inst.pending.len();
            if in_flight >= cap {
                remaining.push(req_idx);
                continue;
            }
            let adapter = self.requests[req_idx].adapter;
            if !cache.admissible(adapter) {
                remaining.push(req_idx);
                continue;
            }
            let admitted = cache.admit(adapter, now, if coupled { true } else { prefetch });
            debug_assert!(admitted);
            let req = &mut self.requests[req_idx];
            req.admitted = Some(now);
            req.admission_seq = self.admission_counter;
            self.admission_counter += 1;
            req.ready_at = if coupled {
                cache.fully_ready(adapter, now)
            } else {
                now
            };
            inst.pending.push(req_idx);
        }
        inst.queue = remaining;

        if inst.iter.is_none() {
            self.try_start_iteration(i);
        }
    }

    /// Moves ready pending requests into the batch and starts an iteration.
    fn try_start_iteration(&mut self, i: usize) {
        let now = self.now;
        {
            let inst = &mut self.instances[i];
            debug_assert!(inst.iter.is_none());
            let mut still_pending = Vec::new();
            for &r in inst.pending.iter() {
                if self.requests[r].ready_at <= now {
                    inst.batch.push(r);
                } else {
                    still_pending.push(r);
                }
            }
            inst.pending = still_pending;
            if inst.batch.is_empty() {
                // Wake up when the earliest pending load completes.
                let next_ready = inst
                    .pending
                    .iter()
                    .map(|&r| self.requests[r].ready_at)
                    .fold(f64::INFINITY, f64::min);
                if next_ready.is_finite() {
                    self.schedule(next_ready, SimEvent::AdmissionCheck { instance: i });
                }
                return;
            }
        }

        let batch_len = self.instances[i].batch.len() as u32;
        let times = match self.service_times(batch_len) {
            Ok(t) => t,
            Err(e) => {
                // Calibration failures must abort the run; stash and drain.
                self.abort = Some(e);
                return;
            }
        };
        match self.scenario.mode {
            ServingMode::Coupled => {
                self.instances[i].iter = Some(IterCtx {
                    layer: 0,
                    attn_end: now,
                    times,
                });
                self.schedule(
                    now + times.coupled_iteration,
                    SimEvent::DecodeStepDone { instance: i },
                );
            }
            ServingMode::Disaggregated => {
                let attn_end = now + times.attn;
                self.instances[i].iter = Some(IterCtx {
                    layer: 0,
                    attn_end,
                    times,
                });
                self.schedule(
                    attn_end,
                    SimEvent::LayerLoadDone {
                        instance: i,
                        projection: 0,
                    },
                );
            }
        }
    }

    /// Earliest time every batch adapter has the current layer's weights.
    fn layer_gate(&mut self, i: usize) -> f64 {
        let layer = self.instances[i].iter.as_ref().unwrap().layer;
        let now = self.now;
        let mut gate = now;
        for idx in 0..self.instances[i].batch.len() {
            let adapter = self.requests[self.instances[i].batch[idx]].adapter;
            gate = gate.max(self.server_cache.layer_ready(adapter, layer, now));
        }
        gate
    }

    fn on_visit_entry(&mut self, i: usize, projection: u8) {
        let gate = if projection == 0 {
            self.layer_gate(i)
        } else {
            // Second projection reuses the layer the first one already gated.
            self.now
        };
        if gate > self.now {
            self.schedule(
                gate,
                SimEvent::LayerLoadDone {
                    instance: i,
                    projection,
                },
            );
            return;
        }
        let iter = self.instances[i].iter.as_ref().unwrap();
        let group = (iter.layer % self.stage_count) as usize;
        let times = [iter.times.recv, iter.times.comp, iter.times.send];
        let done = self.stages.claim(group, self.now, times);
        self.schedule(
            done,
            SimEvent::StageDone {
                instance: i,
                projection,
            },
        );
    }

    fn on_stage_done(&mut self, i: usize, projection: u8) {
        if projection == 0 {
            self.schedule(
                self.now,
                SimEvent::LayerLoadDone {
                    instance: i,
                    projection: 1,
                },
            );
            return;
        }
        // Both projections done: close the layer under the overlap model.
        let overlap = self.scenario.ablation.overlap;
        let layers = self.scenario.catalog.layers;
        let now = self.now;
        let (layer_end, next_layer) = {
            let iter = self.instances[i].iter.as_mut().unwrap();
            let chain = now - iter.attn_end;
            let tail = if overlap {
                let exposed = (chain - iter.times.moe).max(0.0);
                iter.times.moe.max(exposed)
            } else {
                iter.times.moe + chain
            };
            let layer_end = iter.attn_end + tail;
            iter.layer += 1;
            (layer_end, iter.layer)
        };
        if next_layer < layers {
            let iter = self.instances[i].iter.as_mut().unwrap();
            let attn_end = layer_end + iter.times.attn;
            iter.attn_end = attn_end;
            // The next chain cannot enter the server before this one left it.
            self.schedule(
                attn_end.max(now),
                SimEvent::LayerLoadDone {
                    instance: i,
                    projection: 0,
                },
            );
        } else {
            self.schedule(
                layer_end.max(now),
                SimEvent::DecodeStepDone { instance: i },
            );
        }
    }

    fn on_decode_step_done(&mut self, i: usize) {
        let now = self.now;
        let coupled = self.scenario.mode == ServingMode::Coupled;
        let mut finished: Vec<usize> = Vec::new();
        {
            let inst = &mut self.instances[i];
            inst.iter = None;
            for &r in inst.batch.iter() {
                let req = &mut self.requests[r];
                req.tokens_done += 1;
                if req.tokens_done == 1 {
                    req.first_token = Some(now);
                }
                if req.tokens_done >= req.output_tokens {
                    finished.push(r);
                }
            }
            inst.batch.retain(|r| !finished.contains(r));
        }
        for &r in &finished {
            self.requests[r].completion = Some(now);
            let adapter = self.requests[r].adapter;
            let cache_ptr = Self::cache_for(&mut self.instances, &mut self.server_cache, i);
            unsafe { &mut *cache_ptr }.release(adapter);
            self.schedule(now, SimEvent::RequestDone { request: r });
        }
        // Freed slots and adapters may unblock any queue in disaggregated
        // mode; in coupled mode only this instance's state changed.
        if coupled {
            self.schedule(now, SimEvent::AdmissionCheck { instance: i });
        } else {
            for j in 0..self.instances.len() {
                self.schedule(now, SimEvent::AdmissionCheck { instance: j });
            }
        }
    }

    fn record_sample(&mut self) {
        let batch_total: usize = self.instances.iter().map(|inst| inst.batch.len()).sum();
        let active = match self.scenario.mode {
            ServingMode::Disaggregated => self.server_cache.active_count(),
            ServingMode::Coupled => self
                .instances
                .iter()
                .map(|inst| inst.cache.as_ref().unwrap().active_count())
                .sum(),
        };
        self.batch_series.push(TimePoint {
            time: self.now,
            value: batch_total as f64,
        });
        self.active_series.push(TimePoint {
            time: self.now,
            value: active as f64,
        });
    }

    fn dispatch(&mut self, event: SimEvent) {
        match event {
            SimEvent::Arrival { request } => {
                let i = self.requests[request].instance;
                let inst = &mut self.instances[i];
                // Queue kept in policy order; FCFS order is arrival order.
                match self.scenario.policy {
                    Policy::Fcfs => inst.queue.push(request),
                    Policy::Sjf => {
                        let key = |r: usize| {
                            let rq = &self.requests[r];
                            (rq.output_tokens, rq.trace_id)
                        };
                        let pos = inst
                            .queue
                            .partition_point(|&r| key(r) <= key(request));
                        inst.queue.insert(pos, request);
                    }
                }
                self.schedule(self.now, SimEvent::AdmissionCheck { instance: i });
            }
            SimEvent::AdmissionCheck { instance } => self.admission_pass(instance),
            SimEvent::LayerLoadDone {
                instance,
                projection,
            } => self.on_visit_entry(instance, projection),
            SimEvent::StageDone {
                instance,
                projection,
            } => self.on_stage_done(instance, projection),
            SimEvent::DecodeStepDone { instance } => self.on_decode_step_done(instance),
            SimEvent::RequestDone { .. } => {
                self.completed += 1;
            }
            SimEvent::SampleTick => {
                self.record_sample();
                if self.completed < self.requests.len() {
                    self.schedule(self.now + self.scenario.sample_interval, SimEvent::SampleTick);
                }
            }
        }
    }

    pub(super) fn run_to_completion(mut self) -> Result<MetricsReport> {
        while let Some(ev) = self.events.pop() {
            debug_assert!(
                ev.time >= self.now - 1e-9,
                "event time went backwards: {} < {}",
                ev.time,
                self.now
            );
            self.now = self.now.max(ev.time);
            self.dispatch(ev.event);
            if let Some(err) = self.abort.take() {
                return Err(err);
            }
            // Cache-bound sanity: residency never exceeds capacity.
            debug_assert!(
                self.server_cache.resident_count() <= self.server_cache.capacity()
            );
        }
        if self.completed != self.requests.len() {
            return Err(Error::Validation(format!(
                "simulation stalled: {} of {} requests completed",
                self.completed,
                self.requests.len()
            )));
        }
        if !self.requests.is_empty() {
            self.record_sample();
        }

        let mut per_request: Vec<RequestRecord> = self
            .requests
            .iter()
            .map(|r| RequestRecord {
                request_id: r.trace_id,
                adapter_id: r.adapter,
                arrival_time: r.arrival,
                admission_time: r.admitted.expect("completed request was admitted"),
                first_token_time: r.first_token.expect("completed request decoded"),
                completion_time: r.completion.expect("completed request finished"),
                output_tokens: r.output_tokens,
                admission_seq: r.admission_seq,
            })
            .collect();
        per_request.sort_by_key(|r| r.request_id);

        build_report(
            per_request,
            self.requests.len(),
            self.scenario.trace.duration,
            std::mem::take(&mut self.batch_series),
            std::mem::take(&mut self.active_series),
            self.scenario.window,
            self.scenario.slos,
        )
    }
}

/// Runs a scenario to completion and returns its metrics.
///
/// The run is deterministic: identical scenarios (including seed) produce
/// bit-identical reports.
pub fn run(scenario: &SimScenario) -> Result<MetricsReport> {
    Engine::new(scenario)?.run_to_completion()
}
