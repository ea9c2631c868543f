//! The discrete-event serving simulator.
//!
//! Every group of instances runs as a pipeline with one issue slot per
//! member. A slot forms a microbatch (its share of the formulated prefill
//! work plus the decode steps of the requests it owns), pushes it through
//! the stages, and forms the next one when it leaves the last stage.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::batching::{lookahead_formulation, token_count_chunking, Formulation, FormulationConfig, PrefillItem};
use crate::config::{Config, Policy};
use crate::cost::{batch_cost, chunk_cost};
use crate::error::Result;
use crate::eventlog::EventRecord;
use crate::memory::AllocOutcome;
use crate::metrics::StageInterval;
use crate::network::{exchange_chunk_bytes, plan_exchange, restore_shards, Endpoint, LinkKey, Network, OngoingKv, Started, TransferKind, TransferPurpose, TransferTask};
use crate::planner::{apply_plan, compute_demand, plan_drop, Cluster, DropPlan};
use crate::sim::events::EventQueue;
use crate::trace::TraceRecord;
use crate::types::{Chunk, ChunkKind, Group, GroupId, Instance, InstanceId, MicrobatchId, Micros, Request, RequestId, RequestState};

/// Split depth that yields one leaf per stage per round.
pub fn lookahead_depth(stages: u32, rounds: u32) -> u32 {
    ((stages * rounds) as f64).log2().ceil() as u32
}

#[derive(Clone, Debug)]
enum Ev {
    Arrival(RequestId),
    StageDone { group: GroupId, epoch: u64, stage: usize },
    TransferDone(LinkKey),
    Tick,
    Overload,
    RemapDone,
    Fault(InstanceId),
    InstanceReady(InstanceId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Hold {
    Run,
    /// No new microbatches; in-flight ones finish.
    Drain,
    /// Parameters are being remapped.
    Frozen,
}

#[derive(Clone, Debug, Default)]
struct Slot {
    busy: Option<MicrobatchId>,
    decodes: BTreeSet<RequestId>,
}

#[derive(Clone, Debug)]
struct GroupRt {
    epoch: u64,
    slots: Vec<Slot>,
    stage_queue: Vec<VecDeque<MicrobatchId>>,
    stage_busy: Vec<Option<(MicrobatchId, Micros)>>,
    leaves: VecDeque<Vec<Chunk>>,
    /// Admitted requests whose prefill is not finished.
    prefill: VecDeque<RequestId>,
    /// Dispatched requests waiting for KVCache.
    waiting: VecDeque<RequestId>,
    /// Requests swapped out to host memory.
    swapped: VecDeque<RequestId>,
    hold: Hold,
    blocked_ticks: u32,
    swap_out_in_flight: bool,
    migrating: bool,
}

impl GroupRt {
    fn new(epoch: u64, size: usize) -> GroupRt {
        GroupRt {
            epoch,
            slots: vec![Slot::default(); size],
            stage_queue: vec![VecDeque::new(); size],
            stage_busy: vec![None; size],
            leaves: VecDeque::new(),
            prefill: VecDeque::new(),
            waiting: VecDeque::new(),
            swapped: VecDeque::new(),
            hold: Hold::Run,
            blocked_ticks: 0,
            swap_out_in_flight: false,
            migrating: false,
        }
    }

    fn drained(&self) -> bool {
        self.slots.iter().all(|s| s.busy.is_none())
    }
}

#[derive(Clone, Debug)]
struct MbRun {
    group: GroupId,
    slot: usize,
    chunks: Vec<Chunk>,
    cost: f64,
    tokens: u64,
}

#[derive(Clone, Debug, Default)]
struct ReqRt {
    group: Option<GroupId>,
    /// Prefill tokens formulated but not yet completed.
    scheduled: u32,
    inflight: u32,
    admitted: bool,
    /// Waiting for KVCache transfers; holds the state to return to.
    stalled_from: Option<RequestState>,
    pending_chunks: u32,
    oom: bool,
    swapped_tokens: u64,
}

#[derive(Clone, Debug)]
enum OpStage {
    /// Drop plan waiting for its groups to drain.
    DropDrain { plan: DropPlan, groups: BTreeSet<GroupId> },
    /// Remap in progress, then KVCache exchange.
    DropRemap { groups: Vec<GroupId>, layouts: BTreeMap<RequestId, Group> },
    /// Parameters streaming back.
    RestoreTransfer { groups: BTreeMap<GroupId, (u32, Vec<(InstanceId, std::ops::Range<u32>)>)> },
    RestoreDrain { groups: BTreeSet<GroupId> },
    /// KVCache exchange after a drop or restore.
    Exchange { kind: &'static str },
}

/// Counters a run accumulates.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SimStats {
    pub evictions: u64,
    pub drop_events: u64,
    pub restores: u64,
    pub swaps: u64,
    pub migrations: u64,
    pub fallbacks: u64,
    pub autoscale_events: u64,
    pub faults: u64,
    pub end_time: Micros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimelineRow {
    pub time_s: f64,
    pub occupancy: f64,
    pub queued: usize,
    pub mean_ttft: Option<f64>,
    pub groups: usize,
    pub drop_active: bool,
}

#[derive(Clone, Debug)]
pub struct SimOutput {
    pub policy: Policy,
    pub requests: Vec<Request>,
    pub events: Vec<EventRecord>,
    pub timeline: Vec<TimelineRow>,
    pub stage_intervals: Vec<StageInterval>,
    pub stats: SimStats,
}

pub struct Simulation {
    cfg: Config,
    q: EventQueue<Ev>,
    now: Micros,
    requests: Vec<Request>,
    rt: Vec<ReqRt>,
    cluster: Cluster,
    groups: BTreeMap<GroupId, GroupRt>,
    runs: BTreeMap<MicrobatchId, MbRun>,
    network: Network,
    dead: BTreeSet<InstanceId>,
    next_mb: u64,
    next_epoch: u64,
    op: Option<OpStage>,
    pending_faults: VecDeque<InstanceId>,
    original_kv_capacity: u64,
    events: Vec<EventRecord>,
    intervals: Vec<StageInterval>,
    timeline: Vec<TimelineRow>,
    stats: SimStats,
    ticks: u64,
    ttft_window: Vec<f64>,
    hot_since: Option<Micros>,
    scaling: bool,
    overload_queued: bool,
    /// Set while demand exceeds what dropping can free.
    in_fallback: bool,
    horizon: Option<Micros>,
    finished: usize,
}

impl Simulation {
    pub fn new(cfg: Config, trace: &[TraceRecord]) -> Result<Simulation> {
        cfg.validate()?;
        let model = cfg.model.clone();
        let mut instances = BTreeMap::new();
        let mut groups = BTreeMap::new();
        let mut rts = BTreeMap::new();
        for i in 0..cfg.cluster.instances {
            let id = InstanceId(i);
            let inst = Instance::new(
                id,
                &model,
                cfg.cluster.hbm_bytes,
                cfg.cluster.reserve_bytes,
                Micros(cfg.memory.map_latency_us),
                cfg.cluster.bandwidth,
            )?;
            instances.insert(id, inst);
            groups.insert(GroupId(i), Group::single(GroupId(i), id, model.num_layers));
            rts.insert(GroupId(i), GroupRt::new(i as u64, 1));
        }
        let cluster = Cluster {
            model,
            instances,
            groups,
        };
        let original_kv_capacity = cluster.instances.values().map(|i| i.kv.capacity_bytes()).sum();
        let mut q = EventQueue::new();
        let mut requests = Vec::with_capacity(trace.len());
        for (i, r) in trace.iter().enumerate() {
            let id = RequestId(i as u64);
            let t = Micros::from_secs_f64(r.arrival_s);
            requests.push(Request::new(id, t, r.input_len, r.output_len));
            q.push(t, Ev::Arrival(id));
        }
        for f in &cfg.faults {
            q.push(Micros::from_secs_f64(f.at_s), Ev::Fault(InstanceId(f.instance)));
        }
        q.push(Micros::ZERO, Ev::Tick);
        let horizon = cfg.horizon_s.map(Micros::from_secs_f64);
        let network = Network::new(cfg.network_params());
        Ok(Simulation {
            rt: vec![ReqRt::default(); requests.len()],
            requests,
            cluster,
            groups: rts,
            runs: BTreeMap::new(),
            network,
            dead: BTreeSet::new(),
            next_mb: 0,
            next_epoch: cfg.cluster.instances as u64,
            op: None,
            pending_faults: VecDeque::new(),
            original_kv_capacity,
            events: Vec::new(),
            intervals: Vec::new(),
            timeline: Vec::new(),
            stats: SimStats::default(),
            ticks: 0,
            ttft_window: Vec::new(),
            hot_since: None,
            scaling: false,
            overload_queued: false,
            in_fallback: false,
            horizon,
            finished: 0,
            now: Micros::ZERO,
            q,
            cfg,
        })
    }

    pub fn cluster(&self) -> &Cluster {
        &self.cluster
    }

    pub fn now(&self) -> Micros {
        self.now
    }

    pub fn stats(&self) -> &SimStats {
        &self.stats
    }

    pub fn requests(&self) -> &[Request] {
        &self.requests
    }

    /// True while a drop, restore or exchange is in progress.
    pub fn op_in_progress(&self) -> bool {
        self.op.is_some()
    }

    fn done(&self) -> bool {
        self.finished == self.requests.len() && self.op.is_none() && self.pending_faults.is_empty()
    }

    /// Processes events up to and including `until`. Returns false once the
    /// simulation has nothing left to do.
    pub fn run_until(&mut self, until: Micros) -> bool {
        while let Some(t) = self.q.peek_time() {
            if t > until || self.horizon.is_some_and(|h| t > h) {
                return self.horizon.is_none_or(|h| t <= h);
            }
            let (t, ev) = self.q.pop().expect("peeked");
            self.now = t;
            self.handle(ev);
            if self.done() {
                return false;
            }
        }
        false
    }

    pub fn run(mut self) -> SimOutput {
        while self.run_until(Micros(u64::MAX)) {}
        self.finish()
    }

    pub fn finish(mut self) -> SimOutput {
        self.stats.end_time = self.now;
        SimOutput {
            policy: self.cfg.policy,
            requests: self.requests,
            events: self.events,
            timeline: self.timeline,
            stage_intervals: self.intervals,
            stats: self.stats,
        }
    }

    fn log(&mut self, rec: EventRecord) {
        self.events.push(rec);
    }

    fn ev(&self, kind: &str) -> EventRecord {
        EventRecord::new(self.now, kind)
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::Arrival(r) => self.on_arrival(r),
            Ev::StageDone { group, epoch, stage } => self.on_stage_done(group, epoch, stage),
            Ev::TransferDone(link) => self.on_transfer_done(link),
            Ev::Tick => self.on_tick(),
            Ev::Overload => {
                self.overload_queued = false;
                if self.op.is_none() {
                    self.on_overload();
                }
            }
            Ev::RemapDone => self.on_remap_done(),
            Ev::Fault(i) => {
                self.pending_faults.push_back(i);
                self.process_faults();
            }
            Ev::InstanceReady(i) => self.on_instance_ready(i),
        }
    }

    // ---- memory helpers -------------------------------------------------

    fn members(&self, g: GroupId) -> Vec<InstanceId> {
        self.cluster.groups[&g].members.clone()
    }

    fn group_free_tokens(&self, g: GroupId) -> u64 {
        self.cluster.groups[&g]
            .members
            .iter()
            .map(|m| self.cluster.instances[m].kv.free_tokens())
            .min()
            .unwrap_or(0)
    }

    fn group_capacity_tokens(&self, g: GroupId) -> u64 {
        self.cluster.groups[&g]
            .members
            .iter()
            .map(|m| self.cluster.instances[m].kv.capacity_tokens())
            .min()
            .unwrap_or(0)
    }

    fn alloc_group(&mut self, g: GroupId, r: RequestId, n: u64) -> bool {
        if n == 0 {
            return true;
        }
        let members = self.members(g);
        if members.iter().any(|m| self.cluster.instances[m].kv.free_tokens() < n) {
            return false;
        }
        for m in members {
            let out = self.cluster.instances.get_mut(&m).expect("member").alloc_tokens(r, n);
            debug_assert_eq!(out, AllocOutcome::Ok);
        }
        true
    }

    fn release_group(&mut self, g: GroupId, r: RequestId) -> u64 {
        let mut tokens = 0;
        for m in self.members(g) {
            tokens = tokens.max(self.cluster.instances.get_mut(&m).expect("member").kv.release(r));
        }
        tokens
    }

    fn allocated_tokens(&self, g: GroupId, r: RequestId) -> u64 {
        let m = self.cluster.groups[&g].members[0];
        self.cluster.instances[&m].kv.tokens_of(r)
    }

    /// KVCache tokens actually computed for `r`.
    fn materialized(&self, r: RequestId) -> u64 {
        let q = &self.requests[r.0 as usize];
        q.context_len() - q.remaining_prefill() as u64
    }

    fn used_kv_bytes(&self) -> u64 {
        self.cluster
            .instances
            .iter()
            .filter(|(id, _)| !self.dead.contains(id))
            .map(|(_, i)| i.kv.used_bytes())
            .sum()
    }

    fn kv_capacity_bytes(&self) -> u64 {
        self.cluster
            .instances
            .iter()
            .filter(|(id, _)| !self.dead.contains(id))
            .map(|(_, i)| i.kv.capacity_bytes())
            .sum()
    }

    fn drop_active(&self) -> bool {
        self.cluster.groups.values().any(|g| g.size() > 1)
    }

    // ---- arrivals and admission ----------------------------------------

    fn on_arrival(&mut self, r: RequestId) {
        let req = &self.requests[r.0 as usize];
        let rec = self.ev("arrival").with("id", r).with("in", req.input_len).with("out", req.output_len);
        self.log(rec);
        let g = self.dispatch(r);
        self.rt[r.0 as usize].group = Some(g);
        self.groups.get_mut(&g).expect("group").waiting.push_back(r);
        let rec = self.ev("dispatch").with("id", r).with("group", g);
        self.log(rec);
        self.kick(g);
    }

    fn queued_tokens(&self, g: GroupId) -> u64 {
        self.groups[&g]
            .waiting
            .iter()
            .map(|r| self.requests[r.0 as usize].remaining_prefill() as u64)
            .sum()
    }

    /// Group with the most free KVCache tokens net of its queue; ties go to
    /// the lowest id.
    fn dispatch(&self, _r: RequestId) -> GroupId {
        let mut best: Option<(i128, GroupId)> = None;
        for &g in self.cluster.groups.keys() {
            let score = self.group_free_tokens(g) as i128 - self.queued_tokens(g) as i128;
            if best.is_none_or(|(s, _)| score > s) {
                best = Some((score, g));
            }
        }
        best.expect("at least one live group").1
    }

    fn reserve_tokens(&self, g: GroupId) -> u64 {
        (self.cfg.scheduler.watermark * self.group_capacity_tokens(g) as f64).ceil() as u64
    }

    fn head_fits(&self, g: GroupId) -> bool {
        let rt = &self.groups[&g];
        match rt.waiting.front() {
            None => true,
            Some(r) => {
                let need = self.requests[r.0 as usize].remaining_prefill() as u64;
                self.group_free_tokens(g) >= need + self.reserve_tokens(g)
            }
        }
    }

    fn admit(&mut self, g: GroupId) {
        loop {
            let rt = &self.groups[&g];
            if self.cfg.policy == Policy::Swap && !rt.swapped.is_empty() {
                return;
            }
            let Some(&r) = rt.waiting.front() else { return };
            if !self.head_fits(g) {
                return;
            }
            let need = self.requests[r.0 as usize].remaining_prefill() as u64;
            if !self.alloc_group(g, r, need) {
                return;
            }
            let rt = self.groups.get_mut(&g).expect("group");
            rt.waiting.pop_front();
            rt.prefill.push_back(r);
            rt.blocked_ticks = 0;
            self.rt[r.0 as usize].admitted = true;
            let now = self.now;
            self.requests[r.0 as usize].transition(RequestState::Prefilling, now);
            let rec = self.ev("admit").with("id", r).with("group", g).with("tokens", need);
            self.log(rec);
        }
    }

    fn swap_in(&mut self, g: GroupId) {
        loop {
            let Some(&r) = self.groups[&g].swapped.front() else { return };
            let tokens = self.rt[r.0 as usize].swapped_tokens;
            if self.group_free_tokens(g) < tokens + 1 + self.reserve_tokens(g) {
                return;
            }
            if !self.alloc_group(g, r, tokens) {
                return;
            }
            self.groups.get_mut(&g).expect("group").swapped.pop_front();
            let home = self.members(g)[0];
            let bytes = self.cluster.model.kv_bytes(self.materialized(r), self.cluster.model.num_layers);
            let task = TransferTask::new(TransferKind::KvCacheChunk, bytes, Endpoint::Host(home), Endpoint::Instance(home), self.now)
                .with_purpose(TransferPurpose::SwapIn { request: r });
            self.submit(task);
            let rec = self.ev("swap_in").with("id", r).with("bytes", bytes);
            self.log(rec);
        }
    }

    // ---- microbatch formation ------------------------------------------

    /// Starts work on every idle slot of `g`.
    fn kick(&mut self, g: GroupId) {
        if !self.groups.contains_key(&g) || self.groups[&g].hold != Hold::Run {
            return;
        }
        if self.cfg.policy == Policy::Swap {
            self.swap_in(g);
        }
        self.admit(g);
        let n = self.groups[&g].slots.len();
        for s in 0..n {
            let rt = &self.groups[&g];
            if rt.hold != Hold::Run || rt.slots[s].busy.is_some() {
                continue;
            }
            self.form(g, s);
        }
    }

    fn decode_ready(&self, r: RequestId) -> bool {
        let q = &self.requests[r.0 as usize];
        let rt = &self.rt[r.0 as usize];
        q.state == RequestState::Decoding && rt.inflight == 0 && rt.stalled_from.is_none()
    }

    fn form(&mut self, g: GroupId, slot: usize) {
        let candidates: Vec<RequestId> = self.groups[&g].slots[slot].decodes.iter().copied().collect();
        let mut chunks = Vec::new();
        for r in candidates {
            if !self.decode_ready(r) || !self.groups[&g].slots[slot].decodes.contains(&r) {
                continue;
            }
            if !self.alloc_group(g, r, 1) && !self.on_decode_oom(g, r) {
                continue;
            }
            self.rt[r.0 as usize].oom = false;
            chunks.push(Chunk::decode(r, self.requests[r.0 as usize].context_len()));
        }
        if self.groups[&g].leaves.is_empty() {
            self.formulate(g, chunks.len() as u32);
        }
        if let Some(leaf) = self.groups.get_mut(&g).expect("group").leaves.pop_front() {
            chunks.extend(leaf);
        }
        if chunks.is_empty() {
            return;
        }
        let id = MicrobatchId(self.next_mb);
        self.next_mb += 1;
        for c in &chunks {
            self.rt[c.request_id.0 as usize].inflight += 1;
        }
        let cost = batch_cost(&chunks, &self.cluster.model.cost);
        let tokens = chunks.iter().map(|c| c.token_count as u64).sum();
        self.runs.insert(
            id,
            MbRun {
                group: g,
                slot,
                chunks,
                cost,
                tokens,
            },
        );
        let rt = self.groups.get_mut(&g).expect("group");
        rt.slots[slot].busy = Some(id);
        rt.stage_queue[0].push_back(id);
        self.try_start(g, 0);
    }

    /// Turns pending prefill work into leaves for the slots.
    fn formulate(&mut self, g: GroupId, decodes: u32) {
        let size = self.cluster.groups[&g].size() as u32;
        let budget = self.cfg.scheduler.token_budget;
        let lookahead = self.cfg.scheduler.formulation == Formulation::Lookahead && size > 1;
        let rounds = self.cfg.scheduler.lookahead_rounds;
        let mut room = match (size, lookahead) {
            (1, _) => budget.saturating_sub(decodes),
            (_, true) => budget * size * rounds,
            _ => budget * size,
        };
        let mut pool = Vec::new();
        let ids: Vec<RequestId> = self.groups[&g].prefill.iter().copied().collect();
        for r in ids {
            if room == 0 {
                break;
            }
            let q = &self.requests[r.0 as usize];
            let rt = &self.rt[r.0 as usize];
            if rt.stalled_from.is_some() || !rt.admitted {
                continue;
            }
            let open = q.remaining_prefill() - rt.scheduled;
            if open == 0 {
                continue;
            }
            let take = open.min(room);
            pool.push(PrefillItem {
                request: r,
                tokens: take,
                prefix: q.prefill_prefix() + rt.scheduled as u64,
            });
            room -= take;
        }
        if pool.is_empty() {
            return;
        }
        let leaves = if lookahead {
            let cfg = FormulationConfig {
                token_budget: budget,
                min_batch_tokens: self.cfg.scheduler.min_batch_tokens,
                max_recursion_depth: lookahead_depth(size, rounds).min(self.cfg.scheduler.max_recursion_depth),
            };
            lookahead_formulation(&pool, &self.cluster.model.cost, &cfg)
        } else {
            token_count_chunking(&pool, budget)
        };
        for item in &pool {
            self.rt[item.request.0 as usize].scheduled += item.tokens;
        }
        let rt = self.groups.get_mut(&g).expect("group");
        rt.leaves.extend(leaves.into_iter().map(|mb| mb.chunks));
    }

    /// Returns queued leaves' tokens to the pool.
    fn purge_leaves(&mut self, g: GroupId) {
        let leaves: Vec<Vec<Chunk>> = self.groups.get_mut(&g).expect("group").leaves.drain(..).collect();
        for c in leaves.into_iter().flatten() {
            self.rt[c.request_id.0 as usize].scheduled -= c.token_count;
        }
    }

    // ---- pipeline execution --------------------------------------------

    fn try_start(&mut self, g: GroupId, stage: usize) {
        let Some(rt) = self.groups.get_mut(&g) else { return };
        if rt.stage_busy[stage].is_some() {
            return;
        }
        let Some(mb) = rt.stage_queue[stage].pop_front() else { return };
        rt.stage_busy[stage] = Some((mb, self.now));
        let epoch = rt.epoch;
        let layers = self.cluster.groups[&g].stages[stage].len() as f64;
        let frac = layers / self.cluster.model.num_layers as f64;
        let dur = Micros::from_secs_ceil(self.runs[&mb].cost * frac);
        self.q.push(self.now + dur, Ev::StageDone { group: g, epoch, stage });
    }

    fn on_stage_done(&mut self, g: GroupId, epoch: u64, stage: usize) {
        let Some(rt) = self.groups.get_mut(&g) else { return };
        if rt.epoch != epoch {
            return;
        }
        let (mb, start) = rt.stage_busy[stage].take().expect("stage was busy");
        let n = rt.stage_busy.len();
        self.intervals.push(StageInterval {
            group: g,
            stage: stage as u32,
            start,
            end: self.now,
        });
        let rec = self.ev("stage").with("group", g).with("stage", stage).with("mb", mb.0).with("start", start);
        self.log(rec);
        self.try_start(g, stage);
        if stage + 1 < n {
            let grp = &self.cluster.groups[&g];
            let (src, dst) = (grp.members[stage], grp.members[stage + 1]);
            let bytes = self.runs[&mb].tokens * self.cfg.network.activation_bytes_per_token;
            let task = TransferTask::new(TransferKind::Activation, bytes.max(1), Endpoint::Instance(src), Endpoint::Instance(dst), self.now).with_purpose(
                TransferPurpose::Activation {
                    group: g,
                    microbatch: mb,
                    to_stage: stage + 1,
                },
            );
            self.submit(task);
        } else {
            self.complete_mb(mb);
        }
    }

    fn complete_mb(&mut self, mb: MicrobatchId) {
        let run = self.runs.remove(&mb).expect("run");
        let g = run.group;
        for c in &run.chunks {
            let r = c.request_id;
            self.rt[r.0 as usize].inflight -= 1;
            match c.kind {
                ChunkKind::Prefill => {
                    self.rt[r.0 as usize].scheduled -= c.token_count;
                    let now = self.now;
                    let req = &mut self.requests[r.0 as usize];
                    req.advance_prefill(c.token_count);
                    if req.prefill_done() {
                        let first = req.first_token_time.is_none();
                        req.transition(RequestState::Decoding, now);
                        if first {
                            let ttft = (now - req.arrival_time).as_secs_f64();
                            self.ttft_window.push(ttft);
                            let rec = self.ev("first_token").with("id", r);
                            self.log(rec);
                        }
                        self.groups.get_mut(&g).expect("group").prefill.retain(|&x| x != r);
                        if self.requests[r.0 as usize].decode_done() {
                            self.finish_request(g, r);
                        } else {
                            self.groups.get_mut(&g).expect("group").slots[run.slot].decodes.insert(r);
                        }
                    }
                }
                ChunkKind::Decode => {
                    let now = self.now;
                    self.requests[r.0 as usize].emit_token(now);
                    if self.requests[r.0 as usize].decode_done() {
                        self.finish_request(g, r);
                    }
                }
            }
        }
        let rt = self.groups.get_mut(&g).expect("group");
        rt.slots[run.slot].busy = None;
        match rt.hold {
            Hold::Run => self.kick(g),
            Hold::Drain => self.check_drained(),
            Hold::Frozen => {}
        }
    }

    fn finish_request(&mut self, g: GroupId, r: RequestId) {
        self.release_group(g, r);
        for s in &mut self.groups.get_mut(&g).expect("group").slots {
            s.decodes.remove(&r);
        }
        let now = self.now;
        let req = &mut self.requests[r.0 as usize];
        req.transition(RequestState::Finished, now);
        let mut rec = EventRecord::new(now, "finish")
            .with("id", r)
            .with("arrival", req.arrival_time)
            .with("first_token", req.first_token_time.expect("prefilled"))
            .with("n", req.token_emit_times.len());
        if let (Some(a), Some(b)) = (req.token_emit_times.first(), req.token_emit_times.last()) {
            rec = rec.with("first_emit", a).with("last_emit", b);
        }
        self.log(rec);
        self.finished += 1;
    }

    // ---- network ----------------------------------------------------------

    fn submit(&mut self, task: TransferTask) {
        let (_, started) = self.network.submit(task, self.now);
        self.schedule_started(started);
    }

    fn schedule_started(&mut self, started: Option<Started>) {
        if let Some(s) = started {
            self.q.push(s.finish, Ev::TransferDone(s.link));
        }
    }

    fn on_transfer_done(&mut self, link: LinkKey) {
        let (done, next) = self.network.complete(link, self.now);
        self.schedule_started(next);
        match done.purpose {
            TransferPurpose::Activation { group, microbatch, to_stage } => {
                if self.runs.contains_key(&microbatch) && self.groups.contains_key(&group) {
                    self.groups.get_mut(&group).expect("group").stage_queue[to_stage].push_back(microbatch);
                    self.try_start(group, to_stage);
                }
            }
            TransferPurpose::KvExchange { request } => self.on_exchange_chunk(request),
            TransferPurpose::Restore { target, layers } => self.on_restore_chunk(target, layers),
            TransferPurpose::SwapOut { request } => self.on_swap_out_done(request),
            TransferPurpose::SwapIn { request } => self.on_swap_in_done(request),
            TransferPurpose::Migrate { request } => self.on_migrate_done(request),
            TransferPurpose::Unspecified => {}
        }
    }

    // ---- OOM handling and baselines -----------------------------------

    /// Handles a failed decode allocation for `r`. Returns true if the step
    /// can proceed (memory was found).
    fn on_decode_oom(&mut self, g: GroupId, r: RequestId) -> bool {
        match self.cfg.policy {
            Policy::KunServe => {
                if !self.rt[r.0 as usize].oom {
                    self.rt[r.0 as usize].oom = true;
                    let rec = self.ev("oom").with("id", r).with("group", g);
                    self.log(rec);
                }
                if self.op.is_none() && !self.overload_queued {
                    self.overload_queued = true;
                    self.q.push(self.now, Ev::Overload);
                }
                false
            }
            Policy::Recompute | Policy::Migrate => self.preempt_for(g, r),
            Policy::Swap => {
                if !self.groups[&g].swap_out_in_flight {
                    if let Some(v) = self.victim(g) {
                        self.swap_out(g, v);
                    }
                }
                false
            }
        }
    }

    /// Newest request in `g` holding KVCache that can be moved right now.
    fn victim(&self, g: GroupId) -> Option<RequestId> {
        let rt = &self.groups[&g];
        rt.slots
            .iter()
            .flat_map(|s| s.decodes.iter())
            .chain(rt.prefill.iter())
            .copied()
            .filter(|r| {
                let x = &self.rt[r.0 as usize];
                x.inflight == 0 && x.scheduled == 0 && x.stalled_from.is_none() && x.admitted
            })
            .max()
    }

    /// Evicts the newest requests until `r` gets its decode slot.
    fn preempt_for(&mut self, g: GroupId, r: RequestId) -> bool {
        loop {
            let Some(v) = self.victim(g) else { return false };
            self.evict(g, v);
            if v == r {
                return false;
            }
            if self.alloc_group(g, r, 1) {
                return true;
            }
        }
    }

    fn evict(&mut self, g: GroupId, v: RequestId) {
        self.release_group(g, v);
        let rt = self.groups.get_mut(&g).expect("group");
        for s in &mut rt.slots {
            s.decodes.remove(&v);
        }
        rt.prefill.retain(|&x| x != v);
        rt.waiting.push_front(v);
        let x = &mut self.rt[v.0 as usize];
        x.admitted = false;
        x.oom = false;
        self.requests[v.0 as usize].evict();
        self.stats.evictions += 1;
        let rec = self.ev("evict").with("id", v).with("group", g);
        self.log(rec);
    }

    fn swap_out(&mut self, g: GroupId, v: RequestId) {
        let home = self.members(g)[0];
        let rt = self.groups.get_mut(&g).expect("group");
        rt.swap_out_in_flight = true;
        for s in &mut rt.slots {
            s.decodes.remove(&v);
        }
        rt.prefill.retain(|&x| x != v);
        let prev = self.requests[v.0 as usize].state;
        self.rt[v.0 as usize].stalled_from = Some(prev);
        let now = self.now;
        self.requests[v.0 as usize].transition(RequestState::Stalled, now);
        let bytes = self.cluster.model.kv_bytes(self.materialized(v), self.cluster.model.num_layers);
        let task = TransferTask::new(TransferKind::KvCacheChunk, bytes.max(1), Endpoint::Instance(home), Endpoint::Host(home), self.now)
            .with_purpose(TransferPurpose::SwapOut { request: v });
        self.submit(task);
        self.stats.swaps += 1;
        let rec = self.ev("swap_out").with("id", v).with("bytes", bytes);
        self.log(rec);
    }

    fn on_swap_out_done(&mut self, v: RequestId) {
        let g = self.rt[v.0 as usize].group.expect("dispatched");
        let tokens = self.release_group(g, v);
        self.rt[v.0 as usize].swapped_tokens = tokens;
        let rt = self.groups.get_mut(&g).expect("group");
        rt.swap_out_in_flight = false;
        // oldest first when coming back
        let pos = rt.swapped.iter().position(|&x| x > v).unwrap_or(rt.swapped.len());
        rt.swapped.insert(pos, v);
        self.kick(g);
    }

    fn on_swap_in_done(&mut self, v: RequestId) {
        let g = self.rt[v.0 as usize].group.expect("dispatched");
        self.unstall(g, v);
        self.kick(g);
    }

    /// Returns a stalled request to its previous state.
    fn unstall(&mut self, g: GroupId, r: RequestId) {
        let prev = self.rt[r.0 as usize].stalled_from.take().expect("stalled");
        let now = self.now;
        self.requests[r.0 as usize].transition(prev, now);
        if prev == RequestState::Decoding {
            let rt = self.groups.get_mut(&g).expect("group");
            let slot = (0..rt.slots.len()).min_by_key(|&s| (rt.slots[s].decodes.len(), s)).expect("slots");
            rt.slots[slot].decodes.insert(r);
        } else {
            let rt = self.groups.get_mut(&g).expect("group");
            if !rt.prefill.contains(&r) {
                let pos = rt.prefill.iter().position(|&x| x > r).unwrap_or(rt.prefill.len());
                rt.prefill.insert(pos, r);
            }
        }
    }

    /// Moves the newest request off an overloaded instance when another one
    /// has room for it.
    fn migrate_tick(&mut self) {
        let gs: Vec<GroupId> = self.cluster.groups.keys().copied().collect();
        for g in gs {
            if self.groups[&g].migrating || self.head_fits(g) {
                continue;
            }
            let Some(v) = self.victim(g) else { continue };
            if self.requests[v.0 as usize].state != RequestState::Decoding {
                continue;
            }
            let tokens = self.allocated_tokens(g, v);
            let dest = self
                .cluster
                .groups
                .keys()
                .copied()
                .filter(|&d| d != g)
                .max_by_key(|&d| (self.group_free_tokens(d), std::cmp::Reverse(d)));
            let Some(d) = dest else { continue };
            if self.group_free_tokens(d) < tokens + 1 + self.reserve_tokens(d) {
                continue;
            }
            if !self.alloc_group(d, v, tokens) {
                continue;
            }
            let rt = self.groups.get_mut(&g).expect("group");
            rt.migrating = true;
            for s in &mut rt.slots {
                s.decodes.remove(&v);
            }
            self.rt[v.0 as usize].stalled_from = Some(RequestState::Decoding);
            let now = self.now;
            self.requests[v.0 as usize].transition(RequestState::Stalled, now);
            let (src, dst) = (self.members(g)[0], self.members(d)[0]);
            let bytes = self.cluster.model.kv_bytes(self.materialized(v), self.cluster.model.num_layers);
            let task = TransferTask::new(TransferKind::KvCacheChunk, bytes.max(1), Endpoint::Instance(src), Endpoint::Instance(dst), self.now)
                .with_purpose(TransferPurpose::Migrate { request: v });
            self.submit(task);
            self.stats.migrations += 1;
            let rec = self.ev("migrate").with("id", v).with("from", g).with("to", d).with("bytes", bytes);
            self.log(rec);
        }
    }

    fn on_migrate_done(&mut self, v: RequestId) {
        let g = self.rt[v.0 as usize].group.expect("dispatched");
        let dest = self
            .cluster
            .groups
            .keys()
            .copied()
            .find(|&d| d != g && self.allocated_tokens(d, v) > 0)
            .expect("destination holds the allocation");
        self.release_group(g, v);
        self.groups.get_mut(&g).expect("group").migrating = false;
        self.rt[v.0 as usize].group = Some(dest);
        self.requests[v.0 as usize].home_instance = Some(self.members(dest)[0]);
        self.unstall(dest, v);
        self.kick(g);
        self.kick(dest);
    }

    // ---- monitor ------------------------------------------------------------

    fn on_tick(&mut self) {
        self.ticks += 1;
        let gs: Vec<GroupId> = self.cluster.groups.keys().copied().collect();
        for &g in &gs {
            let blocked = !self.groups[&g].waiting.is_empty() && !self.head_fits(g);
            let rt = self.groups.get_mut(&g).expect("group");
            rt.blocked_ticks = if blocked { rt.blocked_ticks + 1 } else { 0 };
        }
        self.process_faults();
        match self.cfg.policy {
            Policy::KunServe if self.op.is_none() => {
                let debounce = self.cfg.monitor.debounce_ticks.max(1);
                let blocked = gs.iter().any(|g| self.groups[g].blocked_ticks >= debounce);
                let oom = self.rt.iter().any(|x| x.oom);
                if blocked || oom {
                    self.on_overload();
                } else {
                    self.in_fallback = false;
                    self.restore_check();
                }
            }
            Policy::Migrate => self.migrate_tick(),
            _ => {}
        }
        self.autoscale_check();
        let per_window = (1_000 / self.cfg.monitor.tick_ms).max(1);
        if self.ticks % per_window == 0 {
            self.sample_timeline();
        }
        for g in gs {
            self.kick(g);
        }
        if !self.done() {
            let next = self.now + Micros::from_millis(self.cfg.monitor.tick_ms);
            self.q.push(next, Ev::Tick);
        }
    }

    fn sample_timeline(&mut self) {
        let cap = self.kv_capacity_bytes();
        let occupancy = if cap == 0 { 0.0 } else { self.used_kv_bytes() as f64 / cap as f64 };
        let queued = self.groups.values().map(|g| g.waiting.len()).sum();
        let mean_ttft = if self.ttft_window.is_empty() {
            None
        } else {
            Some(self.ttft_window.iter().sum::<f64>() / self.ttft_window.len() as f64)
        };
        self.ttft_window.clear();
        self.timeline.push(TimelineRow {
            time_s: self.now.as_secs_f64(),
            occupancy,
            queued,
            mean_ttft,
            groups: self.cluster.groups.len(),
            drop_active: self.drop_active(),
        });
    }

    fn autoscale_check(&mut self) {
        if !self.cfg.autoscale.enabled {
            return;
        }
        let cap = self.kv_capacity_bytes();
        let occ = self.used_kv_bytes() as f64 / cap.max(1) as f64;
        if !(self.drop_active() && occ > self.cfg.autoscale.occupancy) {
            self.hot_since = None;
            return;
        }
        let since = *self.hot_since.get_or_insert(self.now);
        if self.now - since >= Micros::from_secs_f64(self.cfg.autoscale.window_s) {
            self.hot_since = None;
            self.autoscale("occupancy");
        }
    }

    fn autoscale(&mut self, reason: &str) {
        self.stats.autoscale_events += 1;
        let rec = self.ev("autoscale").with("reason", reason);
        self.log(rec);
        if self.cfg.autoscale.enabled && self.cfg.autoscale.add_instance && !self.scaling {
            self.scaling = true;
            let id = InstanceId(self.cluster.instances.len() as u32);
            let at = self.now + Micros::from_secs_f64(self.cfg.autoscale.cold_start_s);
            self.q.push(at, Ev::InstanceReady(id));
        }
    }

    fn on_instance_ready(&mut self, id: InstanceId) {
        self.scaling = false;
        let c = &self.cfg.cluster;
        let inst = Instance::new(id, &self.cluster.model, c.hbm_bytes, c.reserve_bytes, Micros(self.cfg.memory.map_latency_us), c.bandwidth)
            .expect("validated layout");
        self.original_kv_capacity += inst.kv.capacity_bytes();
        self.cluster.instances.insert(id, inst);
        let g = GroupId(id.0);
        self.cluster.groups.insert(g, Group::single(g, id, self.cluster.model.num_layers));
        let epoch = self.bump_epoch();
        self.groups.insert(g, GroupRt::new(epoch, 1));
        let rec = self.ev("scale_up").with("instance", id);
        self.log(rec);
        self.kick(g);
    }

    fn bump_epoch(&mut self) -> u64 {
        self.next_epoch += 1;
        self.next_epoch
    }

    // ---- drop -------------------------------------------------------------

    fn on_overload(&mut self) {
        // shortfall per group: a token needs room on every member, and free
        // memory in other groups does not help
        let mut demand = 0;
        for (&g, rt) in &self.groups {
            let waiting = rt.waiting.iter().map(|r| &self.requests[r.0 as usize]);
            let oom_tokens = self.rt.iter().filter(|x| x.oom && x.group == Some(g)).count() as u64;
            let free = self.group_free_tokens(g) * self.cluster.model.kv_bytes_per_token;
            demand += compute_demand(waiting, oom_tokens, &self.cluster.model, free);
        }
        let free = self.cluster.free_kv_bytes();
        if demand == 0 {
            return;
        }
        let rec = self.ev("overload").with("demand", demand).with("free", free);
        self.log(rec);
        let groups: Vec<Group> = self.cluster.groups.values().cloned().collect();
        let mut plan = plan_drop(&groups, demand, &self.cluster.model);
        if plan.fallback {
            if !self.in_fallback {
                self.in_fallback = true;
                self.stats.fallbacks += 1;
                let rec = self.ev("fallback").with("merges", plan.merges.len());
                self.log(rec);
                self.autoscale("fallback");
            }
            // recompute the requests that cannot grow
            let stuck: Vec<RequestId> = (0..self.rt.len()).filter(|&i| self.rt[i].oom).map(|i| RequestId(i as u64)).collect();
            for r in stuck {
                let g = self.rt[r.0 as usize].group.expect("dispatched");
                if self.rt[r.0 as usize].inflight == 0 && self.rt[r.0 as usize].scheduled == 0 {
                    self.evict(g, r);
                }
            }
            plan.fallback = false;
        }
        if plan.merges.is_empty() {
            return;
        }
        let involved: BTreeSet<GroupId> = plan
            .merges
            .iter()
            .flat_map(|m| [m.group_a, m.group_b])
            .filter(|g| self.groups.contains_key(g))
            .collect();
        for &g in &involved {
            self.groups.get_mut(&g).expect("group").hold = Hold::Drain;
            self.purge_leaves(g);
        }
        self.op = Some(OpStage::DropDrain { plan, groups: involved });
        self.check_drained();
    }

    fn check_drained(&mut self) {
        match &self.op {
            Some(OpStage::DropDrain { groups, .. }) => {
                if groups.iter().all(|g| self.groups[g].drained()) {
                    self.apply_drop();
                }
            }
            Some(OpStage::RestoreDrain { groups }) => {
                if groups.iter().all(|g| self.groups[g].drained()) {
                    self.dissolve();
                }
            }
            _ => {}
        }
    }

    fn apply_drop(&mut self) {
        let Some(OpStage::DropDrain { plan, groups: old }) = self.op.take() else { unreachable!() };
        // every request of the old groups keeps its current KVCache layout
        let mut layouts: BTreeMap<RequestId, Group> = BTreeMap::new();
        let mut members_of_old: BTreeMap<GroupId, Vec<InstanceId>> = BTreeMap::new();
        for g in &old {
            members_of_old.insert(*g, self.members(*g));
        }
        for (i, x) in self.rt.iter().enumerate() {
            if let Some(g) = x.group {
                if old.contains(&g) && self.requests[i].state != RequestState::Finished {
                    layouts.insert(RequestId(i as u64), self.cluster.groups[&g].clone());
                }
            }
        }
        let applied = apply_plan(&mut self.cluster, &plan).expect("plan built from the current topology");
        self.stats.drop_events += 1;
        let rec = self
            .ev("drop_plan")
            .with("merges", plan.merges.len())
            .with("freed", applied.freed_bytes)
            .with("remap_us", applied.remap_delay());
        self.log(rec);
        for m in &plan.merges {
            let stages: Vec<String> = m.stages.iter().map(|(i, r)| format!("{}:{}-{}", i, r.start, r.end)).collect();
            let rec = self.ev("merge").with("a", m.group_a).with("b", m.group_b).with("stages", stages.join(","));
            self.log(rec);
        }
        // runtime state of the merged groups
        let mut old_rts: BTreeMap<GroupId, GroupRt> = old.iter().map(|g| (*g, self.groups.remove(g).expect("group"))).collect();
        let new_groups: Vec<GroupId> = self
            .cluster
            .groups
            .iter()
            .filter(|(_, grp)| grp.members.iter().any(|m| members_of_old.values().any(|v| v.contains(m))))
            .map(|(id, _)| *id)
            .collect();
        for &ng in &new_groups {
            let grp = self.cluster.groups[&ng].clone();
            let epoch = self.bump_epoch();
            let mut rt = GroupRt::new(epoch, grp.size());
            rt.hold = Hold::Frozen;
            let mut waiting = Vec::new();
            let mut prefill = Vec::new();
            let from: Vec<GroupId> = members_of_old
                .iter()
                .filter(|(_, ms)| ms.iter().all(|m| grp.members.contains(m)))
                .map(|(g, _)| *g)
                .collect();
            for g in &from {
                let o = old_rts.remove(g).expect("old group");
                waiting.extend(o.waiting);
                prefill.extend(o.prefill);
            }
            waiting.sort();
            prefill.sort();
            rt.waiting = waiting.into();
            rt.prefill = prefill.into();
            self.groups.insert(ng, rt);
            for (i, x) in self.rt.iter_mut().enumerate() {
                if x.group.is_some_and(|g| from.contains(&g)) {
                    x.group = Some(ng);
                    let _ = i;
                }
            }
        }
        // KVCache accounting follows the new stage maps
        for (r, layout) in &layouts {
            let ng = self.rt[r.0 as usize].group.expect("dispatched");
            let tokens = layout
                .members
                .iter()
                .map(|m| self.cluster.instances.get_mut(m).expect("member").kv.release(*r))
                .max()
                .unwrap_or(0);
            if tokens > 0 {
                for m in self.members(ng) {
                    self.cluster.instances.get_mut(&m).expect("member").kv.force(*r, tokens);
                }
            }
        }
        self.op = Some(OpStage::DropRemap {
            groups: new_groups,
            layouts,
        });
        self.q.push(self.now + applied.remap_delay(), Ev::RemapDone);
    }

    fn exchange_chunk_bytes(&self, g: GroupId) -> u64 {
        let size = self.cluster.groups[&g].size().max(1) as f64;
        let stage = chunk_cost(self.cfg.scheduler.token_budget as u64, 0, &self.cluster.model.cost) / size;
        exchange_chunk_bytes(stage, self.cfg.cluster.bandwidth)
    }

    fn on_remap_done(&mut self) {
        let Some(OpStage::DropRemap { groups, layouts }) = self.op.take() else { return };
        let rec = self.ev("remap_done");
        self.log(rec);
        let mut requests = 0u64;
        let mut bytes = 0u64;
        for &g in &groups {
            let grp = self.cluster.groups[&g].clone();
            let chunk = self.exchange_chunk_bytes(g);
            for (r, layout) in &layouts {
                if self.rt[r.0 as usize].group != Some(g) {
                    continue;
                }
                let n = self.stall_for_exchange(&grp, *r, layout, chunk);
                if n > 0 {
                    requests += 1;
                    bytes += n;
                }
            }
            self.groups.get_mut(&g).expect("group").hold = Hold::Run;
        }
        let rec = self.ev("exchange").with("requests", requests).with("bytes", bytes);
        self.log(rec);
        self.op = Some(OpStage::Exchange { kind: "drop" });
        self.check_exchange_done();
        for g in groups {
            self.kick(g);
        }
    }

    /// Queues the KVCache moves for `r`; returns the bytes moved.
    fn stall_for_exchange(&mut self, target: &Group, r: RequestId, layout: &Group, chunk: u64) -> u64 {
        let tokens = self.materialized(r);
        let ongoing = [OngoingKv {
            request: r,
            tokens,
            layout,
        }];
        let tasks = plan_exchange(target, &ongoing, &self.cluster.model, chunk, self.now);
        if tasks.is_empty() {
            return 0;
        }
        let bytes = tasks.iter().map(|t| t.bytes).sum();
        let x = &mut self.rt[r.0 as usize];
        x.pending_chunks += tasks.len() as u32;
        if x.stalled_from.is_none() {
            let prev = self.requests[r.0 as usize].state;
            x.stalled_from = Some(prev);
            let now = self.now;
            self.requests[r.0 as usize].transition(RequestState::Stalled, now);
            let rt = self.groups.get_mut(&target.id).expect("group");
            for s in &mut rt.slots {
                s.decodes.remove(&r);
            }
        }
        for t in tasks {
            self.submit(t);
        }
        bytes
    }

    fn on_exchange_chunk(&mut self, r: RequestId) {
        let x = &mut self.rt[r.0 as usize];
        x.pending_chunks -= 1;
        if x.pending_chunks == 0 {
            let g = x.group.expect("dispatched");
            self.unstall(g, r);
            self.kick(g);
        }
        self.check_exchange_done();
    }

    fn check_exchange_done(&mut self) {
        let Some(OpStage::Exchange { kind }) = self.op else { return };
        if self.rt.iter().any(|x| x.pending_chunks > 0) {
            return;
        }
        self.op = None;
        let rec = self.ev("exchange_done").with("after", kind);
        self.log(rec);
        if kind == "restore" {
            self.stats.restores += 1;
            let rec = self.ev("restore_done").with("groups", self.cluster.groups.len());
            self.log(rec);
        }
        self.process_faults();
        let gs: Vec<GroupId> = self.cluster.groups.keys().copied().collect();
        for g in gs {
            self.kick(g);
        }
    }

    // ---- restore ------------------------------------------------------------

    fn restore_check(&mut self) {
        if !self.drop_active() {
            return;
        }
        let used = self.used_kv_bytes();
        if (used as f64) >= self.cfg.monitor.restore_threshold * self.original_kv_capacity as f64 {
            return;
        }
        let live: BTreeSet<InstanceId> = self.cluster.instances.keys().filter(|i| !self.dead.contains(i)).copied().collect();
        let groups: Vec<GroupId> = self
            .cluster
            .groups
            .iter()
            .filter(|(_, g)| g.size() > 1)
            .filter(|(_, g)| g.members.iter().all(|m| self.cluster.instances[m].check_full_restore(&self.cluster.model).is_ok()))
            .filter(|(_, g)| self.fits_dissolved(g))
            .map(|(id, _)| *id)
            .collect();
        if groups.is_empty() {
            return;
        }
        self.start_restore(groups, &live, "low_usage");
    }

    /// Whether the group's KVCache fits its members once each holds every
    /// layer, keeping the admission watermark free.
    fn fits_dissolved(&self, g: &Group) -> bool {
        let model = &self.cluster.model;
        let tokens = self.cluster.instances[&g.members[0]].kv.used_tokens();
        let room: u64 = g
            .members
            .iter()
            .map(|m| self.cluster.instances[m].segments.kvcache_virtual_extent())
            .sum::<u64>()
            .saturating_sub((g.size() as u64 - 1) * model.param_bytes());
        let need = model.kv_bytes(tokens, model.num_layers) as f64;
        need <= room as f64 * (1.0 - self.cfg.scheduler.watermark)
    }

    fn start_restore(&mut self, groups: Vec<GroupId>, live: &BTreeSet<InstanceId>, reason: &'static str) {
        let mut jobs = BTreeMap::new();
        let mut total = 0u64;
        for g in groups {
            let grp = self.cluster.groups[&g].clone();
            let chunk = self.exchange_chunk_bytes(g);
            let mut chunks = 0u32;
            let mut shards = Vec::new();
            for s in restore_shards(&grp, live, self.cluster.model.num_layers) {
                let model = self.cluster.model.clone();
                let inst = self.cluster.instances.get_mut(&s.target).expect("member");
                let task = inst.restore_layers(s.layers.clone(), s.source, &model, self.now).expect("restore checked");
                total += task.bytes;
                let parts = task
                    .with_purpose(TransferPurpose::Restore {
                        target: s.target,
                        layers: s.layers.clone(),
                    })
                    .into_chunks(chunk);
                chunks += parts.len() as u32;
                for p in parts {
                    self.submit(p);
                }
                shards.push((s.target, s.layers));
            }
            jobs.insert(g, (chunks, shards));
        }
        let rec = self.ev("restore_start").with("groups", jobs.len()).with("bytes", total).with("reason", reason);
        self.log(rec);
        self.op = Some(OpStage::RestoreTransfer { groups: jobs });
        self.after_restore_chunk();
    }

    fn on_restore_chunk(&mut self, target: InstanceId, _layers: std::ops::Range<u32>) {
        if let Some(OpStage::RestoreTransfer { groups, .. }) = &mut self.op {
            for (left, shards) in groups.values_mut() {
                if shards.iter().any(|(t, _)| *t == target) && *left > 0 {
                    *left -= 1;
                    break;
                }
            }
        }
        self.after_restore_chunk();
    }

    fn after_restore_chunk(&mut self) {
        let Some(OpStage::RestoreTransfer { groups, .. }) = &self.op else { return };
        if groups.values().any(|(left, _)| *left > 0) {
            return;
        }
        let Some(OpStage::RestoreTransfer { groups, .. }) = self.op.take() else { unreachable!() };
        let model = self.cluster.model.clone();
        let mut ids = BTreeSet::new();
        for (g, (_, shards)) in groups {
            for (t, layers) in shards {
                self.cluster.instances.get_mut(&t).expect("member").finish_restore(layers, &model);
            }
            if let Some(rt) = self.groups.get_mut(&g) {
                rt.hold = Hold::Drain;
                ids.insert(g);
            }
        }
        for &g in &ids {
            self.purge_leaves(g);
        }
        self.op = Some(OpStage::RestoreDrain { groups: ids });
        self.check_drained();
    }

    /// Splits drained groups back into single instances.
    fn dissolve(&mut self) {
        let Some(OpStage::RestoreDrain { groups }) = self.op.take() else { unreachable!() };
        let model = self.cluster.model.clone();
        let mut layouts: Vec<(RequestId, Group, InstanceId)> = Vec::new();
        let mut redispatch: Vec<RequestId> = Vec::new();
        for g in groups {
            let old = self.cluster.groups.remove(&g).expect("group");
            let ort = self.groups.remove(&g).expect("group");
            let live: Vec<InstanceId> = old.members.iter().copied().filter(|m| !self.dead.contains(m)).collect();
            for &m in &live {
                let ng = GroupId(m.0);
                self.cluster.groups.insert(ng, Group::single(ng, m, model.num_layers));
                self.cluster.instances.get_mut(&m).expect("member").group_id = ng;
                let epoch = self.bump_epoch();
                self.groups.insert(ng, GroupRt::new(epoch, 1));
            }
            // requests with KVCache: greedy balanced homes, oldest first
            let mut holders: Vec<(RequestId, u64)> = self.cluster.instances[&old.members[0]].kv.requests().collect();
            holders.sort();
            for m in &old.members {
                let inst = self.cluster.instances.get_mut(m).expect("member");
                for (r, _) in &holders {
                    inst.kv.release(*r);
                }
                inst.set_kv_layers(model.num_layers, &model);
            }
            for (r, tokens) in holders {
                let home = *live
                    .iter()
                    .max_by_key(|m| (self.cluster.instances[m].kv.free_tokens(), std::cmp::Reverse(**m)))
                    .expect("live member");
                self.cluster.instances.get_mut(&home).expect("member").kv.force(r, tokens);
                self.rt[r.0 as usize].group = Some(GroupId(home.0));
                layouts.push((r, old.clone(), home));
            }
            let mut prefill: Vec<RequestId> = ort.prefill.into_iter().collect();
            prefill.sort();
            for r in prefill {
                let ng = self.rt[r.0 as usize].group.expect("dispatched");
                self.groups.get_mut(&ng).expect("group").prefill.push_back(r);
            }
            redispatch.extend(ort.waiting);
            let rec = self.ev("dissolve").with("group", g).with("members", live.len());
            self.log(rec);
        }
        redispatch.sort();
        for r in redispatch {
            let g = self.dispatch(r);
            self.rt[r.0 as usize].group = Some(g);
            self.groups.get_mut(&g).expect("group").waiting.push_back(r);
        }
        let mut bytes = 0;
        for (r, layout, home) in layouts {
            let target = self.cluster.groups[&GroupId(home.0)].clone();
            let chunk = self.exchange_chunk_bytes(target.id);
            let was_stalled = self.rt[r.0 as usize].stalled_from.is_some();
            let moved = self.stall_for_exchange(&target, r, &layout, chunk);
            bytes += moved;
            if moved == 0 && !was_stalled && self.requests[r.0 as usize].state == RequestState::Decoding {
                self.groups.get_mut(&target.id).expect("group").slots[0].decodes.insert(r);
            }
        }
        let rec = self.ev("exchange").with("bytes", bytes).with("after", "restore");
        self.log(rec);
        self.op = Some(OpStage::Exchange { kind: "restore" });
        self.check_exchange_done();
        let gs: Vec<GroupId> = self.cluster.groups.keys().copied().collect();
        for g in gs {
            self.kick(g);
        }
    }

    // ---- faults -------------------------------------------------------------

    fn process_faults(&mut self) {
        while self.op.is_none() {
            let Some(i) = self.pending_faults.pop_front() else { return };
            self.apply_fault(i);
        }
    }

    fn apply_fault(&mut self, dead: InstanceId) {
        if self.dead.contains(&dead) || !self.cluster.instances.contains_key(&dead) {
            return;
        }
        self.stats.faults += 1;
        self.dead.insert(dead);
        let g = self.cluster.instances[&dead].group_id;
        let rec = self.ev("fault").with("instance", dead).with("group", g);
        self.log(rec);
        // abandon in-flight work
        let mbs: Vec<MicrobatchId> = self.runs.iter().filter(|(_, r)| r.group == g).map(|(id, _)| *id).collect();
        for mb in mbs {
            let run = self.runs.remove(&mb).expect("run");
            for c in run.chunks {
                let x = &mut self.rt[c.request_id.0 as usize];
                x.inflight -= 1;
                if c.kind == ChunkKind::Prefill {
                    x.scheduled -= c.token_count;
                }
            }
        }
        self.purge_leaves(g);
        let epoch = self.bump_epoch();
        let size = self.cluster.groups[&g].size();
        let rt = self.groups.get_mut(&g).expect("group");
        let waiting: Vec<RequestId> = rt.waiting.drain(..).collect();
        // swapped requests are in `affected` and are recomputed like the rest
        rt.swapped.clear();
        *rt = GroupRt::new(epoch, size);
        // every request that had state here is recomputed elsewhere
        let mut affected: Vec<RequestId> = (0..self.rt.len())
            .filter(|&i| self.rt[i].group == Some(g) && self.requests[i].state != RequestState::Finished)
            .map(|i| RequestId(i as u64))
            .collect();
        affected.retain(|r| !waiting.contains(r));
        for r in &affected {
            self.release_group(g, *r);
            let x = &mut self.rt[r.0 as usize];
            x.admitted = false;
            x.oom = false;
            x.stalled_from = None;
            x.pending_chunks = 0;
            let req = &mut self.requests[r.0 as usize];
            if req.state != RequestState::Queued {
                req.evict();
                self.stats.evictions += 1;
                let rec = self.ev("evict").with("id", r).with("group", g).with("reason", "fault");
                self.log(rec);
            }
        }
        let grp = self.cluster.groups[&g].clone();
        let survivors: Vec<InstanceId> = grp.members.iter().copied().filter(|m| *m != dead).collect();
        let mut requeue: Vec<RequestId> = affected.into_iter().chain(waiting).collect();
        requeue.sort();
        if survivors.is_empty() {
            self.cluster.groups.remove(&g);
            self.groups.remove(&g);
        } else {
            let live: BTreeSet<InstanceId> = self.cluster.instances.keys().filter(|i| !self.dead.contains(i)).copied().collect();
            // the group keeps serving nothing until its survivors are whole
            self.groups.get_mut(&g).expect("group").hold = Hold::Drain;
            self.start_restore(vec![g], &live, "fault");
        }
        if self.cluster.groups.is_empty() {
            return;
        }
        for r in requeue {
            let target = if self.cluster.groups.len() > usize::from(!survivors.is_empty()) {
                self.dispatch_excluding(g)
            } else {
                g
            };
            self.rt[r.0 as usize].group = Some(target);
            self.groups.get_mut(&target).expect("group").waiting.push_back(r);
        }
        let gs: Vec<GroupId> = self.cluster.groups.keys().copied().collect();
        for g in gs {
            self.kick(g);
        }
    }

    fn dispatch_excluding(&self, skip: GroupId) -> GroupId {
        let mut best: Option<(i128, GroupId)> = None;
        for &g in self.cluster.groups.keys().filter(|&&g| g != skip) {
            let score = self.group_free_tokens(g) as i128 - self.queued_tokens(g) as i128;
            if best.is_none_or(|(s, _)| score > s) {
                best = Some((score, g));
            }
        }
        best.map(|b| b.1).unwrap_or(skip)
    }
}
