//! Inter-instance network model and the transfer coordinator.
//!
//! Every directed endpoint pair is a serialized link. KVCache and parameter
//! transfers are split into chunks sized to roughly one pipeline-stage
//! execution; a link only picks its next task at a chunk boundary, and
//! pending activations always go first.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::ops::Range;

use crate::types::{Group, GroupId, InstanceId, MicrobatchId, Micros, ModelSpec, RequestId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Endpoint {
    Instance(InstanceId),
    /// Host DRAM attached to an instance (swap space, parameter replica).
    Host(InstanceId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TransferKind {
    Activation,
    KvCacheChunk,
    ParamShard,
}

/// What a transfer is for, so its completion can be routed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TransferPurpose {
    Unspecified,
    Activation { group: GroupId, microbatch: MicrobatchId, to_stage: usize },
    KvExchange { request: RequestId },
    Restore { target: InstanceId, layers: Range<u32> },
    SwapOut { request: RequestId },
    SwapIn { request: RequestId },
    Migrate { request: RequestId },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransferTask {
    pub id: u64,
    pub kind: TransferKind,
    pub bytes: u64,
    pub src: Endpoint,
    pub dst: Endpoint,
    pub enqueue_time: Micros,
    pub purpose: TransferPurpose,
}

impl TransferTask {
    pub fn new(kind: TransferKind, bytes: u64, src: Endpoint, dst: Endpoint, enqueue_time: Micros) -> TransferTask {
        TransferTask {
            id: 0,
            kind,
            bytes,
            src,
            dst,
            enqueue_time,
            purpose: TransferPurpose::Unspecified,
        }
    }

    pub fn with_purpose(mut self, purpose: TransferPurpose) -> TransferTask {
        self.purpose = purpose;
        self
    }

    pub fn link(&self) -> LinkKey {
        LinkKey {
            src: self.src,
            dst: self.dst,
        }
    }

    /// Splits into chunks of at most `chunk_bytes`.
    pub fn into_chunks(self, chunk_bytes: u64) -> Vec<TransferTask> {
        let chunk_bytes = chunk_bytes.max(1);
        if self.kind == TransferKind::Activation || self.bytes <= chunk_bytes {
            return vec![self];
        }
        let mut out = Vec::new();
        let mut left = self.bytes;
        while left > 0 {
            let b = left.min(chunk_bytes);
            out.push(TransferTask { bytes: b, ..self.clone() });
            left -= b;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LinkKey {
    pub src: Endpoint,
    pub dst: Endpoint,
}

#[derive(Clone, Debug)]
pub struct LinkModel {
    /// Bytes per second.
    pub bandwidth: f64,
    pub base_latency: Micros,
    pub busy_until: Micros,
    current: Option<TransferTask>,
    activations: VecDeque<TransferTask>,
    bulk: VecDeque<TransferTask>,
}

impl LinkModel {
    pub fn new(bandwidth: f64, base_latency: Micros) -> LinkModel {
        assert!(bandwidth > 0.0, "link bandwidth must be positive");
        LinkModel {
            bandwidth,
            base_latency,
            busy_until: Micros::ZERO,
            current: None,
            activations: VecDeque::new(),
            bulk: VecDeque::new(),
        }
    }

    pub fn transfer_time(&self, bytes: u64) -> Micros {
        self.base_latency + Micros::from_secs_ceil(bytes as f64 / self.bandwidth)
    }

    pub fn enqueue(&mut self, task: TransferTask) {
        match task.kind {
            TransferKind::Activation => self.activations.push_back(task),
            _ => self.bulk.push_back(task),
        }
    }

    pub fn is_idle(&self) -> bool {
        self.current.is_none()
    }

    pub fn pending(&self) -> usize {
        self.activations.len() + self.bulk.len()
    }

    pub fn current(&self) -> Option<&TransferTask> {
        self.current.as_ref()
    }

    /// Picks the next task for an idle link: the oldest pending activation,
    /// otherwise the oldest pending chunk.
    pub fn schedule_link(&mut self, now: Micros) -> Option<TransferTask> {
        debug_assert!(self.current.is_none());
        let _ = now;
        self.activations.pop_front().or_else(|| self.bulk.pop_front())
    }

    fn start(&mut self, task: TransferTask, now: Micros) -> Micros {
        let finish = now + self.transfer_time(task.bytes);
        self.busy_until = finish;
        self.current = Some(task);
        finish
    }
}

/// A transfer that just started on a link.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Started {
    pub link: LinkKey,
    pub task_id: u64,
    pub finish: Micros,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetworkParams {
    /// Instance-to-instance bandwidth, bytes per second.
    pub bandwidth: f64,
    pub latency: Micros,
    /// Device-to-host bandwidth, bytes per second.
    pub host_bandwidth: f64,
    pub host_latency: Micros,
}

/// Per-activation queueing record: how long it waited for the link beyond
/// earlier activations, and the longest bulk chunk time on that link.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActivationWait {
    pub blocked_by_bulk: Micros,
    pub chunk_time: Micros,
}

#[derive(Clone, Debug)]
pub struct Network {
    params: NetworkParams,
    links: BTreeMap<LinkKey, LinkModel>,
    next_id: u64,
    last_activation_done: BTreeMap<LinkKey, Micros>,
    max_bulk_time: BTreeMap<LinkKey, Micros>,
    pub activation_waits: Vec<ActivationWait>,
    pub bytes_delivered: BTreeMap<TransferKind, u64>,
}

impl Network {
    pub fn new(params: NetworkParams) -> Network {
        Network {
            params,
            links: BTreeMap::new(),
            next_id: 1,
            last_activation_done: BTreeMap::new(),
            max_bulk_time: BTreeMap::new(),
            activation_waits: Vec::new(),
            bytes_delivered: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> NetworkParams {
        self.params
    }

    pub fn link_mut(&mut self, key: LinkKey) -> &mut LinkModel {
        let params = self.params;
        self.links.entry(key).or_insert_with(|| {
            let host = matches!(key.src, Endpoint::Host(_)) || matches!(key.dst, Endpoint::Host(_));
            if host {
                LinkModel::new(params.host_bandwidth, params.host_latency)
            } else {
                LinkModel::new(params.bandwidth, params.latency)
            }
        })
    }

    pub fn link(&self, key: &LinkKey) -> Option<&LinkModel> {
        self.links.get(key)
    }

    /// Time one `bytes` transfer occupies an instance-to-instance link.
    pub fn instance_transfer_time(&self, bytes: u64) -> Micros {
        self.params.latency + Micros::from_secs_ceil(bytes as f64 / self.params.bandwidth)
    }

    /// Queues a task; starts it right away if its link is idle.
    pub fn submit(&mut self, mut task: TransferTask, now: Micros) -> (u64, Option<Started>) {
        task.id = self.next_id;
        self.next_id += 1;
        task.enqueue_time = now;
        let id = task.id;
        let key = task.link();
        self.link_mut(key).enqueue(task);
        (id, self.kick(key, now))
    }

    fn kick(&mut self, key: LinkKey, now: Micros) -> Option<Started> {
        let link = self.link_mut(key);
        if !link.is_idle() {
            return None;
        }
        let task = link.schedule_link(now)?;
        let id = task.id;
        let kind = task.kind;
        let enqueued = task.enqueue_time;
        let duration = link.transfer_time(task.bytes);
        let finish = link.start(task, now);
        if kind == TransferKind::Activation {
            let after_prev = self.last_activation_done.get(&key).copied().unwrap_or(Micros::ZERO);
            let ready = enqueued.max(after_prev);
            self.activation_waits.push(ActivationWait {
                blocked_by_bulk: now.saturating_sub(ready),
                chunk_time: self.max_bulk_time.get(&key).copied().unwrap_or(Micros::ZERO),
            });
            self.last_activation_done.insert(key, finish);
        } else {
            let m = self.max_bulk_time.entry(key).or_insert(Micros::ZERO);
            *m = (*m).max(duration);
        }
        Some(Started {
            link: key,
            task_id: id,
            finish,
        })
    }

    /// Finishes the running task on `key` and starts the next one, if any.
    pub fn complete(&mut self, key: LinkKey, now: Micros) -> (TransferTask, Option<Started>) {
        let link = self.link_mut(key);
        let done = link.current.take().expect("completion on an idle link");
        debug_assert_eq!(link.busy_until, now);
        *self.bytes_delivered.entry(done.kind).or_insert(0) += done.bytes;
        let next = self.kick(key, now);
        (done, next)
    }

    pub fn idle(&self) -> bool {
        self.links.values().all(|l| l.is_idle() && l.pending() == 0)
    }
}

/// Chunk size for bulk transfers: the bytes a link moves in one pipeline
/// stage execution.
pub fn exchange_chunk_bytes(stage_seconds: f64, bandwidth: f64) -> u64 {
    ((stage_seconds * bandwidth) as u64).max(1)
}

/// Where one request's KVCache lives and how much of it there is.
#[derive(Clone, Debug)]
pub struct OngoingKv<'a> {
    pub request: RequestId,
    pub tokens: u64,
    /// Stage map the KVCache currently follows.
    pub layout: &'a Group,
}

/// KVCache transfers needed so every layer's KVCache sits on the member that
/// executes that layer under `group`.
pub fn plan_exchange(group: &Group, ongoing: &[OngoingKv<'_>], model: &ModelSpec, chunk_bytes: u64, now: Micros) -> Vec<TransferTask> {
    let mut out = Vec::new();
    for req in ongoing {
        if req.tokens == 0 {
            continue;
        }
        // layers per (from, to) pair
        let mut moves: BTreeMap<(InstanceId, InstanceId), u32> = BTreeMap::new();
        for layer in 0..model.num_layers {
            let (Some(from), Some(to)) = (req.layout.holder_of(layer), group.holder_of(layer)) else {
                continue;
            };
            if from != to {
                *moves.entry((from, to)).or_insert(0) += 1;
            }
        }
        for ((from, to), layers) in moves {
            let bytes = model.kv_bytes(req.tokens, layers);
            let task = TransferTask::new(TransferKind::KvCacheChunk, bytes, Endpoint::Instance(from), Endpoint::Instance(to), now)
                .with_purpose(TransferPurpose::KvExchange { request: req.request });
            out.extend(task.into_chunks(chunk_bytes));
        }
    }
    out
}

/// Layers one instance must pull back, and from where.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RestoreShard {
    pub target: InstanceId,
    pub layers: Range<u32>,
    pub source: Endpoint,
}

/// For every live member of `group`, the layer runs it is missing, sourced
/// from the live member that holds them or else from the target's host
/// replica.
pub fn restore_shards(group: &Group, live: &BTreeSet<InstanceId>, num_layers: u32) -> Vec<RestoreShard> {
    let mut out = Vec::new();
    for (i, &target) in group.members.iter().enumerate() {
        if !live.contains(&target) {
            continue;
        }
        let held = &group.stages[i];
        let sources: Vec<Option<Endpoint>> = (0..num_layers)
            .map(|layer| {
                if held.contains(&layer) {
                    return None;
                }
                Some(match group.holder_of(layer) {
                    Some(h) if h != target && live.contains(&h) => Endpoint::Instance(h),
                    _ => Endpoint::Host(target),
                })
            })
            .collect();
        let mut start = 0;
        while start < num_layers {
            let src = sources[start as usize];
            let mut end = start + 1;
            while end < num_layers && sources[end as usize] == src {
                end += 1;
            }
            if let Some(source) = src {
                out.push(RestoreShard {
                    target,
                    layers: start..end,
                    source,
                });
            }
            start = end;
        }
    }
    out
}

/// Chunked parameter transfers for the given shards.
pub fn plan_restore_transfers(shards: &[RestoreShard], model: &ModelSpec, chunk_bytes: u64, now: Micros) -> Vec<TransferTask> {
    shards
        .iter()
        .flat_map(|s| {
            TransferTask::new(
                TransferKind::ParamShard,
                s.layers.len() as u64 * model.bytes_per_layer,
                s.source,
                Endpoint::Instance(s.target),
                now,
            )
            .with_purpose(TransferPurpose::Restore {
                target: s.target,
                layers: s.layers.clone(),
            })
            .into_chunks(chunk_bytes)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::CostCoefficients;

    fn params() -> NetworkParams {
        NetworkParams {
            bandwidth: 1e6,
            latency: Micros(0),
            host_bandwidth: 1e5,
            host_latency: Micros(0),
        }
    }

    fn model() -> ModelSpec {
        ModelSpec {
            num_layers: 8,
            bytes_per_layer: 1_000,
            kv_bytes_per_token: 192_000,
            cost: CostCoefficients::new(0.0, 1e-4, 0.0),
        }
    }

    fn a_b() -> (Endpoint, Endpoint) {
        (Endpoint::Instance(InstanceId(0)), Endpoint::Instance(InstanceId(1)))
    }

    #[test]
    fn activation_overtakes_pending_chunks() {
        let (a, b) = a_b();
        let mut link = LinkModel::new(1e6, Micros(0));
        link.enqueue(TransferTask::new(TransferKind::KvCacheChunk, 10, a, b, Micros(0)));
        link.enqueue(TransferTask::new(TransferKind::Activation, 10, a, b, Micros(1)));
        assert_eq!(link.schedule_link(Micros(2)).unwrap().kind, TransferKind::Activation);
        assert_eq!(link.schedule_link(Micros(2)).unwrap().kind, TransferKind::KvCacheChunk);
    }

    #[test]
    fn bulk_chunks_are_fifo() {
        let (a, b) = a_b();
        let mut link = LinkModel::new(1e6, Micros(0));
        for i in 0..4 {
            link.enqueue(TransferTask::new(TransferKind::KvCacheChunk, 10 + i, a, b, Micros(i)));
        }
        let order: Vec<u64> = std::iter::from_fn(|| link.schedule_link(Micros(9)).map(|t| t.bytes)).collect();
        assert_eq!(order, vec![10, 11, 12, 13]);
    }

    #[test]
    fn activation_mid_chunk_waits_for_chunk_end_only() {
        let (a, b) = a_b();
        let mut net = Network::new(params());
        let (_, started) = net.submit(TransferTask::new(TransferKind::KvCacheChunk, 1_000, a, b, Micros(0)), Micros(0));
        let chunk_end = started.unwrap().finish;
        assert_eq!(chunk_end, Micros(1_000));
        net.submit(TransferTask::new(TransferKind::KvCacheChunk, 1_000, a, b, Micros(0)), Micros(10));
        let (_, none) = net.submit(TransferTask::new(TransferKind::Activation, 10, a, b, Micros(0)), Micros(400));
        assert!(none.is_none());
        let (done, next) = net.complete(LinkKey { src: a, dst: b }, chunk_end);
        assert_eq!(done.kind, TransferKind::KvCacheChunk);
        let next = next.unwrap();
        assert_eq!(net.link(&next.link).unwrap().current().unwrap().kind, TransferKind::Activation);
        assert_eq!(net.activation_waits[0].blocked_by_bulk, Micros(600));
    }

    #[test]
    fn exchange_bytes_for_half_relocated_request() {
        let m = model();
        let old = Group::single(GroupId(0), InstanceId(0), 8);
        let new = Group {
            id: GroupId(0),
            members: vec![InstanceId(0), InstanceId(1)],
            stages: vec![0..4, 4..8],
        };
        let ongoing = [OngoingKv {
            request: RequestId(7),
            tokens: 1_000,
            layout: &old,
        }];
        let tasks = plan_exchange(&new, &ongoing, &m, 10_000_000, Micros(0));
        let total: u64 = tasks.iter().map(|t| t.bytes).sum();
        assert_eq!(total, 96_000_000);
        assert_eq!(tasks.len(), 10);
        assert!(tasks.iter().all(|t| t.dst == Endpoint::Instance(InstanceId(1))));
    }

    #[test]
    fn resident_request_needs_no_exchange() {
        let m = model();
        let g = Group {
            id: GroupId(0),
            members: vec![InstanceId(0), InstanceId(1)],
            stages: vec![0..4, 4..8],
        };
        let ongoing = [OngoingKv {
            request: RequestId(1),
            tokens: 50,
            layout: &g,
        }];
        assert!(plan_exchange(&g, &ongoing, &m, 1_000, Micros(0)).is_empty());
    }

    #[test]
    fn restore_shards_pull_from_peers_or_host() {
        let g = Group {
            id: GroupId(0),
            members: vec![InstanceId(0), InstanceId(1), InstanceId(2)],
            stages: vec![0..2, 2..5, 5..8],
        };
        let all: BTreeSet<_> = g.members.iter().copied().collect();
        let shards = restore_shards(&g, &all, 8);
        assert_eq!(shards.len(), 6);
        assert_eq!(
            shards[0],
            RestoreShard {
                target: InstanceId(0),
                layers: 2..5,
                source: Endpoint::Instance(InstanceId(1))
            }
        );

        let survivors: BTreeSet<_> = [InstanceId(0), InstanceId(2)].into_iter().collect();
        let shards = restore_shards(&g, &survivors, 8);
        assert!(shards.iter().all(|s| s.target != InstanceId(1)));
        let s0: Vec<_> = shards.iter().filter(|s| s.target == InstanceId(0)).collect();
        assert_eq!(s0[0].layers, 2..5);
        assert_eq!(s0[0].source, Endpoint::Host(InstanceId(0)));
        assert_eq!(s0[1].layers, 5..8);
        assert_eq!(s0[1].source, Endpoint::Instance(InstanceId(2)));
    }

    #[test]
    fn nothing_dropped_nothing_restored() {
        let g = Group::single(GroupId(0), InstanceId(0), 8);
        let live: BTreeSet<_> = [InstanceId(0)].into_iter().collect();
        assert!(plan_restore_transfers(&restore_shards(&g, &live, 8), &model(), 100, Micros(0)).is_empty());
    }

    #[test]
    fn restore_occupancy_is_bytes_over_bandwidth() {
        // 14 GB over a 25 GB/s link
        let link = LinkModel::new(25e9, Micros(0));
        assert_eq!(link.transfer_time(14_000_000_000), Micros(560_000));
        // 1 GB swap at 32 GB/s
        let host = LinkModel::new(32e9, Micros(0));
        assert_eq!(host.transfer_time(1_000_000_000), Micros(31_250));
    }

    #[test]
    fn chunking_conserves_bytes() {
        let (a, b) = a_b();
        let t = TransferTask::new(TransferKind::ParamShard, 10_001, a, b, Micros(0));
        let chunks = t.into_chunks(1_000);
        assert_eq!(chunks.len(), 11);
        assert_eq!(chunks.iter().map(|c| c.bytes).sum::<u64>(), 10_001);
    }
}
