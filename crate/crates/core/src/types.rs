//! Domain types shared by every other module: simulated time, identifiers,
//! requests and their lifecycle, chunks and microbatches, instances, groups
//! and the model description.

use std::fmt;
use std::ops::{Add, AddAssign, Range, Sub};

use serde::{Deserialize, Serialize};

use crate::cost::CostCoefficients;
use crate::error::{Error, Result};
use crate::memory::{KvAllocator, SegmentTable};

/// Simulated time as an integer count of microseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Micros(pub u64);

impl Micros {
    pub const ZERO: Micros = Micros(0);

    pub fn from_secs_f64(secs: f64) -> Micros {
        Micros((secs.max(0.0) * 1e6).round() as u64)
    }

    /// Rounds up so that positive work never takes zero time.
    pub fn from_secs_ceil(secs: f64) -> Micros {
        if secs <= 0.0 {
            return Micros(0);
        }
        Micros(((secs * 1e6).ceil() as u64).max(1))
    }

    pub fn from_millis(ms: u64) -> Micros {
        Micros(ms * 1_000)
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn saturating_sub(self, rhs: Micros) -> Micros {
        Micros(self.0.saturating_sub(rhs.0))
    }
}

impl Add for Micros {
    type Output = Micros;
    fn add(self, rhs: Micros) -> Micros {
        Micros(self.0 + rhs.0)
    }
}

impl AddAssign for Micros {
    fn add_assign(&mut self, rhs: Micros) {
        self.0 += rhs.0;
    }
}

impl Sub for Micros {
    type Output = Micros;
    fn sub(self, rhs: Micros) -> Micros {
        Micros(self.0 - rhs.0)
    }
}

impl fmt::Display for Micros {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

macro_rules! id_type {
    ($name:ident, $inner:ty) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(RequestId, u64);
id_type!(InstanceId, u32);
id_type!(GroupId, u32);
id_type!(MicrobatchId, u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RequestState {
    Queued,
    Prefilling,
    Decoding,
    Stalled,
    Finished,
    Dropped,
}

/// One serving request. `output_len` counts decode-phase tokens; the token
/// produced by the end of prefill is recorded separately as
/// `first_token_time`.
#[derive(Clone, Debug)]
pub struct Request {
    pub id: RequestId,
    pub arrival_time: Micros,
    pub input_len: u32,
    pub output_len: u32,
    pub state: RequestState,
    pub tokens_prefilled: u32,
    pub tokens_decoded: u32,
    pub first_token_time: Option<Micros>,
    pub token_emit_times: Vec<Micros>,
    pub home_instance: Option<InstanceId>,
    /// Context tokens that lost their KVCache to an eviction and must be
    /// prefilled again before decoding resumes.
    pub recompute_pending: u32,
    pub evictions: u32,
    /// Whether the request ever reached Decoding/Stalled/Finished, i.e. left
    /// the prefill phase.
    left_prefill: bool,
}

impl Request {
    pub fn new(id: RequestId, arrival_time: Micros, input_len: u32, output_len: u32) -> Request {
        Request {
            id,
            arrival_time,
            input_len,
            output_len,
            state: RequestState::Queued,
            tokens_prefilled: 0,
            tokens_decoded: 0,
            first_token_time: None,
            token_emit_times: Vec::new(),
            home_instance: None,
            recompute_pending: 0,
            evictions: 0,
            left_prefill: false,
        }
    }

    /// Tokens whose KVCache must be resident before the next decode step.
    pub fn context_len(&self) -> u64 {
        self.input_len as u64 + self.tokens_decoded as u64
    }

    /// Prefill tokens still to be computed (fresh input or recomputation).
    pub fn remaining_prefill(&self) -> u32 {
        (self.input_len - self.tokens_prefilled) + self.recompute_pending
    }

    /// Tokens already processed ahead of the next prefill chunk.
    pub fn prefill_prefix(&self) -> u64 {
        if self.tokens_prefilled < self.input_len {
            self.tokens_prefilled as u64
        } else {
            // input done; recompute of decoded context in progress
            self.context_len() - self.recompute_pending as u64
        }
    }

    /// Applies `tokens` of prefill progress, consuming fresh input first.
    pub fn advance_prefill(&mut self, tokens: u32) {
        let fresh = tokens.min(self.input_len - self.tokens_prefilled);
        self.tokens_prefilled += fresh;
        let rest = tokens - fresh;
        assert!(rest <= self.recompute_pending, "prefill overrun on request {}", self.id);
        self.recompute_pending -= rest;
    }

    pub fn prefill_done(&self) -> bool {
        self.remaining_prefill() == 0
    }

    pub fn decode_done(&self) -> bool {
        self.tokens_decoded >= self.output_len
    }

    pub fn has_left_prefill(&self) -> bool {
        self.left_prefill
    }

    /// Moves the request to `state`, enforcing the lifecycle invariants.
    pub fn transition(&mut self, state: RequestState, now: Micros) {
        if state == RequestState::Decoding && self.first_token_time.is_none() {
            self.first_token_time = Some(now);
        }
        if matches!(state, RequestState::Decoding | RequestState::Finished) {
            self.left_prefill = true;
        }
        if state == RequestState::Stalled && self.first_token_time.is_some() {
            self.left_prefill = true;
        }
        self.state = state;
    }

    /// Records one decode-phase token at `now`.
    pub fn emit_token(&mut self, now: Micros) {
        debug_assert!(self.tokens_decoded < self.output_len);
        if let Some(&last) = self.token_emit_times.last() {
            assert!(now > last, "token emit times must strictly increase");
        }
        self.token_emit_times.push(now);
        self.tokens_decoded += 1;
    }

    /// Drops all KVCache-backed progress; the context is recomputed later.
    pub fn evict(&mut self) {
        self.recompute_pending = self.tokens_decoded;
        self.tokens_prefilled = 0;
        self.evictions += 1;
        self.state = RequestState::Dropped;
    }

    pub fn ttft(&self) -> Result<f64> {
        ttft(self)
    }

    pub fn tpot(&self) -> Result<f64> {
        tpot(self)
    }
}

/// Time from arrival to the first output token, in seconds.
pub fn ttft(request: &Request) -> Result<f64> {
    let first = request.first_token_time.ok_or(Error::NotYetPrefilled(request.id))?;
    Ok((first - request.arrival_time).as_secs_f64())
}

/// Mean inter-token gap over the decode phase, in seconds. The gap between
/// the first token and the first decode token is not included.
pub fn tpot(request: &Request) -> Result<f64> {
    mean_gap(&request.token_emit_times).ok_or(Error::UndefinedTpot(request.id))
}

pub(crate) fn mean_gap(times: &[Micros]) -> Option<f64> {
    if times.len() < 2 {
        return None;
    }
    let span = times[times.len() - 1] - times[0];
    Some(span.as_secs_f64() / (times.len() - 1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChunkKind {
    Prefill,
    Decode,
}

/// A contiguous token slice of one request.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Chunk {
    pub request_id: RequestId,
    pub index_in_request: u32,
    pub token_count: u32,
    pub prefix_len: u64,
    pub microbatch: Option<MicrobatchId>,
    pub kind: ChunkKind,
}

impl Chunk {
    pub fn prefill(request_id: RequestId, index_in_request: u32, token_count: u32, prefix_len: u64) -> Chunk {
        Chunk {
            request_id,
            index_in_request,
            token_count,
            prefix_len,
            microbatch: None,
            kind: ChunkKind::Prefill,
        }
    }

    pub fn decode(request_id: RequestId, context_len: u64) -> Chunk {
        Chunk {
            request_id,
            index_in_request: 0,
            token_count: 1,
            prefix_len: context_len,
            microbatch: None,
            kind: ChunkKind::Decode,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Microbatch {
    pub id: MicrobatchId,
    pub chunks: Vec<Chunk>,
    pub estimated_cost: f64,
}

impl Microbatch {
    pub fn new(id: MicrobatchId, chunks: Vec<Chunk>) -> Microbatch {
        let mut mb = Microbatch {
            id,
            chunks,
            estimated_cost: 0.0,
        };
        for c in &mut mb.chunks {
            c.microbatch = Some(id);
        }
        mb
    }

    pub fn token_count(&self) -> u64 {
        self.chunks.iter().map(|c| c.token_count as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }
}

/// Shape of the served model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub num_layers: u32,
    pub bytes_per_layer: u64,
    pub kv_bytes_per_token: u64,
    pub cost: CostCoefficients,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 {
            return Err(Error::InvalidModel(format!("num_layers must be >= 2, got {}", self.num_layers)));
        }
        if self.bytes_per_layer == 0 || self.kv_bytes_per_token == 0 {
            return Err(Error::InvalidModel("byte quantities must be positive".into()));
        }
        self.cost.validate()
    }

    /// Bytes of one complete parameter copy.
    pub fn param_bytes(&self) -> u64 {
        self.bytes_per_layer * self.num_layers as u64
    }

    /// KVCache bytes that `tokens` occupy across `layers` of the model.
    pub fn kv_bytes(&self, tokens: u64, layers: u32) -> u64 {
        let num = tokens as u128 * self.kv_bytes_per_token as u128 * layers as u128;
        num.div_ceil(self.num_layers as u128) as u64
    }
}

/// A logical GPU device: its memory map, KVCache bookkeeping and the
/// parameter layers it currently holds.
#[derive(Clone, Debug)]
pub struct Instance {
    pub id: InstanceId,
    pub total_hbm: u64,
    pub segments: SegmentTable,
    pub kv: KvAllocator,
    pub group_id: GroupId,
    pub nic_bandwidth: f64,
}

impl Instance {
    /// Contiguous layer range covered by the parameter blocks present.
    pub fn layer_range_held(&self) -> Range<u32> {
        self.segments.layer_range_held()
    }
}

/// Instances merged into one pipeline holding a single parameter copy.
/// `stages[i]` is the layer range executed by `members[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Group {
    pub id: GroupId,
    pub members: Vec<InstanceId>,
    pub stages: Vec<Range<u32>>,
}

impl Group {
    pub fn single(id: GroupId, instance: InstanceId, num_layers: u32) -> Group {
        Group {
            id,
            members: vec![instance],
            stages: vec![0..num_layers],
        }
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    /// True when the stage ranges tile `[0, num_layers)` in order.
    pub fn covers(&self, num_layers: u32) -> bool {
        if self.members.is_empty() || self.members.len() != self.stages.len() {
            return false;
        }
        let mut next = 0;
        for r in &self.stages {
            if r.start != next || r.end <= r.start {
                return false;
            }
            next = r.end;
        }
        next == num_layers
    }

    pub fn stage_of(&self, instance: InstanceId) -> Option<usize> {
        self.members.iter().position(|&m| m == instance)
    }

    /// Member holding `layer` under the stage map.
    pub fn holder_of(&self, layer: u32) -> Option<InstanceId> {
        self.stages
            .iter()
            .position(|r| r.contains(&layer))
            .map(|i| self.members[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req_with_emits(times: &[f64]) -> Request {
        let mut r = Request::new(RequestId(1), Micros(0), 4, times.len() as u32);
        r.first_token_time = Some(Micros(0));
        for &t in times {
            r.token_emit_times.push(Micros::from_secs_f64(t));
            r.tokens_decoded += 1;
        }
        r
    }

    #[test]
    fn ttft_is_first_token_minus_arrival() {
        let mut r = Request::new(RequestId(0), Micros::from_secs_f64(10.0), 8, 2);
        r.first_token_time = Some(Micros::from_secs_f64(10.3));
        assert!((ttft(&r).unwrap() - 0.3).abs() < 1e-9);

        let mut z = Request::new(RequestId(1), Micros(0), 8, 2);
        z.first_token_time = Some(Micros(0));
        assert_eq!(ttft(&z).unwrap(), 0.0);
    }

    #[test]
    fn ttft_before_prefill_is_an_error() {
        let r = Request::new(RequestId(3), Micros(5), 8, 2);
        let err = ttft(&r).unwrap_err();
        assert!(err.to_string().contains("not yet prefilled"));
    }

    #[test]
    fn tpot_uniform_and_two_token_cases() {
        assert!((tpot(&req_with_emits(&[1.0, 1.1, 1.2])).unwrap() - 0.1).abs() < 1e-9);
        assert!((tpot(&req_with_emits(&[0.0, 2.0])).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn tpot_needs_two_tokens() {
        let err = tpot(&req_with_emits(&[1.0])).unwrap_err();
        assert!(err.to_string().contains("undefined TPOT"));
    }

    #[test]
    fn stall_gap_inflates_tpot_by_gap_over_n_minus_one() {
        let n = 11;
        let base: Vec<f64> = (0..n).map(|i| 1.0 + 0.05 * i as f64).collect();
        let mut stalled = base.clone();
        for t in stalled.iter_mut().skip(5) {
            *t += 1.3;
        }
        let d = tpot(&req_with_emits(&stalled)).unwrap() - tpot(&req_with_emits(&base)).unwrap();
        assert!((d - 1.3 / (n - 1) as f64).abs() < 1e-6);
    }

    #[test]
    fn first_token_set_when_leaving_prefill() {
        let mut r = Request::new(RequestId(0), Micros(0), 4, 3);
        r.transition(RequestState::Prefilling, Micros(1));
        assert!(r.first_token_time.is_none());
        assert!(!r.has_left_prefill());
        r.advance_prefill(4);
        r.transition(RequestState::Decoding, Micros(9));
        assert_eq!(r.first_token_time, Some(Micros(9)));
        assert!(r.has_left_prefill());
    }

    #[test]
    fn eviction_requeues_context_for_recompute() {
        let mut r = Request::new(RequestId(0), Micros(0), 500, 10);
        r.advance_prefill(500);
        r.transition(RequestState::Decoding, Micros(1));
        r.emit_token(Micros(2));
        r.emit_token(Micros(3));
        r.evict();
        assert_eq!(r.remaining_prefill(), 502);
        assert_eq!(r.prefill_prefix(), 0);
        r.advance_prefill(501);
        assert_eq!(r.prefill_prefix(), 501);
        r.advance_prefill(1);
        assert!(r.prefill_done());
        assert_eq!(r.first_token_time, Some(Micros(1)));
    }

    #[test]
    #[should_panic(expected = "strictly increase")]
    fn emit_times_must_increase() {
        let mut r = Request::new(RequestId(0), Micros(0), 1, 3);
        r.emit_token(Micros(5));
        r.emit_token(Micros(5));
    }

    #[test]
    fn group_coverage() {
        let g = Group {
            id: GroupId(0),
            members: vec![InstanceId(0), InstanceId(1)],
            stages: vec![0..4, 4..8],
        };
        assert!(g.covers(8));
        assert!(!g.covers(9));
        assert_eq!(g.holder_of(5), Some(InstanceId(1)));
        let gap = Group {
            stages: vec![0..3, 4..8],
            ..g.clone()
        };
        assert!(!gap.covers(8));
    }

    #[test]
    fn model_validation() {
        let mut m = ModelSpec {
            num_layers: 1,
            bytes_per_layer: 10,
            kv_bytes_per_token: 10,
            cost: CostCoefficients::new(0.0, 1.0, 0.0),
        };
        assert!(m.validate().is_err());
        m.num_layers = 2;
        assert!(m.validate().is_ok());
        assert_eq!(m.kv_bytes(10, 1), 50);
    }
}
