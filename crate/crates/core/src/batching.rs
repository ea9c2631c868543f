//! Microbatch formulation from a snapshot of pending prefill work.
//!
//! `token_count_chunking` packs requests greedily up to a token budget.
//! `lookahead_formulation` starts from one batch holding everything and
//! splits it level by level into cost-balanced halves.

use serde::{Deserialize, Serialize};

use crate::cost::{batch_cost, CostCoefficients};
use crate::types::{Chunk, Microbatch, MicrobatchId, RequestId};

/// Prefill work still pending for one request.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PrefillItem {
    pub request: RequestId,
    pub tokens: u32,
    /// Tokens of this request already processed.
    pub prefix: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormulationConfig {
    pub token_budget: u32,
    pub min_batch_tokens: u32,
    pub max_recursion_depth: u32,
}

impl Default for FormulationConfig {
    fn default() -> Self {
        FormulationConfig {
            token_budget: 2048,
            min_batch_tokens: 256,
            max_recursion_depth: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Formulation {
    Lookahead,
    TokenCount,
}

pub fn token_count_chunking(queue: &[PrefillItem], token_budget: u32) -> Vec<Microbatch> {
    assert!(token_budget > 0, "token budget must be positive");
    let mut out: Vec<Vec<Chunk>> = Vec::new();
    let mut cur: Vec<Chunk> = Vec::new();
    let mut room = token_budget;
    for item in queue {
        let mut left = item.tokens;
        let mut prefix = item.prefix;
        let mut idx = 0;
        while left > 0 {
            let take = left.min(room);
            cur.push(Chunk::prefill(item.request, idx, take, prefix));
            idx += 1;
            prefix += take as u64;
            left -= take;
            room -= take;
            if room == 0 {
                out.push(std::mem::take(&mut cur));
                room = token_budget;
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    finish(out, None)
}

/// Splits after the first `k` tokens.
fn cut(chunks: &[Chunk], k: u64) -> (Vec<Chunk>, Vec<Chunk>) {
    let mut left = Vec::new();
    let mut right = Vec::new();
    let mut seen = 0u64;
    for c in chunks {
        let n = c.token_count as u64;
        if seen + n <= k {
            left.push(c.clone());
        } else if seen >= k {
            right.push(c.clone());
        } else {
            let l = (k - seen) as u32;
            left.push(Chunk { token_count: l, ..c.clone() });
            right.push(Chunk {
                token_count: c.token_count - l,
                prefix_len: c.prefix_len + l as u64,
                ..c.clone()
            });
        }
        seen += n;
    }
    (left, right)
}

/// Splits `chunks` at the token boundary that best balances the two sides'
/// batch costs, cutting at most one chunk. Ties go to the earlier boundary.
pub fn split_chunks(chunks: &[Chunk], coeffs: &CostCoefficients) -> (Vec<Chunk>, Vec<Chunk>) {
    let total: u64 = chunks.iter().map(|c| c.token_count as u64).sum();
    assert!(total >= 2, "split needs at least two tokens");
    let diff = |k: u64| {
        let (l, r) = cut(chunks, k);
        batch_cost(&l, coeffs) - batch_cost(&r, coeffs)
    };
    // left minus right grows with k; find the first k where it is >= 0
    let (mut lo, mut hi) = (1u64, total - 1);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if diff(mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let mut best = lo;
    if lo > 1 && diff(lo - 1).abs() <= diff(lo).abs() {
        best = lo - 1;
    }
    cut(chunks, best)
}

pub fn split(mb: &Microbatch, coeffs: &CostCoefficients) -> (Microbatch, Microbatch) {
    let (l, r) = split_chunks(&mb.chunks, coeffs);
    let mut left = Microbatch::new(mb.id, l);
    let mut right = Microbatch::new(mb.id, r);
    left.estimated_cost = batch_cost(&left.chunks, coeffs);
    right.estimated_cost = batch_cost(&right.chunks, coeffs);
    (left, right)
}

fn tokens(chunks: &[Chunk]) -> u64 {
    chunks.iter().map(|c| c.token_count as u64).sum()
}

pub fn lookahead_formulation(queue: &[PrefillItem], coeffs: &CostCoefficients, config: &FormulationConfig) -> Vec<Microbatch> {
    let all: Vec<Chunk> = queue
        .iter()
        .filter(|i| i.tokens > 0)
        .map(|i| Chunk::prefill(i.request, 0, i.tokens, i.prefix))
        .collect();
    if all.is_empty() {
        return Vec::new();
    }
    let min = config.min_batch_tokens.max(2) as u64;
    let mut level = vec![all];
    for _ in 0..config.max_recursion_depth {
        if level.iter().any(|b| tokens(b) < 2) {
            break;
        }
        let next: Vec<Vec<Chunk>> = level
            .iter()
            .flat_map(|b| {
                let (l, r) = split_chunks(b, coeffs);
                [l, r]
            })
            .collect();
        // a child below the threshold stays merged with its sibling; the
        // whole level is abandoned so leaves keep equal depth
        if next.iter().any(|b| tokens(b) < min) {
            break;
        }
        level = next;
    }
    finish(level, Some(coeffs))
}

fn finish(batches: Vec<Vec<Chunk>>, coeffs: Option<&CostCoefficients>) -> Vec<Microbatch> {
    let mut next_index: std::collections::BTreeMap<RequestId, u32> = Default::default();
    batches
        .into_iter()
        .enumerate()
        .map(|(i, mut chunks)| {
            for c in &mut chunks {
                let n = next_index.entry(c.request_id).or_insert(0);
                c.index_in_request = *n;
                *n += 1;
            }
            let mut mb = Microbatch::new(MicrobatchId(i as u64), chunks);
            if let Some(k) = coeffs {
                mb.estimated_cost = batch_cost(&mb.chunks, k);
            }
            mb
        })
        .collect()
}

/// Fills in `estimated_cost` for batches built elsewhere.
pub fn estimate(batches: &mut [Microbatch], coeffs: &CostCoefficients) {
    for b in batches {
        b.estimated_cost = batch_cost(&b.chunks, coeffs);
    }
}
