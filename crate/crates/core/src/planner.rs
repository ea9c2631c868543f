//! Cluster-wide parameter drop planning.
//!
//! Groups sit in a min-priority queue keyed by member count (ties: lowest
//! group id). Each step pops the two smallest groups, merges them into one
//! pipeline that keeps a single parameter copy, and counts one full copy as
//! freed. Planning stops once the demand is covered; if only one group is
//! left first, the plan is marked as a fallback.

use std::cell::Cell;
use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::memory::DropOutcome;
use crate::types::{Group, GroupId, Instance, InstanceId, Micros, ModelSpec, Request, RequestState};

/// Instances, groups and the model they serve.
#[derive(Clone, Debug)]
pub struct Cluster {
    pub model: ModelSpec,
    pub instances: BTreeMap<InstanceId, Instance>,
    pub groups: BTreeMap<GroupId, Group>,
}

impl Cluster {
    pub fn free_kv_bytes(&self) -> u64 {
        self.instances.values().map(|i| i.reclaimable_bytes()).sum()
    }

    pub fn group_of(&self, instance: InstanceId) -> Option<&Group> {
        self.groups.values().find(|g| g.members.contains(&instance))
    }
}

/// Bytes of KVCache that waiting requests need beyond what is free right
/// now. Queued (or evicted) requests need their whole context; running
/// requests contribute `outstanding_tokens`, the tokens they failed to
/// allocate.
pub fn compute_demand<'a>(
    requests: impl IntoIterator<Item = &'a Request>,
    outstanding_tokens: u64,
    model: &ModelSpec,
    free_kv_bytes: u64,
) -> u64 {
    let queued: u64 = requests
        .into_iter()
        .filter(|r| matches!(r.state, RequestState::Queued | RequestState::Dropped))
        .map(|r| r.remaining_prefill() as u64)
        .sum();
    ((queued + outstanding_tokens) * model.kv_bytes_per_token).saturating_sub(free_kv_bytes)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Merge {
    pub group_a: GroupId,
    pub group_b: GroupId,
    /// Merged stage map in pipeline order: `(member, layers)`.
    pub stages: Vec<(InstanceId, Range<u32>)>,
    pub freed_bytes: u64,
}

impl Merge {
    pub fn merged_group(&self) -> Group {
        Group {
            id: self.group_a,
            members: self.stages.iter().map(|(m, _)| *m).collect(),
            stages: self.stages.iter().map(|(_, r)| r.clone()).collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DropPlan {
    pub merges: Vec<Merge>,
    pub fallback: bool,
}

impl DropPlan {
    pub fn freed_bytes(&self) -> u64 {
        self.merges.iter().map(|m| m.freed_bytes).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct QueueKey {
    size: usize,
    id: GroupId,
}

impl Ord for QueueKey {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.size, self.id).cmp(&(other.size, other.id))
    }
}

impl PartialOrd for QueueKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Heap entry that counts the comparisons made on it.
struct Counted<'c> {
    key: QueueKey,
    counter: &'c Cell<u64>,
}

impl PartialEq for Counted<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.key == other.key
    }
}

impl Eq for Counted<'_> {}

impl PartialOrd for Counted<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Counted<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.counter.set(self.counter.get() + 1);
        self.key.cmp(&other.key)
    }
}

/// Working state of one planning run.
pub struct PlannerState<'c> {
    queue: BinaryHeap<Reverse<Counted<'c>>>,
    groups: BTreeMap<GroupId, Group>,
    pub freed_so_far: u64,
    pub demand: u64,
    counter: &'c Cell<u64>,
}

impl<'c> PlannerState<'c> {
    pub fn new(groups: &[Group], demand: u64, counter: &'c Cell<u64>) -> PlannerState<'c> {
        let mut queue = BinaryHeap::with_capacity(groups.len());
        for g in groups {
            queue.push(Reverse(Counted {
                key: QueueKey { size: g.size(), id: g.id },
                counter,
            }));
        }
        PlannerState {
            queue,
            groups: groups.iter().map(|g| (g.id, g.clone())).collect(),
            freed_so_far: 0,
            demand,
            counter,
        }
    }

    fn pop(&mut self) -> Option<Group> {
        let Reverse(e) = self.queue.pop()?;
        self.groups.remove(&e.key.id)
    }

    fn push(&mut self, g: Group) {
        self.queue.push(Reverse(Counted {
            key: QueueKey { size: g.size(), id: g.id },
            counter: self.counter,
        }));
        self.groups.insert(g.id, g);
    }
}

/// Plan statistics used to check the planner's cost.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PlanStats {
    pub comparisons: u64,
}

pub fn plan_drop(groups: &[Group], demand: u64, model: &ModelSpec) -> DropPlan {
    plan_drop_with_stats(groups, demand, model).0
}

pub fn plan_drop_with_stats(groups: &[Group], demand: u64, model: &ModelSpec) -> (DropPlan, PlanStats) {
    let counter = Cell::new(0);
    let mut state = PlannerState::new(groups, demand, &counter);
    let mut plan = DropPlan::default();
    while state.freed_so_far < state.demand {
        if state.queue.len() < 2 {
            plan.fallback = true;
            break;
        }
        let a = state.pop().expect("queue length checked");
        let b = state.pop().expect("queue length checked");
        let Some(stages) = merge_stage_map(&a, &b, model.num_layers) else {
            // more members than layers: no further split is possible
            plan.fallback = true;
            break;
        };
        let merge = Merge {
            group_a: a.id.min(b.id),
            group_b: a.id.max(b.id),
            stages,
            freed_bytes: model.param_bytes(),
        };
        state.freed_so_far += merge.freed_bytes;
        state.push(merge.merged_group());
        plan.merges.push(merge);
    }
    let stats = PlanStats {
        comparisons: counter.get(),
    };
    (plan, stats)
}

/// Even contiguous split of `[0, num_layers)` into `n` ranges.
pub fn even_split(num_layers: u32, n: usize) -> Vec<Range<u32>> {
    (0..n)
        .map(|i| {
            let lo = (i as u64 * num_layers as u64 / n as u64) as u32;
            let hi = ((i as u64 + 1) * num_layers as u64 / n as u64) as u32;
            lo..hi
        })
        .collect()
}

/// Stage map for the union of two groups that each hold a full copy. Every
/// member keeps a sub-range of what it already holds, so the merge only
/// drops parameters. Among such maps the one with the smallest largest
/// stage is chosen, then the smallest sum of squared stage lengths; ties
/// prefer `a`'s members first.
///
/// Members of one group hold disjoint ordered ranges, so any valid pipeline
/// order is an interleaving of the two member lists. The search is a DP over
/// (members of `a` used, members of `b` used, layers covered).
pub fn merge_stage_map(a: &Group, b: &Group, num_layers: u32) -> Option<Vec<(InstanceId, Range<u32>)>> {
    let (na, nb, l) = (a.size(), b.size(), num_layers as usize);
    if na + nb > l {
        return None;
    }
    let held = |from_a: bool, k: usize| if from_a { a.stages[k].clone() } else { b.stages[k].clone() };
    let lo = l.div_ceil(na + nb);
    for cap in lo..=l {
        if let Some(map) = interleave(na, nb, l, cap, &held) {
            return Some(
                map.into_iter()
                    .map(|(from_a, k, r)| (if from_a { a.members[k] } else { b.members[k] }, r))
                    .collect(),
            );
        }
    }
    None
}

type Step = (bool, usize, Range<u32>);

fn interleave(na: usize, nb: usize, l: usize, cap: usize, held: &dyn Fn(bool, usize) -> Range<u32>) -> Option<Vec<Step>> {
    // best[i][j][x]: minimal sum of squares to cover [x, l) with a[i..], b[j..]
    const INF: u64 = u64::MAX;
    let idx = |i: usize, j: usize, x: usize| (i * (nb + 1) + j) * (l + 1) + x;
    let mut best = vec![INF; (na + 1) * (nb + 1) * (l + 1)];
    let mut choice: Vec<Option<(bool, usize)>> = vec![None; best.len()];
    best[idx(na, nb, l)] = 0;
    for i in (0..=na).rev() {
        for j in (0..=nb).rev() {
            for x in (0..l).rev() {
                let mut cur = INF;
                let mut pick = None;
                for (from_a, k) in [(true, i), (false, j)] {
                    let (n, ni, nj) = if from_a { (na, i + 1, j) } else { (nb, i, j + 1) };
                    if k >= n {
                        continue;
                    }
                    let r = held(from_a, k);
                    if (r.start as usize) > x || (r.end as usize) <= x {
                        continue;
                    }
                    let hi = (r.end as usize).min(x + cap);
                    for y in x + 1..=hi {
                        let rest = best[idx(ni, nj, y)];
                        if rest == INF {
                            continue;
                        }
                        let c = rest + ((y - x) * (y - x)) as u64;
                        if c < cur {
                            cur = c;
                            pick = Some((from_a, y));
                        }
                    }
                }
                best[idx(i, j, x)] = cur;
                choice[idx(i, j, x)] = pick;
            }
        }
    }
    if best[idx(0, 0, 0)] == INF {
        return None;
    }
    let (mut i, mut j, mut x) = (0, 0, 0);
    let mut out = Vec::with_capacity(na + nb);
    while x < l {
        let (from_a, y) = choice[idx(i, j, x)].expect("reachable state");
        let k = if from_a { i } else { j };
        out.push((from_a, k, x as u32..y as u32));
        if from_a {
            i += 1;
        } else {
            j += 1;
        }
        x = y;
    }
    Some(out)
}

/// What applying a plan did to one instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceDrop {
    pub instance: InstanceId,
    pub dropped: Vec<Range<u32>>,
    pub outcome: DropOutcome,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AppliedPlan {
    pub drops: Vec<InstanceDrop>,
    /// `(merged group, previous groups)` per merge, in plan order.
    pub merged: Vec<(Group, Vec<Group>)>,
    pub freed_bytes: u64,
}

impl AppliedPlan {
    /// Longest remap time over the involved instances.
    pub fn remap_delay(&self) -> Micros {
        self.drops.iter().map(|d| d.outcome.remap_delay).max().unwrap_or(Micros::ZERO)
    }
}

/// Executes the plan's drops on the involved instances and rewrites the
/// group table. Request rescheduling is left to the caller.
pub fn apply_plan(cluster: &mut Cluster, plan: &DropPlan) -> Result<AppliedPlan> {
    if plan.fallback {
        return Err(Error::InvalidArgument("cannot apply a fallback plan".into()));
    }
    let mut applied = AppliedPlan::default();
    let model = cluster.model.clone();
    for merge in &plan.merges {
        let merged = merge.merged_group();
        let mut previous = Vec::new();
        for id in [merge.group_a, merge.group_b] {
            let g = cluster
                .groups
                .remove(&id)
                .ok_or_else(|| Error::InvalidArgument(format!("plan references unknown group {id}")))?;
            previous.push(g);
        }
        for (member, keep) in &merge.stages {
            let inst = cluster
                .instances
                .get_mut(member)
                .ok_or_else(|| Error::InvalidArgument(format!("plan references unknown instance {member}")))?;
            let held = inst.layer_range_held();
            let mut dropped = Vec::new();
            let mut total = DropOutcome {
                freed_bytes: 0,
                remapped_blocks: 0,
                remap_delay: Micros::ZERO,
            };
            for r in [held.start..keep.start.max(held.start), keep.end.min(held.end)..held.end] {
                if r.is_empty() {
                    continue;
                }
                let out = inst.drop_layers(r.clone(), &merged, &model)?;
                total.freed_bytes += out.freed_bytes;
                total.remapped_blocks += out.remapped_blocks;
                total.remap_delay += out.remap_delay;
                dropped.push(r);
            }
            if !(held.start <= keep.start && keep.end <= held.end) {
                return Err(Error::CoverageViolation {
                    instance: *member,
                    layer: keep.start,
                });
            }
            inst.group_id = merged.id;
            applied.freed_bytes += total.freed_bytes;
            applied.drops.push(InstanceDrop {
                instance: *member,
                dropped,
                outcome: total,
            });
        }
        debug_assert!(merged.covers(model.num_layers));
        cluster.groups.insert(merged.id, merged.clone());
        applied.merged.push((merged, previous));
    }
    Ok(applied)
}

impl fmt::Display for DropPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "plan fallback={} merges={}", self.fallback, self.merges.len())?;
        for m in &self.merges {
            write!(f, "merge a={} b={} freed={} stages=", m.group_a, m.group_b, m.freed_bytes)?;
            for (i, (inst, r)) in m.stages.iter().enumerate() {
                if i > 0 {
                    write!(f, ",")?;
                }
                write!(f, "{}:{}-{}", inst, r.start, r.end)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

impl FromStr for DropPlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<DropPlan> {
        let bad = |line: usize, msg: &str| Error::PlanParse {
            line,
            msg: msg.to_string(),
        };
        let mut lines = s.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| bad(1, "empty plan"))?;
        let fields = kv_fields(header.strip_prefix("plan ").ok_or_else(|| bad(1, "expected `plan` header"))?);
        let fallback = match fields.get("fallback").map(String::as_str) {
            Some("true") => true,
            Some("false") => false,
            _ => return Err(bad(1, "missing fallback")),
        };
        let count: usize = fields
            .get("merges")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(1, "missing merges"))?;
        let mut merges = Vec::new();
        for (i, line) in lines {
            let ln = i + 1;
            let body = line.strip_prefix("merge ").ok_or_else(|| bad(ln, "expected `merge` line"))?;
            let f = kv_fields(body);
            let num = |k: &str| -> Result<u64> {
                f.get(k)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad(ln, &format!("bad field `{k}`")))
            };
            let mut stages = Vec::new();
            for part in f.get("stages").ok_or_else(|| bad(ln, "missing stages"))?.split(',') {
                let (inst, range) = part.split_once(':').ok_or_else(|| bad(ln, "bad stage"))?;
                let (lo, hi) = range.split_once('-').ok_or_else(|| bad(ln, "bad stage range"))?;
                let p = |v: &str| v.parse::<u32>().map_err(|_| bad(ln, "bad number"));
                stages.push((InstanceId(p(inst)?), p(lo)?..p(hi)?));
            }
            merges.push(Merge {
                group_a: GroupId(num("a")? as u32),
                group_b: GroupId(num("b")? as u32),
                stages,
                freed_bytes: num("freed")?,
            });
        }
        if merges.len() != count {
            return Err(bad(1, "merge count mismatch"));
        }
        Ok(DropPlan { merges, fallback })
    }
}

fn kv_fields(s: &str) -> BTreeMap<String, String> {
    s.split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::CostCoefficients;
    use crate::types::{Micros, RequestId};

    const GB: u64 = 1_000_000_000;

    fn model(layers: u32, bytes_per_layer: u64) -> ModelSpec {
        ModelSpec {
            num_layers: layers,
            bytes_per_layer,
            kv_bytes_per_token: 192_000,
            cost: CostCoefficients::new(0.0, 1e-4, 0.0),
        }
    }

    fn singles(n: u32, layers: u32) -> Vec<Group> {
        (0..n).map(|i| Group::single(GroupId(i), InstanceId(i), layers)).collect()
    }

    fn cluster(n: u32, m: &ModelSpec, hbm: u64) -> Cluster {
        Cluster {
            model: m.clone(),
            instances: (0..n)
                .map(|i| (InstanceId(i), Instance::new(InstanceId(i), m, hbm, 0, Micros(5_000), 25e9).unwrap()))
                .collect(),
            groups: singles(n, m.num_layers).into_iter().map(|g| (g.id, g)).collect(),
        }
    }

    #[test]
    fn demand_of_queued_requests() {
        let m = model(8, GB);
        let reqs: Vec<Request> = (0..10).map(|i| Request::new(RequestId(i), Micros(0), 1_000, 5)).collect();
        let d = compute_demand(&reqs, 0, &m, GB);
        assert_eq!(d, 920_000_000);
        assert_eq!(compute_demand(&[], 0, &m, GB), 0);
        assert_eq!(compute_demand(&reqs, 0, &m, 100 * GB), 0);
    }

    #[test]
    fn smallest_two_groups_merge_first() {
        let m = model(12, 1);
        let groups = vec![
            Group {
                id: GroupId(0),
                members: vec![InstanceId(0), InstanceId(1), InstanceId(2)],
                stages: even_split(12, 3),
            },
            Group::single(GroupId(3), InstanceId(3), 12),
            Group {
                id: GroupId(4),
                members: vec![InstanceId(4), InstanceId(5)],
                stages: even_split(12, 2),
            },
        ];
        let plan = plan_drop(&groups, 1, &m);
        assert_eq!(plan.merges.len(), 1);
        assert_eq!((plan.merges[0].group_a, plan.merges[0].group_b), (GroupId(3), GroupId(4)));
        assert!(!plan.fallback);
    }

    #[test]
    fn one_merge_covers_a_small_demand() {
        let m = model(48, 28 * GB / 48);
        let plan = plan_drop(&singles(2, 48), 10 * GB, &m);
        assert_eq!(plan.merges.len(), 1);
        assert_eq!(plan.freed_bytes(), m.param_bytes());
        assert!(!plan.fallback);
        let stages = &plan.merges[0].stages;
        assert_eq!(stages[0], (InstanceId(0), 0..24));
        assert_eq!(stages[1], (InstanceId(1), 24..48));
    }

    #[test]
    fn unmet_demand_falls_back() {
        let m = model(8, 10);
        let plan = plan_drop(&singles(3, 8), 1_000, &m);
        assert!(plan.fallback);
        assert_eq!(plan.merges.len(), 2);
    }

    #[test]
    fn unequal_merge_keeps_only_held_layers() {
        let pair = Group {
            id: GroupId(1),
            members: vec![InstanceId(1), InstanceId(2)],
            stages: vec![0..6, 6..12],
        };
        let single = Group::single(GroupId(0), InstanceId(0), 12);
        let stages = merge_stage_map(&single, &pair, 12).unwrap();
        assert_eq!(stages, vec![(InstanceId(1), 0..4), (InstanceId(0), 4..8), (InstanceId(2), 8..12)]);
    }

    #[test]
    fn merge_maps_exist_for_greedy_shapes() {
        for layers in 2..=64u32 {
            for a in 1..=6usize {
                for b in a..=6usize {
                    if a + b > layers as usize || a > layers as usize || b > layers as usize {
                        continue;
                    }
                    let ga = Group {
                        id: GroupId(0),
                        members: (0..a as u32).map(InstanceId).collect(),
                        stages: even_split(layers, a),
                    };
                    let gb = Group {
                        id: GroupId(1),
                        members: (a as u32..(a + b) as u32).map(InstanceId).collect(),
                        stages: even_split(layers, b),
                    };
                    let map = merge_stage_map(&ga, &gb, layers);
                    assert!(map.is_some(), "layers={layers} a={a} b={b}");
                }
            }
        }
    }

    #[test]
    fn pair_plan_applies_to_the_symmetric_split() {
        let m = model(8, GB);
        let mut c = cluster(2, &m, 20 * GB);
        let free_before = c.free_kv_bytes();
        let plan = plan_drop(&singles(2, 8), GB, &m);
        let applied = apply_plan(&mut c, &plan).unwrap();
        assert_eq!(c.groups.len(), 1);
        let g = c.groups.values().next().unwrap();
        assert_eq!(g.size(), 2);
        assert_eq!(g.stages, vec![0..4, 4..8]);
        assert_eq!(c.instances[&InstanceId(0)].layer_range_held(), 0..4);
        assert_eq!(c.instances[&InstanceId(1)].layer_range_held(), 4..8);
        assert_eq!(c.free_kv_bytes() - free_before, plan.freed_bytes());
        assert_eq!(applied.freed_bytes, plan.freed_bytes());
        assert_eq!(applied.remap_delay(), Micros(4 * 5_000));
    }

    #[test]
    fn empty_plan_is_noop() {
        let m = model(8, GB);
        let mut c = cluster(2, &m, 20 * GB);
        let before = c.groups.clone();
        let applied = apply_plan(&mut c, &DropPlan::default()).unwrap();
        assert_eq!(applied.freed_bytes, 0);
        assert_eq!(c.groups, before);
    }

    #[test]
    fn fallback_plans_are_not_applied() {
        let m = model(8, GB);
        let mut c = cluster(2, &m, 20 * GB);
        let plan = DropPlan {
            merges: vec![],
            fallback: true,
        };
        assert!(apply_plan(&mut c, &plan).is_err());
    }

    #[test]
    fn cascade_merges_keep_coverage_and_free_one_copy_each() {
        let m = model(48, GB);
        let mut c = cluster(4, &m, 80 * GB);
        let free0 = c.free_kv_bytes();
        let groups: Vec<Group> = c.groups.values().cloned().collect();
        let plan = plan_drop(&groups, 3 * m.param_bytes(), &m);
        assert_eq!(plan.merges.len(), 3);
        apply_plan(&mut c, &plan).unwrap();
        assert_eq!(c.groups.len(), 1);
        let g = c.groups.values().next().unwrap();
        assert!(g.covers(48));
        assert_eq!(g.size(), 4);
        assert_eq!(c.free_kv_bytes() - free0, 3 * m.param_bytes());
        for inst in c.instances.values() {
            inst.segments.check().unwrap();
            assert_eq!(inst.layer_range_held().len(), 12);
        }
    }

    #[test]
    fn text_form_round_trips() {
        let m = model(48, GB);
        let plan = plan_drop(&singles(4, 48), 2 * m.param_bytes(), &m);
        let text = plan.to_string();
        assert_eq!(
            text,
            "plan fallback=false merges=2\n\
             merge a=0 b=1 freed=48000000000 stages=0:0-24,1:24-48\n\
             merge a=2 b=3 freed=48000000000 stages=2:0-24,3:24-48\n"
        );
        assert_eq!(text.parse::<DropPlan>().unwrap(), plan);
        assert!("nonsense".parse::<DropPlan>().is_err());
    }

    #[test]
    fn deterministic_and_monotone_in_demand() {
        let m = model(16, 10);
        let groups = singles(5, 16);
        let mut last = 0;
        for demand in (1..=600).step_by(7) {
            let p1 = plan_drop(&groups, demand, &m);
            let p2 = plan_drop(&groups, demand, &m);
            assert_eq!(p1, p2);
            assert!(p1.merges.len() >= last);
            last = p1.merges.len();
        }
    }
}
