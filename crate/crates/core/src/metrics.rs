//! Latency percentiles, SLO violation fractions, pipeline bubble ratios and
//! the per-policy report.

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{Error, Result};
use crate::eventlog::EventRecord;
use crate::types::{GroupId, Micros};

/// Nearest-rank percentile of `values` for `p` in (0, 100].
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyLatencies);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Ok(v[rank.min(v.len()) - 1])
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Percentiles {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub p999: f64,
}

impl Percentiles {
    pub fn of(values: &[f64]) -> Result<Percentiles> {
        Ok(Percentiles {
            p50: percentile(values, 50.0)?,
            p90: percentile(values, 90.0)?,
            p99: percentile(values, 99.0)?,
            p999: percentile(values, 99.9)?,
        })
    }
}

/// Fraction of `latencies` above `scale * baseline_p50`.
pub fn slo_violation(latencies: &[f64], baseline_p50: f64, scale: f64) -> Result<f64> {
    if latencies.is_empty() {
        return Err(Error::EmptyLatencies);
    }
    if !(scale > 0.0 && baseline_p50 > 0.0) {
        return Err(Error::InvalidArgument("scale and baseline P50 must be positive".into()));
    }
    let bound = scale * baseline_p50;
    Ok(latencies.iter().filter(|&&l| l > bound).count() as f64 / latencies.len() as f64)
}

/// Per-request latencies; `tpot` is absent for requests with fewer than two
/// decode tokens.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RequestLatency {
    pub ttft: f64,
    pub tpot: Option<f64>,
}

/// Fraction of requests whose TTFT or TPOT exceeds `scale` times the
/// respective baseline median.
pub fn joint_slo_violation(reqs: &[RequestLatency], ttft_p50: f64, tpot_p50: f64, scale: f64) -> Result<f64> {
    if reqs.is_empty() {
        return Err(Error::EmptyLatencies);
    }
    if !(scale > 0.0 && ttft_p50 > 0.0 && tpot_p50 > 0.0) {
        return Err(Error::InvalidArgument("scale and baseline P50s must be positive".into()));
    }
    let bad = reqs
        .iter()
        .filter(|r| r.ttft > scale * ttft_p50 || r.tpot.is_some_and(|t| t > scale * tpot_p50))
        .count();
    Ok(bad as f64 / reqs.len() as f64)
}

/// One stage execution of one microbatch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageInterval {
    pub group: GroupId,
    pub stage: u32,
    pub start: Micros,
    pub end: Micros,
}

/// Idle over total stage time inside `window`. Each stage is measured from
/// its first start to its last finish, so pipeline fill and drain do not
/// count as bubbles.
pub fn bubble_ratio(intervals: &[StageInterval], group: Option<GroupId>, window: (Micros, Micros)) -> f64 {
    let (idle, busy) = bubble_times(intervals, group, window);
    if idle + busy == 0 {
        return 0.0;
    }
    idle as f64 / (idle + busy) as f64
}

/// `(idle, busy)` microseconds summed over stages.
pub fn bubble_times(intervals: &[StageInterval], group: Option<GroupId>, window: (Micros, Micros)) -> (u64, u64) {
    let mut per_stage: BTreeMap<(GroupId, u32), Vec<(u64, u64)>> = BTreeMap::new();
    for iv in intervals {
        if group.is_some_and(|g| g != iv.group) {
            continue;
        }
        let s = iv.start.max(window.0).0;
        let e = iv.end.min(window.1).0;
        if e > s {
            per_stage.entry((iv.group, iv.stage)).or_default().push((s, e));
        }
    }
    let (mut idle, mut busy) = (0, 0);
    for ivs in per_stage.values_mut() {
        ivs.sort_unstable();
        let first = ivs[0].0;
        let mut covered = 0;
        let mut reach = first;
        for &(s, e) in ivs.iter() {
            let s = s.max(reach);
            if e > s {
                covered += e - s;
                reach = e;
            }
        }
        busy += covered;
        idle += (reach - first) - covered;
    }
    (idle, busy)
}

/// Stage intervals recorded as `stage` events.
pub fn intervals_from_log(records: &[EventRecord]) -> Vec<StageInterval> {
    records
        .iter()
        .filter(|r| r.kind == "stage")
        .filter_map(|r| {
            Some(StageInterval {
                group: GroupId(r.get_u64("group")? as u32),
                stage: r.get_u64("stage")? as u32,
                start: Micros(r.get_u64("start")?),
                end: r.time,
            })
        })
        .collect()
}

/// Per-request latencies reconstructed from `finish` events.
pub fn latencies_from_log(records: &[EventRecord]) -> Vec<RequestLatency> {
    records
        .iter()
        .filter(|r| r.kind == "finish")
        .filter_map(|r| {
            let arrival = r.get_u64("arrival")?;
            let first = r.get_u64("first_token")?;
            let n = r.get_u64("n")?;
            let tpot = if n >= 2 {
                let a = r.get_u64("first_emit")?;
                let b = r.get_u64("last_emit")?;
                Some((b - a) as f64 / 1e6 / (n - 1) as f64)
            } else {
                None
            };
            Some(RequestLatency {
                ttft: (first - arrival) as f64 / 1e6,
                tpot,
            })
        })
        .collect()
}

/// Latencies of every arrived request. Requests without a first token are
/// censored at the last logged time.
pub fn all_latencies_from_log(records: &[EventRecord]) -> Vec<RequestLatency> {
    let end = records.last().map(|r| r.time.0).unwrap_or(0);
    let mut arrival: BTreeMap<u64, u64> = BTreeMap::new();
    let mut first: BTreeMap<u64, u64> = BTreeMap::new();
    let mut tpot: BTreeMap<u64, f64> = BTreeMap::new();
    for r in records {
        let Some(id) = r.get_u64("id") else { continue };
        match r.kind.as_str() {
            "arrival" => {
                arrival.insert(id, r.time.0);
            }
            "first_token" => {
                first.entry(id).or_insert(r.time.0);
            }
            "finish" => {
                if let (Some(n), Some(a), Some(b)) = (r.get_u64("n"), r.get_u64("first_emit"), r.get_u64("last_emit")) {
                    if n >= 2 {
                        tpot.insert(id, (b - a) as f64 / 1e6 / (n - 1) as f64);
                    }
                }
            }
            _ => {}
        }
    }
    arrival
        .iter()
        .map(|(id, &a)| RequestLatency {
            ttft: (first.get(id).copied().unwrap_or(end) - a) as f64 / 1e6,
            tpot: tpot.get(id).copied(),
        })
        .collect()
}

pub const SLO_SCALES: [f64; 7] = [1.0, 2.0, 3.0, 4.0, 5.0, 8.0, 10.0];

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub policy: String,
    pub completed: usize,
    pub ttft: Percentiles,
    pub tpot: Percentiles,
    /// Output tokens per second of simulated time.
    pub throughput: f64,
    pub bubble_ratio: f64,
    /// Joint violation fraction per scale factor.
    pub slo_violation: Vec<(f64, f64)>,
    pub evictions: u64,
    pub drop_events: u64,
}

impl ReportRow {
    pub fn header() -> Vec<String> {
        let mut h: Vec<String> = ["policy", "completed"].iter().map(|s| s.to_string()).collect();
        for m in ["ttft", "tpot"] {
            for p in ["p50", "p90", "p99", "p999"] {
                h.push(format!("{m}_{p}"));
            }
        }
        h.push("throughput_tok_s".into());
        h.push("bubble_ratio".into());
        for s in SLO_SCALES {
            h.push(format!("slo_x{s}"));
        }
        h.push("evictions".into());
        h.push("drop_events".into());
        h
    }

    pub fn fields(&self) -> Vec<String> {
        let f = |x: f64| format!("{x:.6}");
        let mut v = vec![self.policy.clone(), self.completed.to_string()];
        for p in [self.ttft, self.tpot] {
            v.extend([f(p.p50), f(p.p90), f(p.p99), f(p.p999)]);
        }
        v.push(format!("{:.3}", self.throughput));
        v.push(f(self.bubble_ratio));
        for (_, frac) in &self.slo_violation {
            v.push(f(*frac));
        }
        v.push(self.evictions.to_string());
        v.push(self.drop_events.to_string());
        v
    }
}

pub fn write_report<W: Write>(writer: W, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(ReportRow::header())?;
    for r in rows {
        w.write_record(r.fields())?;
    }
    w.flush()?;
    Ok(())
}

/// Medians used as SLO baselines: the lowest P50 among the given rows.
pub fn best_baseline_p50(rows: &[&ReportRow]) -> Option<(f64, f64)> {
    let ttft = rows.iter().map(|r| r.ttft.p50).filter(|v| *v > 0.0).min_by(f64::total_cmp)?;
    let tpot = rows.iter().map(|r| r.tpot.p50).filter(|v| *v > 0.0).min_by(f64::total_cmp)?;
    Some((ttft, tpot))
}
