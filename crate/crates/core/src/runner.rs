//! Runs configs and writes `report.csv`, `events.log` and `timeline.csv`.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use crate::config::{Config, Policy};
use crate::error::Result;
use crate::eventlog::render_log;
use crate::metrics::{all_latencies_from_log, bubble_ratio, joint_slo_violation, Percentiles, ReportRow, StageInterval, SLO_SCALES};
use crate::sim::{SimOutput, Simulation, TimelineRow};
use crate::types::Micros;

pub fn run_config(cfg: &Config) -> Result<SimOutput> {
    let trace = cfg.load_trace()?;
    Ok(Simulation::new(cfg.clone(), &trace)?.run())
}

/// Runs `cfg` once per policy, in parallel. Results come back in the
/// order given.
pub fn run_policies(cfg: &Config, policies: &[Policy]) -> Result<Vec<SimOutput>> {
    let trace = cfg.load_trace()?;
    std::thread::scope(|s| {
        let handles: Vec<_> = policies
            .iter()
            .map(|&p| {
                let mut c = cfg.clone();
                c.policy = p;
                let trace = &trace;
                s.spawn(move || Simulation::new(c, trace).map(Simulation::run))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("simulation thread panicked")).collect()
    })
}

/// Bubble ratio over the stages of groups that ran pipelined.
pub fn pipelined_bubble_ratio(intervals: &[StageInterval], end: Micros) -> f64 {
    let piped: BTreeSet<_> = intervals.iter().filter(|i| i.stage > 0).map(|i| i.group).collect();
    let ivs: Vec<StageInterval> = intervals.iter().filter(|i| piped.contains(&i.group)).copied().collect();
    bubble_ratio(&ivs, None, (Micros::ZERO, end))
}

/// Report row computed from the event log alone. SLO bounds scale
/// `baseline` (TTFT and TPOT medians), or the run's own medians if absent.
pub fn report_row(out: &SimOutput, baseline: Option<(f64, f64)>) -> Result<ReportRow> {
    let lat = all_latencies_from_log(&out.events);
    let ttfts: Vec<f64> = lat.iter().map(|l| l.ttft).collect();
    let tpots: Vec<f64> = lat.iter().filter_map(|l| l.tpot).collect();
    let ttft = Percentiles::of(&ttfts)?;
    let tpot = if tpots.is_empty() { Percentiles::default() } else { Percentiles::of(&tpots)? };
    let finishes: Vec<_> = out.events.iter().filter(|e| e.kind == "finish").collect();
    let tokens: u64 = finishes.iter().filter_map(|e| e.get_u64("n")).sum();
    let end = out.events.last().map(|e| e.time).unwrap_or(Micros::ZERO);
    let secs = end.as_secs_f64();
    let (bt, bp) = baseline.unwrap_or((ttft.p50, tpot.p50));
    let mut slo = Vec::new();
    for s in SLO_SCALES {
        let v = if bt > 0.0 && bp > 0.0 { joint_slo_violation(&lat, bt, bp, s)? } else { 0.0 };
        slo.push((s, v));
    }
    Ok(ReportRow {
        policy: out.policy.name().to_string(),
        completed: finishes.len(),
        ttft,
        tpot,
        throughput: if secs > 0.0 { tokens as f64 / secs } else { 0.0 },
        bubble_ratio: pipelined_bubble_ratio(&out.stage_intervals, end),
        slo_violation: slo,
        evictions: out.events.iter().filter(|e| e.kind == "evict").count() as u64,
        drop_events: out.events.iter().filter(|e| e.kind == "drop_plan").count() as u64,
    })
}

/// Rows for several runs of the same trace. SLO bounds use the best
/// baseline medians, where baselines are every policy other than kunserve
/// (or all runs if there is none).
pub fn report_rows(outs: &[SimOutput]) -> Result<Vec<ReportRow>> {
    let own: Vec<ReportRow> = outs.iter().map(|o| report_row(o, None)).collect::<Result<_>>()?;
    let mut base: Vec<&ReportRow> = own.iter().filter(|r| r.policy != Policy::KunServe.name()).collect();
    if base.is_empty() {
        base = own.iter().collect();
    }
    let best = crate::metrics::best_baseline_p50(&base);
    outs.iter().map(|o| report_row(o, best)).collect()
}

pub fn write_timeline<W: Write>(writer: W, rows: &[TimelineRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["time_s", "occupancy", "queued", "mean_ttft_s", "groups", "drop_active"])?;
    for r in rows {
        w.write_record([
            format!("{:.3}", r.time_s),
            format!("{:.6}", r.occupancy),
            r.queued.to_string(),
            r.mean_ttft.map(|t| format!("{t:.6}")).unwrap_or_default(),
            r.groups.to_string(),
            u8::from(r.drop_active).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the three output files for one run into `dir`.
pub fn write_run(dir: &Path, out: &SimOutput) -> Result<ReportRow> {
    std::fs::create_dir_all(dir)?;
    let row = report_row(out, None)?;
    crate::metrics::write_report(std::fs::File::create(dir.join("report.csv"))?, std::slice::from_ref(&row))?;
    std::fs::write(dir.join("events.log"), render_log(&out.events))?;
    write_timeline(std::fs::File::create(dir.join("timeline.csv"))?, &out.timeline)?;
    Ok(row)
}

/// Writes a combined report plus one log and timeline per policy.
pub fn write_comparison(dir: &Path, outs: &[SimOutput]) -> Result<Vec<ReportRow>> {
    std::fs::create_dir_all(dir)?;
    let rows = report_rows(outs)?;
    crate::metrics::write_report(std::fs::File::create(dir.join("report.csv"))?, &rows)?;
    for o in outs {
        let name = o.policy.name();
        std::fs::write(dir.join(format!("events-{name}.log")), render_log(&o.events))?;
        write_timeline(std::fs::File::create(dir.join(format!("timeline-{name}.csv")))?, &o.timeline)?;
    }
    Ok(rows)
}

/// Start of the first `window_s` arrival window, from `from_s` on, whose
/// P90 TTFT exceeds `bound` seconds. Requests still waiting at the end of
/// the run count with their censored TTFT.
pub fn first_slo_violation(out: &SimOutput, from_s: f64, window_s: f64, bound: f64) -> Option<f64> {
    let end = out.stats.end_time;
    let points: Vec<(f64, f64)> = out
        .requests
        .iter()
        .map(|r| {
            let first = r.first_token_time.unwrap_or(end);
            (r.arrival_time.as_secs_f64(), first.saturating_sub(r.arrival_time).as_secs_f64())
        })
        .collect();
    let mut w = from_s;
    while w < end.as_secs_f64() {
        let ttfts: Vec<f64> = points.iter().filter(|(a, _)| (w..w + window_s).contains(a)).map(|p| p.1).collect();
        if !ttfts.is_empty() && crate::metrics::percentile(&ttfts, 90.0).expect("non-empty") > bound {
            return Some(w);
        }
        w += window_s;
    }
    None
}
