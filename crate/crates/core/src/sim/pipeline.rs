//! Closed-form pipeline schedule for a fixed microbatch sequence.
//!
//! Stage `s` of microbatch `k` starts once stage `s` finished `k - 1`,
//! stage `s - 1` finished `k` and the activation arrived, and (with a finite
//! number of slots) once the microbatch issued `slots` places earlier left
//! the last stage.

use crate::metrics::StageInterval;
use crate::types::{GroupId, Micros};

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineSpec {
    /// Fraction of a microbatch's cost spent in each stage.
    pub stage_fractions: Vec<f64>,
    /// Microbatches in flight at once; `None` means unbounded.
    pub slots: Option<usize>,
    /// Activation transfer time between consecutive stages.
    pub transfer: Micros,
}

impl PipelineSpec {
    pub fn even(stages: usize, slots: Option<usize>) -> PipelineSpec {
        PipelineSpec {
            stage_fractions: vec![1.0 / stages as f64; stages],
            slots,
            transfer: Micros::ZERO,
        }
    }
}

/// Stage intervals for microbatches with the given costs (seconds), issued
/// in order.
pub fn step_pipeline(spec: &PipelineSpec, costs: &[f64]) -> Vec<StageInterval> {
    let n = spec.stage_fractions.len();
    let mut end = vec![vec![Micros::ZERO; costs.len()]; n];
    let mut out = Vec::with_capacity(n * costs.len());
    for (k, &cost) in costs.iter().enumerate() {
        for s in 0..n {
            let mut start = Micros::ZERO;
            if k > 0 {
                start = start.max(end[s][k - 1]);
            }
            if s > 0 {
                start = start.max(end[s - 1][k] + spec.transfer);
            } else if let Some(slots) = spec.slots {
                if k >= slots {
                    start = start.max(end[n - 1][k - slots]);
                }
            }
            let dur = Micros::from_secs_ceil(cost * spec.stage_fractions[s]);
            end[s][k] = start + dur;
            out.push(StageInterval {
                group: GroupId(0),
                stage: s as u32,
                start,
                end: end[s][k],
            });
        }
    }
    out
}
