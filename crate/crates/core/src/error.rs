use std::path::PathBuf;

use crate::types::{InstanceId, RequestId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("request {0}: not yet prefilled")]
    NotYetPrefilled(RequestId),

    #[error("request {0}: undefined TPOT (fewer than 2 decode tokens)")]
    UndefinedTpot(RequestId),

    #[error("instance {instance}: layer absent ({layer})")]
    LayerAbsent { instance: InstanceId, layer: u32 },

    #[error("instance {instance}: coverage violation dropping layer {layer}")]
    CoverageViolation { instance: InstanceId, layer: u32 },

    #[error("instance {instance}: restore blocked (need {needed} bytes, {reclaimable} reclaimable)")]
    RestoreBlocked {
        instance: InstanceId,
        needed: u64,
        reclaimable: u64,
    },

    #[error("insufficient profile diversity: {0}")]
    InsufficientProfileDiversity(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid memory layout: {0}")]
    InvalidLayout(String),

    #[error("{path}:{line}: {msg}")]
    Trace {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("empty latency set")]
    EmptyLatencies,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("plan parse error on line {line}: {msg}")]
    PlanParse { line: usize, msg: String },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
