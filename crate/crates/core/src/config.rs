//! TOML run configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;

use crate::batching::{Formulation, FormulationConfig};
use crate::cost::CostCoefficients;
use crate::error::{Error, Result};
use crate::network::NetworkParams;
use crate::trace::{self, SynthSpec, TraceRecord};
use crate::types::{Micros, ModelSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Policy {
    KunServe,
    Recompute,
    Swap,
    Migrate,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::KunServe, Policy::Recompute, Policy::Swap, Policy::Migrate];

    pub fn name(self) -> &'static str {
        match self {
            Policy::KunServe => "kunserve",
            Policy::Recompute => "recompute",
            Policy::Swap => "swap",
            Policy::Migrate => "migrate",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Policy> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown value `{s}` for field `policy` (expected kunserve, recompute, swap or migrate)")))
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub instances: u32,
    pub hbm_bytes: u64,
    #[serde(default)]
    pub reserve_bytes: u64,
    /// Instance-to-instance bytes per second.
    pub bandwidth: f64,
    #[serde(default)]
    pub latency_us: u64,
    /// Device-to-host bytes per second.
    pub host_bandwidth: f64,
    #[serde(default)]
    pub host_latency_us: u64,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub token_budget: u32,
    pub min_batch_tokens: u32,
    pub max_recursion_depth: u32,
    pub formulation: Formulation,
    /// Pipeline rounds of pending prefill the lookahead formulation sees.
    pub lookahead_rounds: u32,
    /// Fraction of KVCache kept free at admission.
    pub watermark: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        let f = FormulationConfig::default();
        SchedulerConfig {
            token_budget: f.token_budget,
            min_batch_tokens: f.min_batch_tokens,
            max_recursion_depth: f.max_recursion_depth,
            formulation: Formulation::Lookahead,
            lookahead_rounds: 4,
            watermark: 0.01,
        }
    }
}

impl SchedulerConfig {
    pub fn formulation_config(&self) -> FormulationConfig {
        FormulationConfig {
            token_budget: self.token_budget,
            min_batch_tokens: self.min_batch_tokens,
            max_recursion_depth: self.max_recursion_depth,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonitorConfig {
    pub tick_ms: u64,
    pub restore_threshold: f64,
    /// Ticks the head of a queue must stay blocked before a drop.
    pub debounce_ticks: u32,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            tick_ms: 100,
            restore_threshold: 0.5,
            debounce_ticks: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryConfig {
    /// Remap cost per remapped block.
    pub map_latency_us: u64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig { map_latency_us: 5_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub activation_bytes_per_token: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            activation_bytes_per_token: 10_240,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceConfig {
    pub path: Option<PathBuf>,
    pub synthetic: Option<SynthSpec>,
    #[serde(default = "one")]
    pub rescale: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultConfig {
    pub at_s: f64,
    pub instance: u32,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoscaleConfig {
    pub enabled: bool,
    pub occupancy: f64,
    pub window_s: f64,
    pub add_instance: bool,
    pub cold_start_s: f64,
}

impl Default for AutoscaleConfig {
    fn default() -> Self {
        AutoscaleConfig {
            enabled: false,
            occupancy: 0.9,
            window_s: 5.0,
            add_instance: false,
            cold_start_s: 30.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    horizon_s: Option<f64>,
    #[serde(default = "default_policy")]
    policy: String,
    model: ModelSpec,
    cluster: ClusterConfig,
    #[serde(default)]
    scheduler: SchedulerConfig,
    #[serde(default)]
    monitor: MonitorConfig,
    #[serde(default)]
    memory: MemoryConfig,
    #[serde(default)]
    network: NetworkConfig,
    trace: TraceConfig,
    #[serde(default)]
    faults: Vec<FaultConfig>,
    #[serde(default)]
    autoscale: AutoscaleConfig,
}

fn default_policy() -> String {
    "kunserve".into()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    /// Simulation stops here even if requests remain.
    pub horizon_s: Option<f64>,
    pub policy: Policy,
    pub model: ModelSpec,
    pub cluster: ClusterConfig,
    pub scheduler: SchedulerConfig,
    pub monitor: MonitorConfig,
    pub memory: MemoryConfig,
    pub network: NetworkConfig,
    pub trace: TraceConfig,
    pub faults: Vec<FaultConfig>,
    pub autoscale: AutoscaleConfig,
    /// Directory relative trace paths resolve against.
    pub base_dir: PathBuf,
}

impl Config {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Config> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let cfg = Config {
            seed: raw.seed,
            horizon_s: raw.horizon_s,
            policy: raw.policy.parse()?,
            model: raw.model,
            cluster: raw.cluster,
            scheduler: raw.scheduler,
            monitor: raw.monitor,
            memory: raw.memory,
            network: raw.network,
            trace: raw.trace,
            faults: raw.faults,
            autoscale: raw.autoscale,
            base_dir: base_dir.to_path_buf(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Config::from_toml(&text, &dir)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let c = &self.cluster;
        if c.instances == 0 {
            return Err(Error::Config("field `cluster.instances` must be >= 1".into()));
        }
        if !(c.bandwidth > 0.0 && c.host_bandwidth > 0.0) {
            return Err(Error::Config("link bandwidths must be positive".into()));
        }
        if self.model.param_bytes() + c.reserve_bytes >= c.hbm_bytes {
            return Err(Error::Config("field `cluster.hbm_bytes` leaves no room for KVCache".into()));
        }
        let s = &self.scheduler;
        if s.token_budget == 0 || s.min_batch_tokens == 0 || s.lookahead_rounds == 0 {
            return Err(Error::Config("scheduler token counts must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&s.watermark) {
            return Err(Error::Config("field `scheduler.watermark` must be in [0, 1)".into()));
        }
        if self.monitor.tick_ms == 0 {
            return Err(Error::Config("field `monitor.tick_ms` must be >= 1".into()));
        }
        if self.trace.path.is_some() == self.trace.synthetic.is_some() {
            return Err(Error::Config("set exactly one of `trace.path` and `trace.synthetic`".into()));
        }
        if !(self.trace.rescale > 0.0) {
            return Err(Error::Config("field `trace.rescale` must be positive".into()));
        }
        for f in &self.faults {
            if f.instance >= c.instances {
                return Err(Error::Config(format!("fault names unknown instance {}", f.instance)));
            }
        }
        Ok(())
    }

    pub fn network_params(&self) -> NetworkParams {
        NetworkParams {
            bandwidth: self.cluster.bandwidth,
            latency: Micros(self.cluster.latency_us),
            host_bandwidth: self.cluster.host_bandwidth,
            host_latency: Micros(self.cluster.host_latency_us),
        }
    }

    pub fn cost(&self) -> &CostCoefficients {
        &self.model.cost
    }

    /// The request trace this config describes, rescaled.
    pub fn load_trace(&self) -> Result<Vec<TraceRecord>> {
        let base = match (&self.trace.path, &self.trace.synthetic) {
            (Some(p), _) => {
                let p = if p.is_absolute() { p.clone() } else { self.base_dir.join(p) };
                trace::load_trace(&p)?
            }
            (None, Some(spec)) => trace::synthesize(&SynthSpec {
                seed: spec.seed.wrapping_add(self.seed),
                ..spec.clone()
            }),
            (None, None) => unreachable!("validated"),
        };
        Ok(trace::rescale(&base, self.trace.rescale))
    }
}
