//! C ABI over the simulator: cost models, drop plans and simulations behind
//! opaque handles.
//!
//! Every fallible function returns a [`PdStatus`]. On failure the message is
//! kept per thread and read with [`pd_last_error`]. Strings handed out by this
//! library are released with [`pd_string_free`]; handles with their own
//! `*_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use paramdrop::config::{Config, Policy};
use paramdrop::cost::{chunk_cost, fit_with, CostCoefficients, FitOptions, ProfileSample};
use paramdrop::eventlog::render_log;
use paramdrop::planner::{plan_drop, DropPlan};
use paramdrop::runner::write_run;
use paramdrop::sim::{SimOutput, Simulation};
use paramdrop::types::{Group, GroupId, InstanceId, Micros, ModelSpec};
use paramdrop::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    InsufficientData = 5,
    InvalidState = 6,
    Panic = 99,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = CString::new(msg.into().replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(s));
}

fn status_of(e: &Error) -> PdStatus {
    match e {
        Error::Config(_) | Error::Trace { .. } => PdStatus::Config,
        Error::Io(_) | Error::Csv(_) => PdStatus::Io,
        Error::InsufficientProfileDiversity(_) | Error::EmptyLatencies => PdStatus::InsufficientData,
        _ => PdStatus::InvalidArgument,
    }
}

fn fail(status: PdStatus, msg: impl Into<String>) -> PdStatus {
    set_error(msg);
    status
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), PdStatus>) -> PdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PdStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(PdStatus::Panic, format!("panic: {msg}"))
        }
    }
}

fn lib(e: Error) -> PdStatus {
    fail(status_of(&e), e.to_string())
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, PdStatus> {
    if p.is_null() {
        return Err(fail(PdStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(PdStatus::InvalidArgument, format!("{name} is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, PdStatus> {
    p.as_mut().ok_or_else(|| fail(PdStatus::NullPointer, format!("{name} is null")))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, PdStatus> {
    p.as_ref().ok_or_else(|| fail(PdStatus::NullPointer, format!("{name} is null")))
}

fn c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("nul bytes replaced").into_raw()
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---- cost model --------------------------------------------------------------

pub struct PdCostModel {
    coeffs: CostCoefficients,
}

/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pd_cost_model_new(alpha: f64, beta: f64, gamma: f64, out: *mut *mut PdCostModel) -> PdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let coeffs = CostCoefficients::new(alpha, beta, gamma);
        coeffs.validate().map_err(lib)?;
        *out = Box::into_raw(Box::new(PdCostModel { coeffs }));
        Ok(())
    })
}

/// Fits coefficients to profile rows `(c[i], p[i], batch_id[i], measured_us[i])`.
/// Rows sharing a batch id form one batch and must agree on `measured_us`.
/// A nonzero `tokens_only` forces alpha to zero.
///
/// # Safety
/// The four arrays must hold `n` elements each; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pd_cost_model_fit(
    c: *const u64,
    p: *const u64,
    batch_id: *const u64,
    measured_us: *const f64,
    n: usize,
    tokens_only: c_int,
    out: *mut *mut PdCostModel,
) -> PdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if n == 0 {
            return Err(fail(PdStatus::InsufficientData, "no profile rows"));
        }
        if c.is_null() || p.is_null() || batch_id.is_null() || measured_us.is_null() {
            return Err(fail(PdStatus::NullPointer, "profile array is null"));
        }
        let (c, p) = (std::slice::from_raw_parts(c, n), std::slice::from_raw_parts(p, n));
        let (b, m) = (std::slice::from_raw_parts(batch_id, n), std::slice::from_raw_parts(measured_us, n));
        let mut batches: std::collections::BTreeMap<u64, ProfileSample> = std::collections::BTreeMap::new();
        for i in 0..n {
            if c[i] == 0 || !m[i].is_finite() || m[i] < 0.0 {
                return Err(fail(PdStatus::InvalidArgument, format!("row {i}: bad chunk size or time")));
            }
            let s = batches.entry(b[i]).or_insert_with(|| ProfileSample {
                chunks: Vec::new(),
                measured_seconds: m[i] * 1e-6,
            });
            if (s.measured_seconds - m[i] * 1e-6).abs() > 1e-12 {
                return Err(fail(PdStatus::InvalidArgument, format!("row {i}: batch {} has two measured times", b[i])));
            }
            s.chunks.push((c[i], p[i]));
        }
        let samples: Vec<ProfileSample> = batches.into_values().collect();
        let report = fit_with(&samples, FitOptions { tokens_only: tokens_only != 0 }).map_err(lib)?;
        *out = Box::into_raw(Box::new(PdCostModel { coeffs: report.coeffs }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; the out pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn pd_cost_model_coefficients(model: *const PdCostModel, alpha: *mut f64, beta: *mut f64, gamma: *mut f64) -> PdStatus {
    guard(|| {
        let m = handle(model, "model")?;
        for (dst, v) in [(alpha, m.coeffs.alpha), (beta, m.coeffs.beta), (gamma, m.coeffs.gamma)] {
            if let Some(d) = dst.as_mut() {
                *d = v;
            }
        }
        Ok(())
    })
}

/// Seconds to process one chunk of `c` new tokens after `p` cached ones.
///
/// # Safety
/// `model` must be a live handle; `out_seconds` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pd_cost_model_chunk_cost(model: *const PdCostModel, c: u64, p: u64, out_seconds: *mut f64) -> PdStatus {
    guard(|| {
        let m = handle(model, "model")?;
        *out_arg(out_seconds, "out_seconds")? = chunk_cost(c, p, &m.coeffs);
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pd_cost_model_free(model: *mut PdCostModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

// ---- drop plan -----------------------------------------------------------------

pub struct PdDropPlan {
    plan: DropPlan,
}

/// Plans parameter drops for `instances` unmerged instances until
/// `demand_bytes` of KVCache are freed.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pd_drop_plan_new(instances: u32, num_layers: u32, bytes_per_layer: u64, demand_bytes: u64, out: *mut *mut PdDropPlan) -> PdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let model = ModelSpec {
            num_layers,
            bytes_per_layer,
            kv_bytes_per_token: 1,
            cost: CostCoefficients::new(0.0, 0.0, 0.0),
        };
        model.validate().map_err(lib)?;
        let groups: Vec<Group> = (0..instances).map(|i| Group::single(GroupId(i), InstanceId(i), num_layers)).collect();
        *out = Box::into_raw(Box::new(PdDropPlan {
            plan: plan_drop(&groups, demand_bytes, &model),
        }));
        Ok(())
    })
}

/// # Safety
/// `plan` must be a live handle; the out pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn pd_drop_plan_summary(plan: *const PdDropPlan, merges: *mut u64, freed_bytes: *mut u64, fallback: *mut c_int) -> PdStatus {
    guard(|| {
        let p = &handle(plan, "plan")?.plan;
        if let Some(m) = merges.as_mut() {
            *m = p.merges.len() as u64;
        }
        if let Some(f) = freed_bytes.as_mut() {
            *f = p.freed_bytes();
        }
        if let Some(f) = fallback.as_mut() {
            *f = c_int::from(p.fallback);
        }
        Ok(())
    })
}

/// Text form of the plan; free it with [`pd_string_free`].
///
/// # Safety
/// `plan` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pd_drop_plan_to_string(plan: *const PdDropPlan, out: *mut *mut c_char) -> PdStatus {
    guard(|| {
        let p = handle(plan, "plan")?;
        *out_arg(out, "out")? = c_string(p.plan.to_string());
        Ok(())
    })
}

/// # Safety
/// `plan` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pd_drop_plan_free(plan: *mut PdDropPlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

// ---- simulation ------------------------------------------------------------------

enum SimState {
    Running(Box<Simulation>),
    Finished(Box<SimOutput>),
    Empty,
}

pub struct PdSimulation {
    state: SimState,
}

impl PdSimulation {
    fn output(&mut self) -> &SimOutput {
        if let SimState::Running(_) = self.state {
            let SimState::Running(sim) = std::mem::replace(&mut self.state, SimState::Empty) else { unreachable!() };
            self.state = SimState::Finished(Box::new(sim.run()));
        }
        match &self.state {
            SimState::Finished(o) => o,
            _ => unreachable!("simulation state is always set"),
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PdStats {
    pub now_us: u64,
    pub requests: u64,
    pub finished: u64,
    pub evictions: u64,
    pub drop_events: u64,
    pub restores: u64,
    pub swaps: u64,
    pub migrations: u64,
    pub fallbacks: u64,
    pub autoscale_events: u64,
    pub faults: u64,
}

fn make_sim(cfg: Config, policy: *const c_char) -> Result<PdSimulation, PdStatus> {
    let mut cfg = cfg;
    if !policy.is_null() {
        cfg.policy = unsafe { str_arg(policy, "policy")? }.parse::<Policy>().map_err(lib)?;
    }
    let trace = cfg.load_trace().map_err(lib)?;
    let sim = Simulation::new(cfg, &trace).map_err(lib)?;
    Ok(PdSimulation {
        state: SimState::Running(Box::new(sim)),
    })
}

/// Loads a TOML config file. `policy` overrides the config's policy unless
/// null.
///
/// # Safety
/// `path` must be a C string, `policy` a C string or null, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn pd_simulation_from_file(path: *const c_char, policy: *const c_char, out: *mut *mut PdSimulation) -> PdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = Config::load(Path::new(str_arg(path, "path")?)).map_err(lib)?;
        *out = Box::into_raw(Box::new(make_sim(cfg, policy)?));
        Ok(())
    })
}

/// Parses TOML config text; relative trace paths resolve against `base_dir`
/// (the working directory if null).
///
/// # Safety
/// `toml` must be a C string, `base_dir` and `policy` C strings or null,
/// `out` valid.
#[no_mangle]
pub unsafe extern "C" fn pd_simulation_from_toml(
    toml: *const c_char,
    base_dir: *const c_char,
    policy: *const c_char,
    out: *mut *mut PdSimulation,
) -> PdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let base = if base_dir.is_null() { "." } else { str_arg(base_dir, "base_dir")? };
        let cfg = Config::from_toml(str_arg(toml, "toml")?, Path::new(base)).map_err(lib)?;
        *out = Box::into_raw(Box::new(make_sim(cfg, policy)?));
        Ok(())
    })
}

/// Advances to `until_us`. `more` is set to 1 while events remain.
///
/// # Safety
/// `sim` must be a live handle; `more` may be null.
#[no_mangle]
pub unsafe extern "C" fn pd_simulation_run_until(sim: *mut PdSimulation, until_us: u64, more: *mut c_int) -> PdStatus {
    guard(|| {
        let s = out_arg(sim, "sim")?;
        let SimState::Running(sim) = &mut s.state else {
            return Err(fail(PdStatus::InvalidState, "simulation already finished"));
        };
        let m = sim.run_until(Micros(until_us));
        if let Some(p) = more.as_mut() {
            *p = c_int::from(m);
        }
        Ok(())
    })
}

/// Runs the simulation to the end. Later stepping calls fail.
///
/// # Safety
/// `sim` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pd_simulation_run(sim: *mut PdSimulation) -> PdStatus {
    guard(|| {
        out_arg(sim, "sim")?.output();
        Ok(())
    })
}

/// # Safety
/// `sim` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pd_simulation_stats(sim: *const PdSimulation, out: *mut PdStats) -> PdStatus {
    guard(|| {
        let s = handle(sim, "sim")?;
        let (stats, now, reqs) = match &s.state {
            SimState::Running(sim) => (sim.stats().clone(), sim.now(), sim.requests()),
            SimState::Finished(o) => (o.stats.clone(), o.stats.end_time, o.requests.as_slice()),
            SimState::Empty => return Err(fail(PdStatus::InvalidState, "simulation is empty")),
        };
        *out_arg(out, "out")? = PdStats {
            now_us: now.0,
            requests: reqs.len() as u64,
            finished: reqs.iter().filter(|r| r.state == paramdrop::types::RequestState::Finished).count() as u64,
            evictions: stats.evictions,
            drop_events: stats.drop_events,
            restores: stats.restores,
            swaps: stats.swaps,
            migrations: stats.migrations,
            fallbacks: stats.fallbacks,
            autoscale_events: stats.autoscale_events,
            faults: stats.faults,
        };
        Ok(())
    })
}

/// The event log, running the simulation to the end first if needed. Free
/// the string with [`pd_string_free`].
///
/// # Safety
/// `sim` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pd_simulation_event_log(sim: *mut PdSimulation, out: *mut *mut c_char) -> PdStatus {
    guard(|| {
        let s = out_arg(sim, "sim")?;
        let out = out_arg(out, "out")?;
        *out = c_string(render_log(&s.output().events));
        Ok(())
    })
}

/// Writes `report.csv`, `events.log` and `timeline.csv` into `dir`, running
/// the simulation to the end first if needed.
///
/// # Safety
/// `sim` must be a live handle; `dir` a C string.
#[no_mangle]
pub unsafe extern "C" fn pd_simulation_write_outputs(sim: *mut PdSimulation, dir: *const c_char) -> PdStatus {
    guard(|| {
        let s = out_arg(sim, "sim")?;
        let dir = str_arg(dir, "dir")?;
        write_run(Path::new(dir), s.output()).map_err(lib)?;
        Ok(())
    })
}

/// # Safety
/// `sim` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pd_simulation_free(sim: *mut PdSimulation) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}
