//! C ABI over `mpic-core`.
//!
//! Objects are opaque handles created by `*_new`/`*_load` functions and
//! released with the matching `*_free`. Every fallible call returns an
//! [`MpicStatus`]; on failure a description is available from
//! [`mpic_last_error`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mpic_core::error::MpicError;
use mpic_core::mpicx::{run_closed_loop_partial, Controller, ControllerConfig};
use mpic_core::nss::{load_weights, NssModel};
use mpic_core::state::{ControlInput, Dynamics, VehicleState, CONTROL_DIM, STATE_DIM};
use mpic_core::world::{Bicycle, Scenario};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpicStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Io = 4,
    Numerical = 5,
    OffRoad = 6,
    OutOfRange = 7,
    PlanningFailed = 8,
    Training = 9,
    Panic = 10,
}

impl From<&MpicError> for MpicStatus {
    fn from(e: &MpicError) -> Self {
        match e {
            MpicError::NotPositiveSemiDefinite { .. } | MpicError::AllWeightsDegenerate | MpicError::NotSpd(_) => {
                MpicStatus::Numerical
            }
            MpicError::DimensionMismatch(_) | MpicError::InvalidConfig(_) | MpicError::GridTooLarge { .. } => {
                MpicStatus::InvalidArgument
            }
            MpicError::DivergedTraining { .. } => MpicStatus::Training,
            MpicError::Parse { .. } => MpicStatus::Parse,
            MpicError::OffRoadProjection { .. } => MpicStatus::OffRoad,
            MpicError::OutOfTableRange { .. } => MpicStatus::OutOfRange,
            MpicError::PlanningFailed { .. } => MpicStatus::PlanningFailed,
            MpicError::Io(_) => MpicStatus::Io,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: MpicStatus, msg: impl Into<String>) -> MpicStatus {
    set_error(msg.into());
    status
}

fn from_core(e: MpicError) -> MpicStatus {
    let s = MpicStatus::from(&e);
    fail(s, e.to_string())
}

/// Runs `f`, turning panics into [`MpicStatus::Panic`].
fn guard(f: impl FnOnce() -> MpicStatus) -> MpicStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(MpicStatus::Panic, format!("internal panic: {msg}"))
        }
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, MpicStatus> {
    if p.is_null() {
        return Err(fail(MpicStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(MpicStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn bytes<'a>(p: *const u8, len: usize, what: &str) -> Result<&'a [u8], MpicStatus> {
    if p.is_null() {
        return Err(fail(MpicStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn boxed<T>(v: T, out: *mut *mut T) -> MpicStatus {
    unsafe { *out = Box::into_raw(Box::new(v)) };
    MpicStatus::Ok
}

macro_rules! try_status {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(MpicStatus::NullPointer, concat!(stringify!($p), " is null"));
        })+
    };
}

/// Message of the last failure on this thread, or null. Owned by the
/// library and valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn mpic_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mpic_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn mpic_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[derive(Clone)]
enum AnyModel {
    Nss(NssModel),
    Bicycle(Bicycle),
}

impl Dynamics for AnyModel {
    fn step(&self, x: &[f64; STATE_DIM], u: &[f64; CONTROL_DIM]) -> [f64; STATE_DIM] {
        match self {
            AnyModel::Nss(m) => m.step(x, u),
            AnyModel::Bicycle(m) => m.step(x, u),
        }
    }

    fn step_batch(&self, xs: &[[f64; STATE_DIM]], us: &[[f64; CONTROL_DIM]], out: &mut [[f64; STATE_DIM]]) {
        match self {
            AnyModel::Nss(m) => m.step_batch(xs, us, out),
            AnyModel::Bicycle(m) => m.step_batch(xs, us, out),
        }
    }
}

/// Discrete-time vehicle model.
pub struct MpicModel(AnyModel);

/// Scenario description (road, obstacles, weights, bounds).
pub struct MpicScenario(Scenario);

/// Closed-loop controller bound to one model and scenario.
pub struct MpicController(Controller<AnyModel>);

/// Parses a neural model weight file held in memory.
///
/// # Safety
/// `json` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mpic_model_from_json(json: *const u8, len: usize, out: *mut *mut MpicModel) -> MpicStatus {
    guard(|| {
        non_null!(out);
        let b = try_status!(bytes(json, len, "json"));
        match load_weights(b) {
            Ok(m) => boxed(MpicModel(AnyModel::Nss(m)), out),
            Err(e) => from_core(e),
        }
    })
}

/// Loads a neural model weight file from disk.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mpic_model_load(path: *const c_char, out: *mut *mut MpicModel) -> MpicStatus {
    guard(|| {
        non_null!(out);
        let p = try_status!(c_str(path, "path"));
        let b = match std::fs::read(p) {
            Ok(b) => b,
            Err(e) => return fail(MpicStatus::Io, format!("{p}: {e}")),
        };
        match load_weights(&b) {
            Ok(m) => boxed(MpicModel(AnyModel::Nss(m)), out),
            Err(e) => from_core(e),
        }
    })
}

/// Exact kinematic bicycle with sample time `dt` and the given wheelbase.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mpic_model_bicycle(dt: f64, wheelbase: f64, out: *mut *mut MpicModel) -> MpicStatus {
    guard(|| {
        non_null!(out);
        if !(dt > 0.0 && dt.is_finite() && wheelbase > 0.0 && wheelbase.is_finite()) {
            return fail(MpicStatus::InvalidArgument, format!("dt {dt} and wheelbase {wheelbase} must be positive"));
        }
        boxed(MpicModel(AnyModel::Bicycle(Bicycle { dt, wheelbase })), out)
    })
}

/// One model step from state `x[4]` under control `u[2]` into `x_next[4]`.
///
/// # Safety
/// Pointers must reference arrays of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn mpic_model_step(
    model: *const MpicModel,
    x: *const f64,
    u: *const f64,
    x_next: *mut f64,
) -> MpicStatus {
    guard(|| {
        non_null!(model, x, u, x_next);
        let xs: [f64; STATE_DIM] = std::slice::from_raw_parts(x, STATE_DIM).try_into().unwrap();
        let us: [f64; CONTROL_DIM] = std::slice::from_raw_parts(u, CONTROL_DIM).try_into().unwrap();
        let y = (*model).0.step(&xs, &us);
        std::slice::from_raw_parts_mut(x_next, STATE_DIM).copy_from_slice(&y);
        MpicStatus::Ok
    })
}

/// # Safety
/// `model` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn mpic_model_free(model: *mut MpicModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Built-in scenario by name: `overtaking` or `braking`.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mpic_scenario_fixture(name: *const c_char, out: *mut *mut MpicScenario) -> MpicStatus {
    guard(|| {
        non_null!(out);
        let n = try_status!(c_str(name, "name"));
        match Scenario::fixture(n) {
            Some(sc) => boxed(MpicScenario(sc), out),
            None => fail(MpicStatus::InvalidArgument, format!("unknown scenario '{n}'")),
        }
    })
}

/// Parses and validates a scenario document.
///
/// # Safety
/// `json` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mpic_scenario_from_json(json: *const u8, len: usize, out: *mut *mut MpicScenario) -> MpicStatus {
    guard(|| {
        non_null!(out);
        let b = try_status!(bytes(json, len, "json"));
        match Scenario::from_json(b) {
            Ok(sc) => boxed(MpicScenario(sc), out),
            Err(e) => from_core(e),
        }
    })
}

/// Number of closed-loop steps the scenario runs for.
///
/// # Safety
/// `scenario` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mpic_scenario_steps(scenario: *const MpicScenario) -> usize {
    if scenario.is_null() {
        return 0;
    }
    (*scenario).0.steps()
}

/// # Safety
/// `scenario` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn mpic_scenario_free(scenario: *mut MpicScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Builds a controller. `config_json` may be null for defaults; otherwise it
/// is a controller settings object where omitted fields keep their defaults.
/// The model and scenario are copied, so their handles may be freed after.
///
/// # Safety
/// Handles must be live; `config_json` null or NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mpic_controller_new(
    model: *const MpicModel,
    scenario: *const MpicScenario,
    config_json: *const c_char,
    out: *mut *mut MpicController,
) -> MpicStatus {
    guard(|| {
        non_null!(model, scenario, out);
        let cfg = if config_json.is_null() {
            ControllerConfig::default()
        } else {
            let s = try_status!(c_str(config_json, "config_json"));
            match serde_json::from_str(s) {
                Ok(c) => c,
                Err(e) => return fail(MpicStatus::Parse, format!("controller config: {e}")),
            }
        };
        match Controller::new((*model).0.clone(), (*scenario).0.clone(), cfg) {
            Ok(c) => boxed(MpicController(c), out),
            Err(e) => from_core(e),
        }
    })
}

/// Plans step `k` from planning-frame state `x[4]` = (s, d, heading error,
/// speed) given the previous control `u_prev[2]`, writing the control to
/// apply into `u_out[2]`.
///
/// # Safety
/// Pointers must reference arrays of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn mpic_controller_plan(
    ctrl: *mut MpicController,
    k: usize,
    x: *const f64,
    u_prev: *const f64,
    u_out: *mut f64,
) -> MpicStatus {
    guard(|| {
        non_null!(ctrl, x, u_prev, u_out);
        let xs = VehicleState::from_slice(std::slice::from_raw_parts(x, STATE_DIM));
        let up = ControlInput::from_slice(std::slice::from_raw_parts(u_prev, CONTROL_DIM));
        match (*ctrl).0.plan_step(k, &xs, &up) {
            Ok(r) => {
                std::slice::from_raw_parts_mut(u_out, CONTROL_DIM).copy_from_slice(&r.control.to_array());
                MpicStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}

/// Forgets the warm-start state.
///
/// # Safety
/// `ctrl` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mpic_controller_reset(ctrl: *mut MpicController) -> MpicStatus {
    guard(|| {
        non_null!(ctrl);
        (*ctrl).0.reset();
        MpicStatus::Ok
    })
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MpicSummary {
    pub steps: usize,
    pub total_cost: f64,
    pub min_ov_dist: f64,
    pub max_violation: f64,
    pub mean_plan_ms: f64,
    pub final_speed: f64,
}

/// Runs the scenario in closed loop against the true plant. The summary and,
/// when `csv` is non-null, the trace CSV (free with [`mpic_string_free`]) are
/// written even when planning fails part way.
///
/// # Safety
/// `ctrl` must be a live handle; `summary` writable; `csv` null or writable.
#[no_mangle]
pub unsafe extern "C" fn mpic_controller_run(
    ctrl: *mut MpicController,
    summary: *mut MpicSummary,
    csv: *mut *mut c_char,
) -> MpicStatus {
    guard(|| {
        non_null!(ctrl, summary);
        let out = run_closed_loop_partial(&mut (*ctrl).0);
        let s = out.trace.summary();
        *summary = MpicSummary {
            steps: s.steps,
            total_cost: s.total_cost,
            min_ov_dist: s.min_ov_dist,
            max_violation: s.max_violation,
            mean_plan_ms: s.mean_plan_ms,
            final_speed: s.final_state.map_or(f64::NAN, |f| f.v),
        };
        if !csv.is_null() {
            *csv = CString::new(out.trace.to_csv(true)).unwrap().into_raw();
        }
        match out.error {
            Some(e) => from_core(e),
            None => MpicStatus::Ok,
        }
    })
}

/// # Safety
/// `ctrl` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn mpic_controller_free(ctrl: *mut MpicController) {
    if !ctrl.is_null() {
        drop(Box::from_raw(ctrl));
    }
}
