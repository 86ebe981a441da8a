//! C ABI over `qoc_codesign`.
//!
//! Every fallible call returns a [`QocStatus`]; on failure the message is
//! available from [`qoc_last_error`] on the same thread. Handles are opaque
//! and must be released with their matching `_free` function.
//!
//! Schedules cross the boundary as flat `double` arrays laid out
//! `[(channel * 2 + ring) * n_segments + segment]`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use qoc_codesign::diffengine::value_and_grad;
use qoc_codesign::harness::{dump, parse_config, preset, ExperimentConfig};
use qoc_codesign::qsim::Simulator;
use qoc_codesign::report::OptimizerReport;
use qoc_codesign::schedule::ControlSchedule;
use qoc_codesign::QocError;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QocStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Dimension = 4,
    Constraint = 5,
    InvalidArgument = 6,
    Io = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Opaque simulator bound to one resolved config and run seed.
pub struct QocSimulator {
    sim: Simulator,
}

/// Opaque optimizer report.
pub struct QocReport {
    report: OptimizerReport,
    json: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &QocError) -> QocStatus {
    match e {
        QocError::Schema { .. }
        | QocError::Parse(_)
        | QocError::Serialize(_)
        | QocError::UnknownPreset(_) => QocStatus::Config,
        QocError::UnknownGate(_) | QocError::EmptyGate => QocStatus::Config,
        QocError::DimensionMismatch { .. } | QocError::SegmentMismatch { .. } => {
            QocStatus::Dimension
        }
        QocError::ConstraintViolation { .. } => QocStatus::Constraint,
        QocError::InvalidPair { .. } | QocError::InvalidParameter(_) => QocStatus::InvalidArgument,
        QocError::Io(_) | QocError::Json(_) | QocError::Csv(_) => QocStatus::Io,
    }
}

struct Fail(QocStatus, String);

impl From<QocError> for Fail {
    fn from(e: QocError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> QocStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => QocStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            QocStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(QocStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(QocStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref()
        .ok_or_else(|| Fail(QocStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut()
        .ok_or_else(|| Fail(QocStatus::NullPointer, format!("{what} is null")))
}

unsafe fn schedule_arg(
    sim: &Simulator,
    volts: *const f64,
    len: usize,
    n_segments: usize,
) -> Result<ControlSchedule, Fail> {
    if volts.is_null() {
        return Err(Fail(QocStatus::NullPointer, "volts is null".into()));
    }
    let data = std::slice::from_raw_parts(volts, len).to_vec();
    let s = ControlSchedule::from_vec(sim.n_channels(), n_segments, data)?;
    s.validate(sim.n_channels(), sim.t_steps())?;
    Ok(s)
}

fn boxed_sim(cfg: &ExperimentConfig, seed: u64) -> Result<*mut QocSimulator, Fail> {
    let sim = cfg.simulator(seed)?;
    Ok(Box::into_raw(Box::new(QocSimulator { sim })))
}

/// Message of the last failed call on this thread; empty if none.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn qoc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn qoc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Simulator for the task of `seed` under a TOML experiment config.
#[no_mangle]
pub unsafe extern "C" fn qoc_simulator_from_config(
    config_toml: *const c_char,
    seed: u64,
    out: *mut *mut QocSimulator,
) -> QocStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let cfg = parse_config(str_arg(config_toml, "config_toml")?)?;
        *out = boxed_sim(&cfg, seed)?;
        Ok(())
    })
}

/// Simulator for a named preset; `index` selects among expanded configs (pitch sweep).
#[no_mangle]
pub unsafe extern "C" fn qoc_simulator_from_preset(
    name: *const c_char,
    index: usize,
    seed: u64,
    out: *mut *mut QocSimulator,
) -> QocStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let cfgs = preset(str_arg(name, "name")?)?;
        let cfg = cfgs.get(index).ok_or_else(|| {
            Fail(
                QocStatus::InvalidArgument,
                format!("preset has {} configs, index {index}", cfgs.len()),
            )
        })?;
        *out = boxed_sim(cfg, seed)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn qoc_simulator_free(sim: *mut QocSimulator) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Channel count, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn qoc_simulator_n_channels(sim: *const QocSimulator) -> usize {
    sim.as_ref().map_or(0, |s| s.sim.n_channels())
}

#[no_mangle]
pub unsafe extern "C" fn qoc_simulator_t_steps(sim: *const QocSimulator) -> usize {
    sim.as_ref().map_or(0, |s| s.sim.t_steps())
}

/// Number of doubles in a schedule with `n_segments` segments.
#[no_mangle]
pub unsafe extern "C" fn qoc_simulator_schedule_len(
    sim: *const QocSimulator,
    n_segments: usize,
) -> usize {
    sim.as_ref()
        .map_or(0, |s| s.sim.n_channels() * 2 * n_segments)
}

/// Gate fidelity of a voltage schedule.
#[no_mangle]
pub unsafe extern "C" fn qoc_simulator_fidelity(
    sim: *const QocSimulator,
    volts: *const f64,
    len: usize,
    n_segments: usize,
    fidelity: *mut f64,
) -> QocStatus {
    guard(|| {
        let sim = &ref_arg(sim, "sim")?.sim;
        let out = out_arg(fidelity, "fidelity")?;
        let s = schedule_arg(sim, volts, len, n_segments)?;
        *out = sim.fidelity(&s)?;
        Ok(())
    })
}

/// Cost `1 - F` and its gradient with respect to every voltage; `grad` holds `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn qoc_simulator_cost_grad(
    sim: *const QocSimulator,
    volts: *const f64,
    len: usize,
    n_segments: usize,
    cost: *mut f64,
    grad: *mut f64,
) -> QocStatus {
    guard(|| {
        let sim = &ref_arg(sim, "sim")?.sim;
        let cost = out_arg(cost, "cost")?;
        if grad.is_null() {
            return Err(Fail(QocStatus::NullPointer, "grad is null".into()));
        }
        let s = schedule_arg(sim, volts, len, n_segments)?;
        let (c, g) = value_and_grad(sim, &s)?;
        *cost = c;
        std::slice::from_raw_parts_mut(grad, len).copy_from_slice(g.as_slice());
        Ok(())
    })
}

/// Runs the configured optimizer for one seed. Nothing is written to disk.
#[no_mangle]
pub unsafe extern "C" fn qoc_optimize(
    config_toml: *const c_char,
    seed: u64,
    out: *mut *mut QocReport,
) -> QocStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let cfg = parse_config(str_arg(config_toml, "config_toml")?)?;
        let report = cfg.optimize(seed)?;
        let json = serde_json::to_string(&report).map_err(QocError::from)?;
        let json = CString::new(json).map_err(|e| Fail(QocStatus::Io, e.to_string()))?;
        *out = Box::into_raw(Box::new(QocReport { report, json }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn qoc_report_free(report: *mut QocReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Final gate error, or NaN for a null handle.
#[no_mangle]
pub unsafe extern "C" fn qoc_report_final_error(report: *const QocReport) -> f64 {
    report.as_ref().map_or(f64::NAN, |r| r.report.final_error)
}

#[no_mangle]
pub unsafe extern "C" fn qoc_report_n_segments(report: *const QocReport) -> usize {
    report
        .as_ref()
        .map_or(0, |r| r.report.best_schedule.n_segments())
}

/// Copies the best schedule into `out`. With `*len` too small, writes the
/// needed length and returns `BufferTooSmall`.
#[no_mangle]
pub unsafe extern "C" fn qoc_report_best_schedule(
    report: *const QocReport,
    out: *mut f64,
    len: *mut usize,
) -> QocStatus {
    guard(|| {
        let r = ref_arg(report, "report")?;
        let len = out_arg(len, "len")?;
        let data = r.report.best_schedule.as_slice();
        if *len < data.len() || out.is_null() {
            *len = data.len();
            return Err(Fail(
                QocStatus::BufferTooSmall,
                format!("need {} doubles", data.len()),
            ));
        }
        std::slice::from_raw_parts_mut(out, data.len()).copy_from_slice(data);
        *len = data.len();
        Ok(())
    })
}

/// JSON of the full report, owned by the handle.
#[no_mangle]
pub unsafe extern "C" fn qoc_report_json(report: *const QocReport) -> *const c_char {
    report.as_ref().map_or(ptr::null(), |r| r.json.as_ptr())
}

/// Canonical TOML of a resolved config. Free with [`qoc_string_free`].
#[no_mangle]
pub unsafe extern "C" fn qoc_config_resolve(
    config_toml: *const c_char,
    out: *mut *mut c_char,
) -> QocStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let cfg = parse_config(str_arg(config_toml, "config_toml")?)?;
        let text = CString::new(dump(&cfg)?).map_err(|e| Fail(QocStatus::Io, e.to_string()))?;
        *out = text.into_raw();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn qoc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
