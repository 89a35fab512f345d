//! C interface to `noir-core`.
//!
//! Objects are opaque handles created by `*_new`/`*_from_json` style
//! constructors and released with the matching `*_free`. Every fallible call
//! returns a [`NoirStatus`]; on failure a message is available from
//! [`noir_last_error`] on the same thread until the next failing call.
//! Matrices are dense and row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use nalgebra::{DMatrix, DVector};
use noir_core::network::{check_theorem1_paths, GraphDocument, NoirGraph};
use noir_core::qp::{self, QpProblem, QpStatus};
use noir_core::scenario::Scenario;
use noir_core::sim::{self, RunTrace, Summary};
use noir_core::tendency::{spectral_radius, SPECTRAL_MAX_ITER, SPECTRAL_TOL};
use noir_core::trace::write_trace;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoirStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    ParseError = 3,
    RunAborted = 4,
    IoError = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoirQpStatus {
    Optimal = 0,
    Infeasible = 1,
    IterationLimit = 2,
    Inaccurate = 3,
}

impl From<QpStatus> for NoirQpStatus {
    fn from(s: QpStatus) -> Self {
        match s {
            QpStatus::Optimal => NoirQpStatus::Optimal,
            QpStatus::Infeasible => NoirQpStatus::Infeasible,
            QpStatus::IterationLimit => NoirQpStatus::IterationLimit,
            QpStatus::Inaccurate => NoirQpStatus::Inaccurate,
        }
    }
}

/// Opaque resolved scenario.
pub struct NoirScenario(Scenario);

/// Opaque run result.
pub struct NoirTrace {
    trace: RunTrace,
    summary: Summary,
}

/// Opaque network graph.
pub struct NoirNetwork(NoirGraph);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: NoirStatus, msg: impl Into<String>) -> NoirStatus {
    set_error(msg);
    status
}

/// Runs `f`, turning panics into `Panic`.
fn guard<F: FnOnce() -> NoirStatus>(f: F) -> NoirStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(NoirStatus::Panic, "panic inside noir"),
    }
}

unsafe fn read_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, NoirStatus> {
    if s.is_null() {
        return Err(fail(NoirStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| fail(NoirStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn read_slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], NoirStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(NoirStatus::NullArgument, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Copies `text` plus a terminating NUL into `buf`. `needed` receives the
/// full size including the NUL.
unsafe fn copy_out(text: &str, buf: *mut c_char, len: usize, needed: *mut usize) -> NoirStatus {
    let bytes = text.as_bytes();
    if !needed.is_null() {
        *needed = bytes.len() + 1;
    }
    if buf.is_null() || len < bytes.len() + 1 {
        return fail(NoirStatus::BufferTooSmall, format!("need {} bytes", bytes.len() + 1));
    }
    ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, bytes.len());
    *buf.add(bytes.len()) = 0;
    NoirStatus::Ok
}

macro_rules! try_ffi {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(status) => return status,
        }
    };
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn noir_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn noir_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Parses and resolves a scenario document.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn noir_scenario_from_json(
    json: *const c_char,
    out: *mut *mut NoirScenario,
) -> NoirStatus {
    guard(|| {
        if out.is_null() {
            return fail(NoirStatus::NullArgument, "out is null");
        }
        let text = try_ffi!(read_str(json, "json"));
        match Scenario::from_json(text) {
            Ok(s) => {
                *out = Box::into_raw(Box::new(NoirScenario(s)));
                NoirStatus::Ok
            }
            Err(e) => fail(NoirStatus::ParseError, e.to_string()),
        }
    })
}

/// The bundled 64-element reference scenario.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn noir_scenario_reference(out: *mut *mut NoirScenario) -> NoirStatus {
    guard(|| {
        if out.is_null() {
            return fail(NoirStatus::NullArgument, "out is null");
        }
        *out = Box::into_raw(Box::new(NoirScenario(Scenario::reference())));
        NoirStatus::Ok
    })
}

/// # Safety
/// `s` must come from a scenario constructor and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn noir_scenario_free(s: *mut NoirScenario) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Interior element count, inlet count and run length.
///
/// # Safety
/// `s` must be a live scenario; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn noir_scenario_dims(
    s: *const NoirScenario,
    n_interior: *mut usize,
    n_in: *mut usize,
    steps: *mut usize,
) -> NoirStatus {
    let Some(s) = s.as_ref() else {
        return fail(NoirStatus::NullArgument, "scenario is null");
    };
    for (p, v) in [
        (n_interior, s.0.graph.n_interior()),
        (n_in, s.0.graph.n_in()),
        (steps, s.0.steps),
    ] {
        if !p.is_null() {
            *p = v;
        }
    }
    NoirStatus::Ok
}

/// Runs the closed loop. A trace is produced even when the run aborts; the
/// status is then `RunAborted`.
///
/// # Safety
/// `s` must be a live scenario and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn noir_run(s: *const NoirScenario, out: *mut *mut NoirTrace) -> NoirStatus {
    guard(|| {
        let Some(s) = s.as_ref() else {
            return fail(NoirStatus::NullArgument, "scenario is null");
        };
        if out.is_null() {
            return fail(NoirStatus::NullArgument, "out is null");
        }
        let trace = match sim::run(&s.0) {
            Ok(t) => t,
            Err(e) => return fail(NoirStatus::InvalidArgument, e.to_string()),
        };
        let summary = sim::summarize(&trace);
        let aborted = summary.aborted.clone();
        *out = Box::into_raw(Box::new(NoirTrace { trace, summary }));
        match aborted {
            Some(msg) => fail(NoirStatus::RunAborted, msg),
            None => NoirStatus::Ok,
        }
    })
}

/// # Safety
/// `t` must come from [`noir_run`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn noir_trace_free(t: *mut NoirTrace) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Number of completed steps and monitor violations.
///
/// # Safety
/// `t` must be a live trace; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn noir_trace_counts(
    t: *const NoirTrace,
    steps: *mut usize,
    violations: *mut usize,
) -> NoirStatus {
    let Some(t) = t.as_ref() else {
        return fail(NoirStatus::NullArgument, "trace is null");
    };
    if !steps.is_null() {
        *steps = t.trace.steps.len();
    }
    if !violations.is_null() {
        *violations = t.trace.violations.len();
    }
    NoirStatus::Ok
}

/// Copies the densities at state `step` (0 is the initial state) into `out`.
///
/// # Safety
/// `t` must be a live trace and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn noir_trace_densities(
    t: *const NoirTrace,
    step: usize,
    out: *mut f64,
    len: usize,
) -> NoirStatus {
    let Some(t) = t.as_ref() else {
        return fail(NoirStatus::NullArgument, "trace is null");
    };
    let Some(state) = t.trace.trajectory.states.get(step) else {
        return fail(NoirStatus::InvalidArgument, format!("no state {step}"));
    };
    copy_vec(state.densities.as_slice(), out, len)
}

/// Copies the inflows applied at `step` into `out`.
///
/// # Safety
/// `t` must be a live trace and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn noir_trace_inputs(
    t: *const NoirTrace,
    step: usize,
    out: *mut f64,
    len: usize,
) -> NoirStatus {
    let Some(t) = t.as_ref() else {
        return fail(NoirStatus::NullArgument, "trace is null");
    };
    let Some(u) = t.trace.trajectory.inputs.get(step) else {
        return fail(NoirStatus::InvalidArgument, format!("no input {step}"));
    };
    copy_vec(u.inflows.as_slice(), out, len)
}

unsafe fn copy_vec(src: &[f64], out: *mut f64, len: usize) -> NoirStatus {
    if out.is_null() {
        return fail(NoirStatus::NullArgument, "out is null");
    }
    if len < src.len() {
        return fail(NoirStatus::BufferTooSmall, format!("need {} values", src.len()));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    NoirStatus::Ok
}

/// Summary as JSON. Call with a null buffer to learn the size in `needed`.
///
/// # Safety
/// `t` must be a live trace; `buf` must hold `len` bytes or be null.
#[no_mangle]
pub unsafe extern "C" fn noir_trace_summary_json(
    t: *const NoirTrace,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> NoirStatus {
    let Some(t) = t.as_ref() else {
        return fail(NoirStatus::NullArgument, "trace is null");
    };
    match serde_json::to_string(&t.summary) {
        Ok(text) => copy_out(&text, buf, len, needed),
        Err(e) => fail(NoirStatus::IoError, e.to_string()),
    }
}

/// Writes the CSV trace files and `summary.json` into `dir`.
///
/// # Safety
/// `t` must be a live trace and `dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn noir_trace_write(t: *const NoirTrace, dir: *const c_char) -> NoirStatus {
    guard(|| {
        let Some(t) = t.as_ref() else {
            return fail(NoirStatus::NullArgument, "trace is null");
        };
        let dir = try_ffi!(read_str(dir, "dir"));
        match write_trace(Path::new(dir), &t.trace, &t.summary) {
            Ok(_) => NoirStatus::Ok,
            Err(e) => fail(NoirStatus::IoError, e.to_string()),
        }
    })
}

/// Parses a graph document `{"n_in", "n_out_end", "n_total", "edges"}`.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn noir_graph_from_json(
    json: *const c_char,
    out: *mut *mut NoirNetwork,
) -> NoirStatus {
    guard(|| {
        if out.is_null() {
            return fail(NoirStatus::NullArgument, "out is null");
        }
        let text = try_ffi!(read_str(json, "json"));
        let doc: GraphDocument = match serde_json::from_str(text) {
            Ok(d) => d,
            Err(e) => return fail(NoirStatus::ParseError, e.to_string()),
        };
        match NoirGraph::try_from(doc) {
            Ok(g) => {
                *out = Box::into_raw(Box::new(NoirNetwork(g)));
                NoirStatus::Ok
            }
            Err(e) => fail(NoirStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// # Safety
/// `g` must come from [`noir_graph_from_json`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn noir_graph_free(g: *mut NoirNetwork) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// Path conditions: every interior element reachable from an inlet, and
/// every interior element reaching an outlet. Flags are 1 or 0.
///
/// # Safety
/// `g` must be a live graph; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn noir_graph_check_paths(
    g: *const NoirNetwork,
    inlet_ok: *mut i32,
    outlet_ok: *mut i32,
) -> NoirStatus {
    let Some(g) = g.as_ref() else {
        return fail(NoirStatus::NullArgument, "graph is null");
    };
    let r = check_theorem1_paths(&g.0);
    if !inlet_ok.is_null() {
        *inlet_ok = r.inlet_reachability as i32;
    }
    if !outlet_ok.is_null() {
        *outlet_ok = r.outlet_reachability as i32;
    }
    NoirStatus::Ok
}

/// Spectral radius of a nonnegative `n × n` row-major matrix.
///
/// # Safety
/// `m` must hold `n * n` doubles and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn noir_spectral_radius(m: *const f64, n: usize, out: *mut f64) -> NoirStatus {
    guard(|| {
        if out.is_null() {
            return fail(NoirStatus::NullArgument, "out is null");
        }
        let data = try_ffi!(read_slice(m, n * n, "m"));
        match spectral_radius(&DMatrix::from_row_slice(n, n, data), SPECTRAL_TOL, SPECTRAL_MAX_ITER) {
            Ok(r) => {
                *out = r;
                NoirStatus::Ok
            }
            Err(e) => fail(NoirStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Solves `min ½ zᵀHz + gᵀz` s.t. `G z ≤ h`, `E z = f`.
///
/// `H` is `n × n`, `G` is `m_ineq × n`, `E` is `m_eq × n`, all row-major.
/// On return `z` (length `n`) and `objective` hold the final iterate
/// whatever the QP status; the status lands in `qp_status`.
///
/// # Safety
/// Every array must hold the number of doubles its dimensions imply and the
/// output pointers must be valid.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn noir_qp_solve(
    n: usize,
    h: *const f64,
    g: *const f64,
    m_ineq: usize,
    ineq: *const f64,
    ineq_rhs: *const f64,
    m_eq: usize,
    eq: *const f64,
    eq_rhs: *const f64,
    z: *mut f64,
    objective: *mut f64,
    qp_status: *mut NoirQpStatus,
) -> NoirStatus {
    guard(|| {
        if z.is_null() || objective.is_null() || qp_status.is_null() {
            return fail(NoirStatus::NullArgument, "output pointer is null");
        }
        let hm = DMatrix::from_row_slice(n, n, try_ffi!(read_slice(h, n * n, "H")));
        let gv = DVector::from_column_slice(try_ffi!(read_slice(g, n, "g")));
        let im = DMatrix::from_row_slice(m_ineq, n, try_ffi!(read_slice(ineq, m_ineq * n, "G")));
        let iv = DVector::from_column_slice(try_ffi!(read_slice(ineq_rhs, m_ineq, "h")));
        let em = DMatrix::from_row_slice(m_eq, n, try_ffi!(read_slice(eq, m_eq * n, "E")));
        let ev = DVector::from_column_slice(try_ffi!(read_slice(eq_rhs, m_eq, "f")));
        let problem = match QpProblem::new(hm, gv, im, iv, em, ev) {
            Ok(p) => p,
            Err(e) => return fail(NoirStatus::InvalidArgument, e.to_string()),
        };
        let sol = qp::solve(&problem, qp::INTERNAL_TOL, qp::DEFAULT_MAX_ITER);
        ptr::copy_nonoverlapping(sol.z.as_ptr(), z, n);
        *objective = sol.objective;
        *qp_status = sol.status.into();
        NoirStatus::Ok
    })
}
