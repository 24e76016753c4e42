//! C ABI over the stratsim pipeline.
//!
//! Every object is an opaque handle created by a `*_load` function and
//! released by the matching `*_free`. Functions return an [`SsStatus`]; the
//! message of the last failure on the calling thread is available from
//! [`ss_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use stratsim::{
    ClusterSpec, ComputeCostTable, CorrectionFactors, Error, ModelGraph, SimOptions, SimReport, StrategyTree,
};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    InvalidInput = 4,
    CompileFailed = 5,
    MissingCost = 6,
    SimulationFailed = 7,
    OutOfRange = 8,
    Panic = 9,
}

pub struct SsModel(ModelGraph);
pub struct SsStrategy {
    tree: StrategyTree,
    /// Number of layers of the model the tree was built for.
    layers: usize,
}
pub struct SsCluster(ClusterSpec);
pub struct SsCosts(ComputeCostTable);
pub struct SsReport(SimReport);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn classify(e: &Error) -> SsStatus {
    use stratsim::cost::CostError;
    use stratsim::error::{ClusterError, ModelError, StrategyError};
    match e {
        Error::Model(ModelError::Io { .. })
        | Error::Strategy(StrategyError::Io { .. })
        | Error::Cluster(ClusterError::Io { .. })
        | Error::Cost(CostError::Io { .. }) => SsStatus::Io,
        Error::Cost(CostError::Missing(_)) => SsStatus::MissingCost,
        Error::Compile(_) | Error::Transform(_) => SsStatus::CompileFailed,
        Error::Sim(_) => SsStatus::SimulationFailed,
        _ => SsStatus::InvalidInput,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (SsStatus, String)>) -> SsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SsStatus::Ok,
        Ok(Err((s, m))) => {
            set_error(m);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            SsStatus::Panic
        }
    }
}

fn fail(e: Error) -> (SsStatus, String) {
    (classify(&e), e.to_string())
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a str, (SsStatus, String)> {
    if p.is_null() {
        return Err((SsStatus::NullArgument, "path is null".into()));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (SsStatus::InvalidUtf8, "path is not valid UTF-8".into()))
}

fn read(path: &str) -> Result<String, (SsStatus, String)> {
    std::fs::read_to_string(path).map_err(|e| (SsStatus::Io, format!("cannot read {path}: {e}")))
}

unsafe fn store<T>(out: *mut *mut T, v: T) -> Result<(), (SsStatus, String)> {
    if out.is_null() {
        return Err((SsStatus::NullArgument, "output pointer is null".into()));
    }
    *out = Box::into_raw(Box::new(v));
    Ok(())
}

unsafe fn get<'a, T>(p: *const T, what: &str) -> Result<&'a T, (SsStatus, String)> {
    p.as_ref()
        .ok_or_else(|| (SsStatus::NullArgument, format!("{what} handle is null")))
}

/// Message of the last failed call on this thread, or null.
///
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ss_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn ss_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Loads a model file and derives its backward pass.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_model_load(path: *const c_char, out: *mut *mut SsModel) -> SsStatus {
    guard(|| {
        let text = read(path_arg(path)?)?;
        let m = stratsim::prepare_model(&text).map_err(fail)?;
        store(out, SsModel(m))
    })
}

/// # Safety
/// `m` must come from [`ss_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ss_model_free(m: *mut SsModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Number of layers in a model, or 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn ss_model_layer_count(m: *const SsModel) -> usize {
    m.as_ref().map_or(0, |m| m.0.layers.len())
}

/// Loads a strategy file for `model` and propagates it.
///
/// # Safety
/// `model` must be a live handle, `path` a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ss_strategy_load(
    model: *const SsModel,
    path: *const c_char,
    out: *mut *mut SsStrategy,
) -> SsStatus {
    guard(|| {
        let m = get(model, "model")?;
        let text = read(path_arg(path)?)?;
        let tree = stratsim::prepare_strategy(&m.0, &text).map_err(fail)?;
        store(
            out,
            SsStrategy {
                tree,
                layers: m.0.layers.len(),
            },
        )
    })
}

/// # Safety
/// `s` must come from [`ss_strategy_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ss_strategy_free(s: *mut SsStrategy) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_cluster_load(path: *const c_char, out: *mut *mut SsCluster) -> SsStatus {
    guard(|| {
        let c = stratsim::load_cluster(path_arg(path)?).map_err(|e| fail(e.into()))?;
        store(out, SsCluster(c))
    })
}

/// # Safety
/// `c` must come from [`ss_cluster_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ss_cluster_free(c: *mut SsCluster) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Number of devices in a cluster, or 0 for a null handle.
///
/// # Safety
/// `c` must be null or a live cluster handle.
#[no_mangle]
pub unsafe extern "C" fn ss_cluster_device_count(c: *const SsCluster) -> usize {
    c.as_ref().map_or(0, |c| c.0.n_devices())
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_costs_load(path: *const c_char, out: *mut *mut SsCosts) -> SsStatus {
    guard(|| {
        let t = stratsim::load_cost_table(path_arg(path)?).map_err(|e| fail(e.into()))?;
        store(out, SsCosts(t))
    })
}

/// # Safety
/// `c` must come from [`ss_costs_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ss_costs_free(c: *mut SsCosts) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Compiles and simulates one strategy with default correction factors.
///
/// # Safety
/// All handles must be live and `out` writable. The strategy must have been
/// loaded for `model`.
#[no_mangle]
pub unsafe extern "C" fn ss_simulate(
    model: *const SsModel,
    strategy: *const SsStrategy,
    cluster: *const SsCluster,
    costs: *const SsCosts,
    gamma: f64,
    out: *mut *mut SsReport,
) -> SsStatus {
    guard(|| {
        let m = get(model, "model")?;
        let s = get(strategy, "strategy")?;
        let c = get(cluster, "cluster")?;
        let t = get(costs, "costs")?;
        if s.layers != m.0.layers.len() {
            return Err((SsStatus::InvalidInput, "strategy was loaded for a different model".into()));
        }
        let opts = SimOptions {
            gamma,
            ..Default::default()
        };
        let (_, r) = stratsim::run(&m.0, &s.tree, &c.0, &t.0, &CorrectionFactors::default(), &opts).map_err(fail)?;
        store(out, SsReport(r))
    })
}

/// # Safety
/// `r` must come from [`ss_simulate`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ss_report_free(r: *mut SsReport) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Predicted iteration time in seconds, or NaN for a null handle.
///
/// # Safety
/// `r` must be null or a live report handle.
#[no_mangle]
pub unsafe extern "C" fn ss_report_iteration_time(r: *const SsReport) -> f64 {
    r.as_ref().map_or(f64::NAN, |r| r.0.iteration_time)
}

/// Samples per second, or NaN for a null handle.
///
/// # Safety
/// `r` must be null or a live report handle.
#[no_mangle]
pub unsafe extern "C" fn ss_report_throughput(r: *const SsReport) -> f64 {
    r.as_ref().map_or(f64::NAN, |r| r.0.throughput)
}

/// 1 if any device is predicted to run out of memory, 0 otherwise.
///
/// # Safety
/// `r` must be null or a live report handle.
#[no_mangle]
pub unsafe extern "C" fn ss_report_oom(r: *const SsReport) -> i32 {
    r.as_ref().map_or(0, |r| i32::from(r.0.oom))
}

/// # Safety
/// `r` must be null or a live report handle.
#[no_mangle]
pub unsafe extern "C" fn ss_report_device_count(r: *const SsReport) -> usize {
    r.as_ref().map_or(0, |r| r.0.devices.len())
}

/// Peak memory of one device in bytes.
///
/// # Safety
/// `r` must be a live report handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ss_report_peak_bytes(r: *const SsReport, device: usize, out: *mut u64) -> SsStatus {
    guard(|| {
        let r = get(r, "report")?;
        let d = r
            .0
            .devices
            .get(device)
            .ok_or_else(|| (SsStatus::OutOfRange, format!("device {device} out of range")))?;
        if out.is_null() {
            return Err((SsStatus::NullArgument, "output pointer is null".into()));
        }
        *out = d.peak_bytes;
        Ok(())
    })
}

/// The full report as JSON; release it with [`ss_string_free`].
///
/// # Safety
/// `r` must be a live report handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ss_report_to_json(r: *const SsReport, out: *mut *mut c_char) -> SsStatus {
    guard(|| {
        let r = get(r, "report")?;
        if out.is_null() {
            return Err((SsStatus::NullArgument, "output pointer is null".into()));
        }
        let s = CString::new(r.0.to_json()).map_err(|_| (SsStatus::InvalidInput, "report contains NUL".into()))?;
        *out = s.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, freed only once.
#[no_mangle]
pub unsafe extern "C" fn ss_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
