//! C ABI over `fedloc`: opaque problem handles, status codes and a
//! thread-local last-error message.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fedloc::experiment::{run_algorithm, Algorithm};
use fedloc::fedsim::FederationConfig;
use fedloc::localize::{smooth_lambda, DriverOptions};
use fedloc::privacy::{calibrate_sigma2, PrivacyBudget};
use fedloc::problems::{gen_binary_heterolabel, gen_heterogeneous_quadratic, FederatedProblem, HeteroLabelSpec, QuadraticSpec};
use fedloc::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Infeasible = 4,
    BudgetHypothesis = 5,
    Numerical = 6,
    Io = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Which driver `fl_run` executes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlAlgorithm {
    Smooth = 0,
    Subgradient = 1,
    Convolution = 2,
    Nesterov = 3,
    OnePassBaseline = 4,
}

impl From<FlAlgorithm> for Algorithm {
    fn from(a: FlAlgorithm) -> Self {
        match a {
            FlAlgorithm::Smooth => Algorithm::Alg1Smooth,
            FlAlgorithm::Subgradient => Algorithm::Alg4Subgrad,
            FlAlgorithm::Convolution => Algorithm::Alg5Conv,
            FlAlgorithm::Nesterov => Algorithm::Alg1Nesterov,
            FlAlgorithm::OnePassBaseline => Algorithm::OnePassBaseline,
        }
    }
}

/// Counters and metrics of one run. Metrics a problem cannot evaluate are NaN.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FlRunStats {
    pub comm_rounds: u64,
    pub grad_calls: u64,
    pub excess_risk: f64,
    pub test_error: f64,
}

/// Opaque federated problem.
pub struct FlProblem {
    inner: FederatedProblem,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> FlStatus {
    match e {
        Error::DimensionMismatch { .. } | Error::ScheduleMismatch(_) => FlStatus::DimensionMismatch,
        Error::InfeasibleDomain(_) | Error::CompositionViolation { .. } => FlStatus::Infeasible,
        Error::BudgetHypothesis { .. } => FlStatus::BudgetHypothesis,
        Error::ProjectionStalled { .. } | Error::ProxStalled { .. } | Error::EmptyRound { .. } => FlStatus::Numerical,
        Error::Io(_) | Error::Csv(_) | Error::Schema(_) => FlStatus::Io,
        _ => FlStatus::InvalidArgument,
    }
}

/// Runs `f`, turning errors and panics into a status plus last-error text.
fn guard(f: impl FnOnce() -> Result<(), (FlStatus, String)>) -> FlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FlStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            FlStatus::Panic
        }
    }
}

fn lift<T>(r: fedloc::Result<T>) -> Result<T, (FlStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (FlStatus, String) {
    (FlStatus::NullPointer, format!("`{what}` is null"))
}

fn budget(epsilon: f64, delta: f64) -> fedloc::Result<PrivacyBudget> {
    if epsilon.is_infinite() && epsilon > 0.0 {
        let b = PrivacyBudget::non_private(delta);
        b.validate()?;
        Ok(b)
    } else {
        PrivacyBudget::new(epsilon, delta)
    }
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fl_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version string"),
    };
    VERSION.as_ptr()
}

/// Synthetic heterogeneous quadratic problem.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn fl_problem_quadratic_new(
    n_silos: usize,
    n_per_silo: usize,
    dim: usize,
    centers_spread: f64,
    seed: u64,
    out: *mut *mut FlProblem,
) -> FlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = lift(gen_heterogeneous_quadratic(&QuadraticSpec::new(n_silos, n_per_silo, dim, centers_spread, seed)))?;
        // SAFETY: checked non-null; caller provides writable storage.
        unsafe { *out = Box::into_raw(Box::new(FlProblem { inner: p })) };
        Ok(())
    })
}

/// Synthetic binary classification problem with per-silo label sets.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn fl_problem_heterolabel_new(
    n_silos: usize,
    n_per_silo: usize,
    dim: usize,
    seed: u64,
    out: *mut *mut FlProblem,
) -> FlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = lift(gen_binary_heterolabel(&HeteroLabelSpec::new(n_silos, n_per_silo, dim, seed)))?;
        // SAFETY: checked non-null.
        unsafe { *out = Box::into_raw(Box::new(FlProblem { inner: p })) };
        Ok(())
    })
}

/// Releases a problem. NULL is ignored.
///
/// # Safety
/// `problem` must come from a `fl_problem_*_new` call and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fl_problem_free(problem: *mut FlProblem) {
    if !problem.is_null() {
        // SAFETY: allocated by Box::into_raw in a constructor.
        drop(unsafe { Box::from_raw(problem) });
    }
}

/// Model dimension, or 0 for NULL.
///
/// # Safety
/// `problem` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fl_problem_dim(problem: *const FlProblem) -> usize {
    // SAFETY: caller guarantees validity.
    unsafe { problem.as_ref() }.map_or(0, |p| p.inner.dim())
}

/// Runs one driver and writes the output model into `w_out[0..w_len]`.
/// `epsilon` may be `INFINITY` for a non-private run. `stats` may be NULL.
///
/// # Safety
/// `problem` must be a live handle; `w_out` must point to `w_len` writable
/// doubles; `stats` must be NULL or writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn fl_run(
    problem: *const FlProblem,
    algorithm: FlAlgorithm,
    epsilon: f64,
    delta: f64,
    m_available: usize,
    seed: u64,
    multiplier: f64,
    w_out: *mut f64,
    w_len: usize,
    stats: *mut FlRunStats,
) -> FlStatus {
    guard(|| {
        // SAFETY: caller guarantees validity.
        let p = &unsafe { problem.as_ref() }.ok_or_else(|| null("problem"))?.inner;
        if w_out.is_null() {
            return Err(null("w_out"));
        }
        if w_len < p.dim() {
            return Err((FlStatus::BufferTooSmall, format!("w_out holds {w_len} values, model has {}", p.dim())));
        }
        let b = lift(budget(epsilon, delta))?;
        let options = DriverOptions {
            multiplier,
            ..DriverOptions::default()
        };
        let fed = FederationConfig::partial(p.n_silos(), m_available, seed);
        let out = lift(run_algorithm(p, algorithm.into(), b, fed, &options, None, false))?;
        // SAFETY: w_out has at least dim writable slots.
        unsafe { ptr::copy_nonoverlapping(out.w.as_ptr(), w_out, p.dim()) };
        // SAFETY: caller guarantees stats is NULL or writable.
        if let Some(s) = unsafe { stats.as_mut() } {
            *s = FlRunStats {
                comm_rounds: out.ledger.comm_rounds(),
                grad_calls: out.ledger.grad_calls(),
                excess_risk: p.excess_risk(&out.w).unwrap_or(f64::NAN),
                test_error: p.test_error(&out.w).unwrap_or(f64::NAN),
            };
        }
        Ok(())
    })
}

/// Per-coordinate Gaussian noise variance for `rounds` releases on a phase
/// of `n_phase` samples.
///
/// # Safety
/// `out` must be a valid pointer to one writable double.
#[no_mangle]
pub unsafe extern "C" fn fl_calibrate_sigma2(
    lipschitz: f64,
    rounds: u64,
    n_phase: usize,
    epsilon: f64,
    delta: f64,
    out: *mut f64,
) -> FlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let b = lift(budget(epsilon, delta))?;
        let v = lift(calibrate_sigma2(lipschitz, rounds, n_phase, &b))?;
        // SAFETY: checked non-null.
        unsafe { *out = v };
        Ok(())
    })
}

/// Base regularization of the smooth localized schedule.
///
/// # Safety
/// `out` must be a valid pointer to one writable double.
#[no_mangle]
pub unsafe extern "C" fn fl_smooth_lambda(
    lipschitz: f64,
    diameter: f64,
    m_available: usize,
    n: usize,
    dim: usize,
    epsilon: f64,
    delta: f64,
    out: *mut f64,
) -> FlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if !(lipschitz > 0.0 && diameter > 0.0) || m_available == 0 || n == 0 || dim == 0 {
            return Err((FlStatus::InvalidArgument, "lipschitz, diameter, m, n, dim must be positive".into()));
        }
        let b = lift(budget(epsilon, delta))?;
        // SAFETY: checked non-null.
        unsafe { *out = smooth_lambda(lipschitz, diameter, m_available, n, dim, &b) };
        Ok(())
    })
}

/// Runs the built-in invariant checks; returns the number that failed.
#[no_mangle]
pub extern "C" fn fl_selftest() -> u32 {
    catch_unwind(|| fedloc::selftest::run_selftest().iter().filter(|r| !r.passed).count() as u32).unwrap_or(u32::MAX)
}
