//! C ABI over `gdiff-core`.
//!
//! Every entry point returns a [`GdiffStatus`]; on failure the message is
//! available from [`gdiff_last_error`] on the same thread. Handles are opaque
//! and released with their matching `_free` function. Strings returned through
//! out-pointers are owned by the caller and released with
//! [`gdiff_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use gdiff::config::ExperimentConfig;
use gdiff::g::{CovarianceSet, SymMatrix};
use gdiff::gpde::{self, PDESolution};
use gdiff::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GdiffStatus {
    Ok = 0,
    NullPointer = 1,
    Dimension = 2,
    NonFinite = 3,
    Invalid = 4,
    Config = 5,
    Stability = 6,
    OutOfRange = 7,
    Io = 8,
    Panic = 9,
}

/// A compact covariance set.
pub struct GdiffTheta(CovarianceSet);

/// A solved PDE on its grid.
pub struct GdiffSolution(PDESolution);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> GdiffStatus {
    match e {
        Error::Dimension(_) => GdiffStatus::Dimension,
        Error::NonFinite(_) => GdiffStatus::NonFinite,
        Error::Invalid(_) | Error::Coefficient(_) => GdiffStatus::Invalid,
        Error::Stability { .. } => GdiffStatus::Stability,
        Error::Config { .. } | Error::Expr { .. } => GdiffStatus::Config,
        Error::OutOfRange(_) => GdiffStatus::OutOfRange,
        Error::Io(_) => GdiffStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GdiffStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GdiffStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            GdiffStatus::NullPointer
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            GdiffStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Core(Error::Invalid(format!("{what} is not valid UTF-8"))))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn out_arg<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    // SAFETY: the caller promises a valid, writable pointer when non-null
    unsafe { p.as_mut() }.ok_or(Fail::Null(what))
}

fn config_from(text: &str) -> gdiff::Result<ExperimentConfig> {
    let trimmed = text.trim_start();
    let mut cfg = if trimmed.starts_with('{') {
        ExperimentConfig::from_json_str(text)?
    } else {
        ExperimentConfig::from_toml_str(text)?
    };
    cfg.resolve_seed(None)?;
    Ok(cfg)
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn gdiff_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn gdiff_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Runs a named experiment on a TOML (or JSON) config. `out_json` receives the
/// report and `out_exit_code` the CLI exit code. Experiment outcomes,
/// including violated hypotheses, return `GDIFF_STATUS_OK`; only an unusable
/// config or argument fails.
///
/// # Safety
/// `name` and `config` must be NUL-terminated strings; the out-pointers must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn gdiff_run(
    name: *const c_char,
    config: *const c_char,
    out_json: *mut *mut c_char,
    out_exit_code: *mut i32,
) -> GdiffStatus {
    guard(|| {
        let name = str_arg(name, "name")?;
        let text = str_arg(config, "config")?;
        let json_slot = out_arg(out_json, "out_json")?;
        let code_slot = out_arg(out_exit_code, "out_exit_code")?;
        let cfg = config_from(text)?;
        let report = gdiff::experiments::run(name, &cfg);
        let json = CString::new(report.to_json()).map_err(|e| Error::Invalid(e.to_string()))?;
        *json_slot = json.into_raw();
        *code_slot = report.exit_code;
        Ok(())
    })
}

/// Variances in `[lo, hi]` for one-dimensional noise.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gdiff_theta_interval(lo: f64, hi: f64, out: *mut *mut GdiffTheta) -> GdiffStatus {
    guard(|| {
        let slot = out_arg(out, "out")?;
        let theta = CovarianceSet::interval(lo, hi)?;
        *slot = Box::into_raw(Box::new(GdiffTheta(theta)));
        Ok(())
    })
}

/// Set generated by `count` volatility matrices `gamma`, each row-major
/// `dim x dim` and laid out consecutively; covariances are `gamma gamma^T`.
///
/// # Safety
/// `generators` must hold `count * dim * dim` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gdiff_theta_new(
    dim: usize,
    generators: *const f64,
    count: usize,
    out: *mut *mut GdiffTheta,
) -> GdiffStatus {
    guard(|| {
        let slot = out_arg(out, "out")?;
        let len = count
            .checked_mul(dim)
            .and_then(|v| v.checked_mul(dim))
            .ok_or_else(|| Error::Invalid("generator buffer size overflows".into()))?;
        let flat = slice_arg(generators, len, "generators")?;
        let gens: Vec<Vec<f64>> = if dim == 0 { Vec::new() } else { flat.chunks(dim * dim).map(<[f64]>::to_vec).collect() };
        let theta = CovarianceSet::from_generators(dim, gens)?;
        *slot = Box::into_raw(Box::new(GdiffTheta(theta)));
        Ok(())
    })
}

/// # Safety
/// `theta` must come from this library and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn gdiff_theta_free(theta: *mut GdiffTheta) {
    if !theta.is_null() {
        drop(Box::from_raw(theta));
    }
}

/// Noise dimension of the set, or 0 for null.
///
/// # Safety
/// `theta` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gdiff_theta_dim(theta: *const GdiffTheta) -> usize {
    theta.as_ref().map_or(0, |t| t.0.dim())
}

/// `G(A)` for a symmetric row-major `dim x dim` matrix `a`.
///
/// # Safety
/// `theta` must be a live handle, `a` must hold `dim * dim` doubles and `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn gdiff_theta_eval_g(
    theta: *const GdiffTheta,
    a: *const f64,
    dim: usize,
    out: *mut f64,
) -> GdiffStatus {
    guard(|| {
        let theta = theta.as_ref().ok_or(Fail::Null("theta"))?;
        let slot = out_arg(out, "out")?;
        let len = dim.checked_mul(dim).ok_or_else(|| Error::Invalid("matrix size overflows".into()))?;
        let entries = slice_arg(a, len, "a")?;
        let m = SymMatrix::new(dim, entries.to_vec())?;
        *slot = theta.0.eval_g(&m)?;
        Ok(())
    })
}

/// Solves the PDE for the config's system, datum and grid.
///
/// # Safety
/// `config` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gdiff_solve_pde(config: *const c_char, out: *mut *mut GdiffSolution) -> GdiffStatus {
    guard(|| {
        let text = str_arg(config, "config")?;
        let slot = out_arg(out, "out")?;
        let cfg = config_from(text)?;
        let theta = cfg.theta()?;
        let c = cfg.build_system(&theta)?;
        let n = c.state_dim();
        let f = cfg.datum(n)?;
        let grid = cfg.grid(n, cfg.horizon)?;
        let sol = gpde::solve(&c, &theta, &f, &grid)?;
        *slot = Box::into_raw(Box::new(GdiffSolution(sol)));
        Ok(())
    })
}

/// # Safety
/// `sol` must come from this library and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn gdiff_solution_free(sol: *mut GdiffSolution) {
    if !sol.is_null() {
        drop(Box::from_raw(sol));
    }
}

/// State dimension of the solution grid, or 0 for null.
///
/// # Safety
/// `sol` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gdiff_solution_dim(sol: *const GdiffSolution) -> usize {
    sol.as_ref().map_or(0, |s| s.0.grid().dim())
}

/// `u(t, x)` interpolated from the stored levels.
///
/// # Safety
/// `sol` must be a live handle, `x` must hold `n` doubles and `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn gdiff_solution_value(
    sol: *const GdiffSolution,
    t: f64,
    x: *const f64,
    n: usize,
    out: *mut f64,
) -> GdiffStatus {
    guard(|| {
        let sol = sol.as_ref().ok_or(Fail::Null("sol"))?;
        let slot = out_arg(out, "out")?;
        let x = slice_arg(x, n, "x")?;
        *slot = sol.0.semigroup_value(t, x)?;
        Ok(())
    })
}

/// Writes the solution as CSV (`t,x_1..,u`) into a new string.
///
/// # Safety
/// `sol` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gdiff_solution_csv(sol: *const GdiffSolution, out: *mut *mut c_char) -> GdiffStatus {
    guard(|| {
        let sol = sol.as_ref().ok_or(Fail::Null("sol"))?;
        let slot = out_arg(out, "out")?;
        let csv = CString::new(sol.0.to_csv()).map_err(|e| Error::Invalid(e.to_string()))?;
        *slot = csv.into_raw();
        Ok(())
    })
}
