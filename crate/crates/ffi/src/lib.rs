//! C interface to `oslsel`.
//!
//! Datasets and fits are opaque handles created and released through this
//! API. Every fallible call returns an [`OslselStatus`]; on failure the
//! message is available from [`oslsel_last_error`] on the same thread.
//! Matrices are dense row-major `double` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use nalgebra::DMatrix;
use oslsel::classify::{classify_rows, CostMatrix};
use oslsel::drm::posterior;
use oslsel::inference::elr_confidence_interval_prepared;
use oslsel::em::fit_prepared;
use oslsel::{BasisSpec, ElSolution, EmConfig, ModelData, OslsDataset, OslsError};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OslselStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    SolverFailure = 3,
    Panic = 4,
}

/// Labelled training rows plus an unlabelled test block.
pub struct OslselDataset {
    inner: OslsDataset,
}

/// A fitted model together with the data it was fitted on.
pub struct OslselFit {
    solution: ElSolution,
    data: ModelData,
    config: EmConfig,
}

/// Settings for [`oslsel_fit`]; start from [`oslsel_fit_options_default`].
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct OslselFitOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub n_starts: usize,
    pub seed: u64,
    /// Polynomial degree of the basis; 1 is the identity basis.
    pub degree: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let clean = message.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).unwrap_or_default());
}

fn status_of(err: &OslsError) -> OslselStatus {
    if err.is_validation() {
        OslselStatus::InvalidArgument
    } else {
        OslselStatus::SolverFailure
    }
}

fn guard(f: impl FnOnce() -> Result<(), (OslselStatus, String)>) -> OslselStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            OslselStatus::Ok
        }
        Ok(Err((status, message))) => {
            set_error(&message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            OslselStatus::Panic
        }
    }
}

fn lift<T>(r: oslsel::Result<T>) -> Result<T, (OslselStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (OslselStatus, String) {
    (OslselStatus::NullPointer, format!("{what} is null"))
}

fn invalid(message: &str) -> (OslselStatus, String) {
    (OslselStatus::InvalidArgument, message.to_string())
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], (OslselStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], (OslselStatus, String)> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn handle<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, (OslselStatus, String)> {
    ptr.as_ref().ok_or_else(|| null(what))
}

fn matrix(values: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, values)
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn oslsel_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn oslsel_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub extern "C" fn oslsel_fit_options_default() -> OslselFitOptions {
    let d = EmConfig::default();
    OslselFitOptions { tol: d.tol, max_iter: d.max_iter, n_starts: d.n_starts, seed: d.seed, degree: 1 }
}

/// Builds a dataset from `n x d` training rows with labels in `0..k_known`
/// and `m x d` test rows. On success `*out` owns a new handle.
///
/// # Safety
/// Array arguments must point to at least the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn oslsel_dataset_new(
    train_x: *const f64,
    train_y: *const u32,
    n: usize,
    test_x: *const f64,
    m: usize,
    d: usize,
    k_known: usize,
    out: *mut *mut OslselDataset,
) -> OslselStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let size = |rows: usize| rows.checked_mul(d).ok_or_else(|| invalid("dimensions overflow"));
        let tx = slice(train_x, size(n)?, "train_x")?;
        let ty = slice(train_y, n, "train_y")?;
        let sx = slice(test_x, size(m)?, "test_x")?;
        let labels = ty.iter().map(|&v| v as usize).collect();
        let inner = lift(OslsDataset::new(matrix(tx, n, d), labels, matrix(sx, m, d), k_known))?;
        *out = Box::into_raw(Box::new(OslselDataset { inner }));
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle from [`oslsel_dataset_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn oslsel_dataset_free(ds: *mut OslselDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Fits the model by EM with multiple starts.
///
/// # Safety
/// `ds` must be a live dataset handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn oslsel_fit(
    ds: *const OslselDataset,
    options: OslselFitOptions,
    out: *mut *mut OslselFit,
) -> OslselStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let ds = handle(ds, "dataset")?;
        let basis = match options.degree {
            0 => return Err(invalid("degree must be at least 1")),
            1 => BasisSpec::Identity,
            p => BasisSpec::Polynomial { degree: p },
        };
        let config = EmConfig {
            tol: options.tol,
            max_iter: options.max_iter,
            n_starts: options.n_starts,
            seed: options.seed,
            ..EmConfig::default()
        };
        lift(config.validate())?;
        let data = lift(ModelData::new(&ds.inner, &basis))?;
        let solution = lift(fit_prepared(&data, &config))?;
        *out = Box::into_raw(Box::new(OslselFit { solution, data, config }));
        Ok(())
    })
}

/// # Safety
/// `fit` must be null or a handle from [`oslsel_fit`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn oslsel_fit_free(fit: *mut OslselFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Number of known classes `K`; proportions have `K + 1` entries.
///
/// # Safety
/// `fit` must be a live fit handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn oslsel_fit_known_classes(fit: *const OslselFit) -> usize {
    fit.as_ref().map_or(0, |f| f.solution.k())
}

/// Length of each tilt vector (intercept plus basis terms).
///
/// # Safety
/// `fit` must be a live fit handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn oslsel_fit_tilt_len(fit: *const OslselFit) -> usize {
    fit.as_ref().map_or(0, |f| f.solution.theta_hat.gamma(1).len())
}

/// Writes the profile log empirical likelihood to `*out`.
///
/// # Safety
/// `fit` must be a live fit handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn oslsel_fit_log_el(fit: *const OslselFit, out: *mut f64) -> OslselStatus {
    guard(|| {
        let fit = handle(fit, "fit")?;
        *slice_mut(out, 1, "out")?.first_mut().unwrap() = fit.solution.log_el;
        Ok(())
    })
}

/// Writes `(pi_0, .., pi_K)`; `len` must equal `K + 1`.
///
/// # Safety
/// `fit` must be a live fit handle and `out` hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn oslsel_fit_proportions(fit: *const OslselFit, out: *mut f64, len: usize) -> OslselStatus {
    guard(|| {
        let fit = handle(fit, "fit")?;
        let theta = &fit.solution.theta_hat;
        if len != theta.k() + 1 {
            return Err(invalid("len must be K + 1"));
        }
        let dst = slice_mut(out, len, "out")?;
        dst[0] = theta.pi0();
        dst[1..].copy_from_slice(theta.pi());
        Ok(())
    })
}

/// Writes the tilts `gamma_1, .., gamma_K` back to back; `len` must equal
/// `K * oslsel_fit_tilt_len(fit)`.
///
/// # Safety
/// `fit` must be a live fit handle and `out` hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn oslsel_fit_tilts(fit: *const OslselFit, out: *mut f64, len: usize) -> OslselStatus {
    guard(|| {
        let fit = handle(fit, "fit")?;
        let flat = fit.solution.theta_hat.gamma_flat();
        if len != flat.len() {
            return Err(invalid("len must be K times the tilt length"));
        }
        slice_mut(out, len, "out")?.copy_from_slice(flat);
        Ok(())
    })
}

/// Posterior class probabilities of one row `x` of length `d`; `out` holds
/// `K + 1` values.
///
/// # Safety
/// `x` must hold `d` doubles and `out` `K + 1`.
#[no_mangle]
pub unsafe extern "C" fn oslsel_posterior(
    fit: *const OslselFit,
    x: *const f64,
    d: usize,
    out: *mut f64,
) -> OslselStatus {
    guard(|| {
        let fit = handle(fit, "fit")?;
        let x = slice(x, d, "x")?;
        let p = lift(posterior(x, fit.data.basis(), &fit.solution.theta_hat))?;
        slice_mut(out, p.len(), "out")?.copy_from_slice(&p);
        Ok(())
    })
}

/// Labels `rows x d` feature rows under 0-1 loss; `out` receives `rows`
/// class indices where `K` is the novel class.
///
/// # Safety
/// `x` must hold `rows * d` doubles and `out` `rows` integers.
#[no_mangle]
pub unsafe extern "C" fn oslsel_classify(
    fit: *const OslselFit,
    x: *const f64,
    rows: usize,
    d: usize,
    out: *mut u32,
) -> OslselStatus {
    guard(|| {
        let fit = handle(fit, "fit")?;
        let total = rows.checked_mul(d).ok_or_else(|| invalid("dimensions overflow"))?;
        let x = matrix(slice(x, total, "x")?, rows, d);
        let cost = CostMatrix::uniform(fit.solution.k() + 1);
        let labels = lift(classify_rows(&fit.solution.theta_hat, &x, fit.data.basis(), &cost))?;
        let dst = slice_mut(out, rows, "out")?;
        for (o, l) in dst.iter_mut().zip(labels) {
            *o = l as u32;
        }
        Ok(())
    })
}

/// Likelihood ratio interval for `pi_k` (`k = 0` is the baseline class).
///
/// # Safety
/// `fit` must be a live fit handle; `lower` and `upper` writable.
#[no_mangle]
pub unsafe extern "C" fn oslsel_interval(
    fit: *const OslselFit,
    k: usize,
    level: f64,
    lower: *mut f64,
    upper: *mut f64,
) -> OslselStatus {
    guard(|| {
        let fit = handle(fit, "fit")?;
        let lo = slice_mut(lower, 1, "lower")?;
        let hi = slice_mut(upper, 1, "upper")?;
        let ci = lift(elr_confidence_interval_prepared(&fit.data, &fit.config, &fit.solution, k, level))?;
        lo[0] = ci.lower;
        hi[0] = ci.upper;
        Ok(())
    })
}
