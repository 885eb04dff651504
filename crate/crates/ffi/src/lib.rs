//! C ABI over the `fpw` estimator.
//!
//! Samples and fits are opaque heap handles created by `fpw_*_new` and
//! released with the matching `fpw_*_free`. Every fallible call returns an
//! [`FpwStatus`]; on failure a description is available from
//! [`fpw_last_error_message`] on the same thread. Panics are caught at the
//! boundary and reported as [`FpwStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use fpw::basis::SieveLayout;
use fpw::estimator::{fit_fpw, predict};
use fpw::inference::{sieve_variance, uniform_band, Multiplier};
use fpw::selection::MdConfig;
use fpw::{FpwError, Sample};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FpwStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NumericalFailure = 3,
    Panic = 4,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FpwMultiplier {
    Normal = 0,
    Rademacher = 1,
    Mammen = 2,
}

impl From<FpwMultiplier> for Multiplier {
    fn from(m: FpwMultiplier) -> Self {
        match m {
            FpwMultiplier::Normal => Multiplier::Normal,
            FpwMultiplier::Rademacher => Multiplier::Rademacher,
            FpwMultiplier::Mammen => Multiplier::Mammen,
        }
    }
}

/// Opaque sample handle.
pub struct FpwSample(Sample);

/// Opaque fitted-model handle.
pub struct FpwModel(fpw::FpwFit);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Null(&'static str),
    Invalid(String),
    Core(FpwError),
}

impl From<FpwError> for Failure {
    fn from(e: FpwError) -> Self {
        Failure::Core(e)
    }
}

type Outcome = Result<(), Failure>;

fn guard(f: impl FnOnce() -> Outcome) -> FpwStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FpwStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            FpwStatus::NullPointer
        }
        Ok(Err(Failure::Invalid(msg))) => {
            set_error(msg);
            FpwStatus::InvalidArgument
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            if e.is_numerical() {
                FpwStatus::NumericalFailure
            } else {
                FpwStatus::InvalidArgument
            }
        }
        Err(_) => {
            set_error("panic inside fpw".into());
            FpwStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

/// Copy the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length excluding the NUL,
/// or 0 if there is no error.
///
/// # Safety
/// `buf` must be valid for `len` bytes or null.
#[no_mangle]
pub unsafe extern "C" fn fpw_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Build a sample from `n` observations. `delta[i]` is nonzero when the
/// covariate is observed; `x[i]` is ignored otherwise.
///
/// # Safety
/// The four arrays must hold `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fpw_sample_new(
    n: usize,
    delta: *const u8,
    y: *const f64,
    x: *const f64,
    w: *const f64,
    out: *mut *mut FpwSample,
) -> FpwStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let delta: Vec<bool> = input(delta, n, "delta")?.iter().map(|&d| d != 0).collect();
        let sample = Sample::new(
            delta,
            input(y, n, "y")?.to_vec(),
            input(x, n, "x")?.to_vec(),
            input(w, n, "w")?.to_vec(),
        )?;
        *out = Box::into_raw(Box::new(FpwSample(sample)));
        Ok(())
    })
}

/// Attach `n_controls` linear controls, given row-major as an
/// `n × n_controls` array.
///
/// # Safety
/// `sample` must come from `fpw_sample_new`; `values` must hold
/// `n * n_controls` elements.
#[no_mangle]
pub unsafe extern "C" fn fpw_sample_set_controls(
    sample: *mut FpwSample,
    n_controls: usize,
    values: *const f64,
) -> FpwStatus {
    guard(|| {
        let s = sample.as_mut().ok_or(Failure::Null("sample"))?;
        let n = s.0.n();
        let vals = input(values, n * n_controls, "values")?;
        let names = (0..n_controls).map(|j| format!("control_{j}")).collect();
        let m = DMatrix::from_row_slice(n, n_controls, vals);
        s.0 = s.0.without_controls().with_controls(names, m)?;
        Ok(())
    })
}

/// # Safety
/// `sample` must come from `fpw_sample_new` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fpw_sample_free(sample: *mut FpwSample) {
    if !sample.is_null() {
        drop(Box::from_raw(sample));
    }
}

/// Number of observations, or 0 for a null handle.
///
/// # Safety
/// `sample` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn fpw_sample_len(sample: *const FpwSample) -> usize {
    sample.as_ref().map_or(0, |s| s.0.n())
}

/// Run both stages with default first-stage settings and a B-spline
/// series basis of the given degree and number of quantile knots.
///
/// # Safety
/// `sample` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fpw_fit_new(
    sample: *const FpwSample,
    degree: usize,
    n_interior: usize,
    out: *mut *mut FpwModel,
) -> FpwStatus {
    guard(|| {
        let s = handle(sample, "sample")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let fit = fit_fpw(&s.0, &SieveLayout::new(degree, n_interior), &MdConfig::default())?;
        *out = Box::into_raw(Box::new(FpwModel(fit)));
        Ok(())
    })
}

/// # Safety
/// `fit` must come from `fpw_fit_new` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fpw_fit_free(fit: *mut FpwModel) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Number of coefficients: series terms followed by controls.
///
/// # Safety
/// `fit` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn fpw_fit_dim(fit: *const FpwModel) -> usize {
    fit.as_ref().map_or(0, |f| f.0.k() + f.0.n_controls())
}

/// # Safety
/// `out` must hold `len` elements and `len` must equal `fpw_fit_dim`.
#[no_mangle]
pub unsafe extern "C" fn fpw_fit_coefficients(fit: *const FpwModel, out: *mut f64, len: usize) -> FpwStatus {
    guard(|| {
        let f = handle(fit, "fit")?;
        let coefs = f.0.coefficients();
        if len != coefs.len() {
            return Err(Failure::Invalid(format!("buffer holds {len} values, fit has {}", coefs.len())));
        }
        output(out, len, "out")?.copy_from_slice(coefs.as_slice());
        Ok(())
    })
}

/// `ĝ(x)` plus the control contribution. `controls` may be null when
/// `n_controls` is 0.
///
/// # Safety
/// `controls` must hold `n_controls` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fpw_fit_predict(
    fit: *const FpwModel,
    x: f64,
    controls: *const f64,
    n_controls: usize,
    out: *mut f64,
) -> FpwStatus {
    guard(|| {
        let f = handle(fit, "fit")?;
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        let c = if n_controls == 0 && controls.is_null() {
            None
        } else {
            Some(input(controls, n_controls, "controls")?)
        };
        *out = predict(&f.0, x, c)?;
        Ok(())
    })
}

/// Plug-in sieve variance at `x`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fpw_fit_sieve_variance(fit: *const FpwModel, x: f64, out: *mut f64) -> FpwStatus {
    guard(|| {
        let f = handle(fit, "fit")?;
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        *out = sieve_variance(&f.0, x)?;
        Ok(())
    })
}

/// Multiplier-bootstrap uniform band over `grid`. `lower` and `upper`
/// receive `n_grid` values each.
///
/// # Safety
/// All arrays must hold `n_grid` elements; `critical_value` must be
/// writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn fpw_fit_uniform_band(
    fit: *const FpwModel,
    grid: *const f64,
    n_grid: usize,
    alpha: f64,
    n_boot: usize,
    multiplier: FpwMultiplier,
    seed: u64,
    lower: *mut f64,
    upper: *mut f64,
    critical_value: *mut f64,
) -> FpwStatus {
    guard(|| {
        let f = handle(fit, "fit")?;
        let grid = input(grid, n_grid, "grid")?;
        let lower = output(lower, n_grid, "lower")?;
        let upper = output(upper, n_grid, "upper")?;
        let cv = critical_value.as_mut().ok_or(Failure::Null("critical_value"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let band = uniform_band(&f.0, grid, alpha, n_boot, multiplier.into(), &mut rng)?;
        lower.copy_from_slice(&band.lower);
        upper.copy_from_slice(&band.upper);
        *cv = band.critical_value;
        Ok(())
    })
}
