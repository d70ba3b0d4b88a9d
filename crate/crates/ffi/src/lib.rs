//! C ABI over `metada`.
//!
//! Every fallible function returns an [`MdaStatus`]; on failure the message
//! is available from [`mda_last_error`] on the same thread until the next
//! call. Strings returned through `char **` out-parameters are owned by the
//! caller and must be released with [`mda_string_free`]. Parameter sets are
//! opaque [`MdaParams`] handles released with [`mda_params_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use metada::harness::{
    aggregate_runs, run_experiment, run_single, ExperimentConfig, RunConfig, RunOptions,
};
use metada::models::{init_params, predict, Architecture, InitScheme, ParamSet};
use metada::{Error, Matrix};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MdaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Contract = 3,
    Numeric = 4,
    Config = 5,
    Io = 6,
    Format = 7,
    Panic = 8,
}

/// Architecture plus parameters.
pub struct MdaParams {
    arch: Architecture,
    params: ParamSet,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', "?")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(MdaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Contract(_) => MdaStatus::Contract,
            Error::Numeric { .. } => MdaStatus::Numeric,
            Error::Config(_) => MdaStatus::Config,
            Error::Io { .. } => MdaStatus::Io,
            Error::Json(_) | Error::Csv(_) | Error::Format { .. } => MdaStatus::Format,
        };
        Failure(status, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure(MdaStatus::Config, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MdaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MdaStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MdaStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(MdaStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `p` is null or a valid NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(MdaStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

fn out_string(s: String, out: *mut *mut c_char) -> Result<(), Failure> {
    let c = CString::new(s)
        .map_err(|_| Failure(MdaStatus::Format, "output contains a NUL byte".into()))?;
    // SAFETY: checked non-null by the caller of this helper.
    unsafe { *out = c.into_raw() };
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn mda_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mda_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` is null or a string obtained from this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mda_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Initialises parameters for the architecture in `arch_json`.
/// `init_json` may be null for the default scheme.
///
/// # Safety
/// String arguments are null or NUL-terminated; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mda_params_init(
    arch_json: *const c_char,
    init_json: *const c_char,
    seed: u64,
    out: *mut *mut MdaParams,
) -> MdaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let arch: Architecture = serde_json::from_str(str_arg(arch_json, "arch_json")?)?;
        let scheme: InitScheme = if init_json.is_null() {
            InitScheme::default()
        } else {
            serde_json::from_str(str_arg(init_json, "init_json")?)?
        };
        let params = init_params(&arch, &scheme, seed)?;
        *out = Box::into_raw(Box::new(MdaParams { arch, params }));
        Ok(())
    })
}

/// Reads a parameter file.
///
/// # Safety
/// `path` is null or NUL-terminated; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mda_params_load(
    path: *const c_char,
    out: *mut *mut MdaParams,
) -> MdaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (arch, params) = ParamSet::load(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(MdaParams { arch, params }));
        Ok(())
    })
}

/// Writes a parameter file.
///
/// # Safety
/// `params` is null or a live handle; `path` is null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mda_params_save(
    params: *const MdaParams,
    path: *const c_char,
) -> MdaStatus {
    guard(|| {
        let p = params.as_ref().ok_or_else(|| null("params"))?;
        p.params.save(&p.arch, Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Number of scalar parameters, or 0 for a null handle.
///
/// # Safety
/// `params` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mda_params_len(params: *const MdaParams) -> usize {
    params.as_ref().map_or(0, |p| p.params.len())
}

/// Architecture of `params` as a JSON string.
///
/// # Safety
/// `params` is null or a live handle; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mda_params_arch_json(
    params: *const MdaParams,
    out: *mut *mut c_char,
) -> MdaStatus {
    guard(|| {
        let p = params.as_ref().ok_or_else(|| null("params"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        out_string(serde_json::to_string(&p.arch)?, out)
    })
}

/// Copies the flattened parameters into `buf`, which holds `len` doubles;
/// `len` must equal [`mda_params_len`].
///
/// # Safety
/// `params` is null or a live handle; `buf` points to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mda_params_get_flat(
    params: *const MdaParams,
    buf: *mut f64,
    len: usize,
) -> MdaStatus {
    guard(|| {
        let p = params.as_ref().ok_or_else(|| null("params"))?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let flat = p.params.flatten();
        if flat.len() != len {
            return Err(Failure(
                MdaStatus::Contract,
                format!("buffer holds {len} values, parameters have {}", flat.len()),
            ));
        }
        ptr::copy_nonoverlapping(flat.as_ptr(), buf, len);
        Ok(())
    })
}

/// Overwrites the parameters from `len` doubles in flatten order.
///
/// # Safety
/// `params` is null or a live handle; `buf` points to `len` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn mda_params_set_flat(
    params: *mut MdaParams,
    buf: *const f64,
    len: usize,
) -> MdaStatus {
    guard(|| {
        let p = params.as_mut().ok_or_else(|| null("params"))?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        p.params.assign_flat(std::slice::from_raw_parts(buf, len))?;
        Ok(())
    })
}

/// Logits of head `head` for `rows` inputs of width `cols` (row-major),
/// written to `logits_out`, which holds `rows * num_classes` doubles.
///
/// # Safety
/// `params` is null or a live handle; `x` points to `rows * cols` doubles;
/// `logits_out` points to `logits_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mda_params_predict(
    params: *const MdaParams,
    x: *const f64,
    rows: usize,
    cols: usize,
    head: usize,
    logits_out: *mut f64,
    logits_len: usize,
) -> MdaStatus {
    guard(|| {
        let p = params.as_ref().ok_or_else(|| null("params"))?;
        if (x.is_null() && rows * cols > 0) || logits_out.is_null() {
            return Err(null("x or logits_out"));
        }
        let data = if rows * cols == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(x, rows * cols).to_vec()
        };
        let logits = predict(
            &p.params,
            &p.arch,
            &Matrix::from_vec(rows, cols, data)?,
            head,
        )?;
        if logits.len() != logits_len {
            return Err(Failure(
                MdaStatus::Contract,
                format!(
                    "output holds {logits_len} values, logits have {}",
                    logits.len()
                ),
            ));
        }
        ptr::copy_nonoverlapping(logits.as_slice().as_ptr(), logits_out, logits_len);
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `params` is null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mda_params_free(params: *mut MdaParams) {
    if !params.is_null() {
        drop(Box::from_raw(params));
    }
}

/// Trains one run described by a run-config JSON object (the `config` field
/// of a report) and returns the report as JSON in `*report_out`. When
/// `final_params_out` is non-null it receives the trained parameters.
///
/// # Safety
/// `run_config_json` is null or NUL-terminated; `report_out` is a valid
/// pointer; `final_params_out` is null or a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mda_train(
    run_config_json: *const c_char,
    seed: u64,
    report_out: *mut *mut c_char,
    final_params_out: *mut *mut MdaParams,
) -> MdaStatus {
    guard(|| {
        if report_out.is_null() {
            return Err(null("report_out"));
        }
        let rc: RunConfig = serde_json::from_str(str_arg(run_config_json, "run_config_json")?)?;
        let trained = run_single(&rc, seed)?;
        out_string(serde_json::to_string(&trained.report)?, report_out)?;
        if !final_params_out.is_null() {
            *final_params_out = Box::into_raw(Box::new(MdaParams {
                arch: rc.train.arch,
                params: trained.params,
            }));
        }
        Ok(())
    })
}

/// Runs the experiment grid in the config file at `config_path`, like
/// `metada run`. `n_failed_out`, if non-null, receives the failed-run count.
/// Failed runs do not make the call fail.
///
/// # Safety
/// `config_path` is null or NUL-terminated; `n_failed_out` is null or valid.
#[no_mangle]
pub unsafe extern "C" fn mda_run_experiment(
    config_path: *const c_char,
    seed_offset: u64,
    n_failed_out: *mut usize,
) -> MdaStatus {
    guard(|| {
        let cfg = ExperimentConfig::load(Path::new(str_arg(config_path, "config_path")?))?;
        let out = run_experiment(&cfg, &RunOptions { seed_offset })?;
        if !n_failed_out.is_null() {
            *n_failed_out = out.n_failed();
        }
        Ok(())
    })
}

/// Recomputes `summary.csv` and writes `comparison.csv` in `dir`.
///
/// # Safety
/// `dir` is null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mda_aggregate(dir: *const c_char) -> MdaStatus {
    guard(|| {
        aggregate_runs(Path::new(str_arg(dir, "dir")?))?;
        Ok(())
    })
}
