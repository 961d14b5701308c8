//! C ABI over the driftharness core.
//!
//! Every fallible function returns a [`DhStatus`]; on failure a message is
//! kept per thread and can be read with [`dh_last_error_message`]. Objects
//! are handed out as opaque handles that the caller releases with the
//! matching `_free` function. Strings returned by the library are released
//! with [`dh_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use driftharness::cli;
use driftharness::config::RunConfig;
use driftharness::corpus::{load_corpus, Granularity, Instance, NormalizedKey};
use driftharness::metrics::{self, MethodSeries, RetentionCurve};
use driftharness::model::{AdapterConfig, AdapterModel, TrainConfig};
use driftharness::protocol::{RunLedger, DEFAULT_LAGS};
use driftharness::stats;
use driftharness::Error;

/// Status code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DhStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Parse = 5,
    Config = 6,
    Model = 7,
    Metric = 8,
    Leakage = 9,
    Protocol = 10,
    Panic = 11,
}

/// A reference-model instance.
pub struct DhModel {
    model: AdapterModel,
}

/// A run ledger loaded from disk.
pub struct DhLedger {
    ledger: RunLedger,
    series: MethodSeries,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(DhStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Parse { .. } | Error::Json(_) => DhStatus::Parse,
            Error::Validation { .. } => DhStatus::InvalidArgument,
            Error::Config(_) => DhStatus::Config,
            Error::Model(_) | Error::Divergence { .. } | Error::Unsupported { .. } => DhStatus::Model,
            Error::Leakage { .. } => DhStatus::Leakage,
            Error::Protocol(_) => DhStatus::Protocol,
            Error::Metric(_) => DhStatus::Metric,
            Error::Io { .. } => DhStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> DhStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            DhStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(_) => {
            set_last_error("panic inside driftharness".into());
            DhStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(DhStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(DhStatus::InvalidUtf8, format!("`{what}` is not valid UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, what).map(Some)
    }
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

fn parse_json<T: serde::de::DeserializeOwned + Default>(text: Option<&str>, what: &str) -> Result<T, Failure> {
    match text {
        None => Ok(T::default()),
        Some(t) => serde_json::from_str(t).map_err(|e| Failure(DhStatus::Parse, format!("{what}: {e}"))),
    }
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into the library from this thread.
#[no_mangle]
pub extern "C" fn dh_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dh_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dh_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Hex digest of the normalized form of `code`. Free the result with
/// [`dh_string_free`].
///
/// # Safety
/// `code` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dh_normalized_key(code: *const c_char, out: *mut *mut c_char) -> DhStatus {
    guard(|| {
        let code = str_arg(code, "code")?;
        let hex = CString::new(NormalizedKey::of(code).to_string()).expect("hex has no NUL");
        write_out(out, hex.into_raw(), "out")
    })
}

/// Macro-F1 over `n` binary labels and predictions.
///
/// # Safety
/// `labels` and `predictions` must point to `n` bytes each; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dh_macro_f1(labels: *const u8, predictions: *const u8, n: usize, out: *mut f64) -> DhStatus {
    guard(|| {
        let y = slice_arg(labels, n, "labels")?;
        let p = slice_arg(predictions, n, "predictions")?;
        write_out(out, metrics::macro_f1(y, p)?, "out")
    })
}

/// Two-sided Wilcoxon signed-rank test on paired differences.
///
/// # Safety
/// `diffs` must point to `n` doubles; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn dh_wilcoxon(diffs: *const f64, n: usize, statistic: *mut f64, p_value: *mut f64) -> DhStatus {
    guard(|| {
        let d = slice_arg(diffs, n, "diffs")?;
        let w = stats::wilcoxon_signed_rank(d)?;
        write_out(statistic, w.statistic, "statistic")?;
        write_out(p_value, w.p_value, "p_value")
    })
}

/// Cliff's delta of sample `a` against sample `b`.
///
/// # Safety
/// `a` and `b` must point to `na` and `nb` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dh_cliffs_delta(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    out: *mut f64,
) -> DhStatus {
    guard(|| {
        let a = slice_arg(a, na, "a")?;
        let b = slice_arg(b, nb, "b")?;
        write_out(out, stats::cliffs_delta(a, b)?, "out")
    })
}

unsafe fn curve_arg(ibr: *const f64) -> Result<RetentionCurve, Failure> {
    let v = slice_arg(ibr, DEFAULT_LAGS.len(), "ibr")?;
    Ok(RetentionCurve::new(
        DEFAULT_LAGS.iter().copied().zip(v.iter().copied()),
    )?)
}

/// Retention AUC from IBR values at lags 1, 3, 5 and 6.
///
/// # Safety
/// `ibr` must point to 4 doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dh_retention_auc(ibr: *const f64, out: *mut f64) -> DhStatus {
    guard(|| write_out(out, metrics::retention_auc(&curve_arg(ibr)?)?, "out"))
}

/// Decay rate `(IBR@1 - IBR@6) / IBR@1` from IBR values at lags 1, 3, 5 and 6.
///
/// # Safety
/// `ibr` must point to 4 doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dh_decay_rate(ibr: *const f64, out: *mut f64) -> DhStatus {
    guard(|| write_out(out, metrics::decay_rate(&curve_arg(ibr)?)?, "out"))
}

/// Deduplicates and windows a corpus file into `out_dir`, as the `prepare`
/// command does. `granularity_months` is 1, 2, 3, 6 or 12.
///
/// # Safety
/// Paths must be NUL-terminated strings; `window_count` may be null.
#[no_mangle]
pub unsafe extern "C" fn dh_prepare_corpus(
    corpus_path: *const c_char,
    out_dir: *const c_char,
    granularity_months: u32,
    window_count: *mut usize,
) -> DhStatus {
    guard(|| {
        let cfg = RunConfig {
            corpus: Some(PathBuf::from(str_arg(corpus_path, "corpus_path")?)),
            out: PathBuf::from(str_arg(out_dir, "out_dir")?),
            granularity: Granularity::from_months(granularity_months)?,
            ..RunConfig::default()
        };
        let prepared = cli::cmd_prepare(&cfg)?;
        if !window_count.is_null() {
            window_count.write(prepared.windows.len());
        }
        Ok(())
    })
}

/// Creates an untrained model. `adapter_config_json` may be null for defaults.
///
/// # Safety
/// `adapter_config_json` must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dh_model_new(adapter_config_json: *const c_char, out: *mut *mut DhModel) -> DhStatus {
    guard(|| {
        let cfg: AdapterConfig = parse_json(
            opt_str_arg(adapter_config_json, "adapter_config_json")?,
            "adapter config",
        )?;
        if cfg.rank == 0 || cfg.features.dim == 0 {
            return Err(Failure(
                DhStatus::InvalidArgument,
                "rank and feature dim must be positive".into(),
            ));
        }
        write_out(
            out,
            Box::into_raw(Box::new(DhModel {
                model: AdapterModel::new(cfg),
            })),
            "out",
        )
    })
}

/// # Safety
/// `model` must be null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn dh_model_free(model: *mut DhModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn model_arg<'a>(model: *mut DhModel) -> Result<&'a mut DhModel, Failure> {
    model.as_mut().ok_or_else(|| null("model"))
}

/// Fine-tunes the adapter on every instance of a corpus file.
/// `train_config_json` may be null for defaults; `final_loss` may be null.
///
/// # Safety
/// `model` must be a live handle; strings must be NUL-terminated or null where allowed.
#[no_mangle]
pub unsafe extern "C" fn dh_model_train(
    model: *mut DhModel,
    corpus_path: *const c_char,
    train_config_json: *const c_char,
    final_loss: *mut f64,
) -> DhStatus {
    guard(|| {
        let m = model_arg(model)?;
        let instances = load_corpus(Path::new(str_arg(corpus_path, "corpus_path")?))?;
        let cfg: TrainConfig = parse_json(opt_str_arg(train_config_json, "train_config_json")?, "train config")?;
        let report = m.model.train(&instances, &[], &cfg, None, None)?;
        if !final_loss.is_null() {
            final_loss.write(report.final_loss);
        }
        Ok(())
    })
}

/// Probability that `code` is vulnerable.
///
/// # Safety
/// `model` must be a live handle; `code` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dh_model_predict(model: *mut DhModel, code: *const c_char, out: *mut f64) -> DhStatus {
    guard(|| {
        let m = model_arg(model)?;
        let code = str_arg(code, "code")?;
        let probe = Instance::new("ffi", code, 0, chrono::NaiveDate::default());
        write_out(
            out,
            m.model.predict(std::slice::from_ref(&probe))[0].prob_vulnerable,
            "out",
        )
    })
}

/// Writes a checkpoint file.
///
/// # Safety
/// `model` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dh_model_save(model: *mut DhModel, path: *const c_char) -> DhStatus {
    guard(|| {
        let m = model_arg(model)?;
        Ok(m.model.save(Path::new(str_arg(path, "path")?), None)?)
    })
}

/// Restores a model from a checkpoint file.
///
/// # Safety
/// `path` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dh_model_load(path: *const c_char, out: *mut *mut DhModel) -> DhStatus {
    guard(|| {
        let model = AdapterModel::load(Path::new(str_arg(path, "path")?))?;
        write_out(out, Box::into_raw(Box::new(DhModel { model })), "out")
    })
}

/// Loads a ledger directory written by a run.
///
/// # Safety
/// `dir` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dh_ledger_load(dir: *const c_char, out: *mut *mut DhLedger) -> DhStatus {
    guard(|| {
        let ledger = RunLedger::read(Path::new(str_arg(dir, "dir")?))?;
        let series = MethodSeries::from_ledger(&ledger);
        write_out(out, Box::into_raw(Box::new(DhLedger { ledger, series })), "out")
    })
}

/// # Safety
/// `ledger` must be null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn dh_ledger_free(ledger: *mut DhLedger) {
    if !ledger.is_null() {
        drop(Box::from_raw(ledger));
    }
}

unsafe fn ledger_arg<'a>(ledger: *const DhLedger) -> Result<&'a DhLedger, Failure> {
    ledger.as_ref().ok_or_else(|| null("ledger"))
}

/// Number of forward records, scored or not.
///
/// # Safety
/// `ledger` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dh_ledger_forward_count(ledger: *const DhLedger, out: *mut usize) -> DhStatus {
    guard(|| write_out(out, ledger_arg(ledger)?.ledger.forward().len(), "out"))
}

/// Mean forward Macro-F1 over the scored windows.
///
/// # Safety
/// `ledger` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dh_ledger_mean_forward_f1(ledger: *const DhLedger, out: *mut f64) -> DhStatus {
    guard(|| {
        let l = ledger_arg(ledger)?;
        let scores: Vec<Option<f64>> = l.ledger.forward().iter().map(|r| r.f1).collect();
        write_out(out, metrics::aggregate_mean(&scores)?.mean, "out")
    })
}

/// Mean backward score at lag `k`.
///
/// # Safety
/// `ledger` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dh_ledger_ibr(ledger: *const DhLedger, k: usize, out: *mut f64) -> DhStatus {
    guard(|| write_out(out, metrics::ibr(&ledger_arg(ledger)?.series, k)?, "out"))
}
