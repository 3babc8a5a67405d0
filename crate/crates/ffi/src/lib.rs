//! C ABI over fairlm checkpoints: sentence scoring and bias reports.
//!
//! Every function returns a [`FairlmStatus`] code; on failure the message is
//! available from [`fairlm_last_error`] on the same thread. Handles are
//! opaque and must be released with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fairlm::datasets::load_triplets;
use fairlm::lora::AdaptedModel;
use fairlm::metrics::{self, BiasReport, EvalOptions};
use fairlm::model::{Checkpoint, LanguageModel, ScoreMode, TransformerLM};
use fairlm::tokenizer::Vocab;
use fairlm::Error;

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FairlmStatus {
    Ok = 0,
    /// A required pointer was null or a string was not UTF-8.
    NullOrInvalidArgument = 1,
    /// Input data was rejected (bad file, unknown token id, out-of-range value).
    Validation = 2,
    /// Reading or writing a file failed.
    Io = 3,
    /// An internal invariant failed.
    Internal = 4,
    /// A Rust panic was caught at the boundary.
    Panic = 5,
}

/// Sentence score reduction: mean or sum of token log-probabilities.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FairlmScoreMode {
    Mean = 0,
    Sum = 1,
}

impl From<FairlmScoreMode> for ScoreMode {
    fn from(m: FairlmScoreMode) -> Self {
        match m {
            FairlmScoreMode::Mean => ScoreMode::Mean,
            FairlmScoreMode::Sum => ScoreMode::Sum,
        }
    }
}

/// Numeric columns of one bias report row.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FairlmReportRow {
    pub n: usize,
    pub lms: f64,
    pub ss: f64,
    pub icat: f64,
    pub perplexity: f64,
}

enum Inner {
    Base(TransformerLM),
    Adapted(AdaptedModel),
}

/// A loaded checkpoint, optionally with adapters applied.
pub struct FairlmModel {
    inner: Inner,
    vocab: Vocab,
}

impl FairlmModel {
    fn lm(&self) -> &dyn LanguageModel {
        match &self.inner {
            Inner::Base(m) => m,
            Inner::Adapted(a) => a,
        }
    }
}

/// A computed bias report.
pub struct FairlmReport {
    report: BiasReport,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> FairlmStatus {
    match e {
        Error::Io { .. } => FairlmStatus::Io,
        Error::Contract(_) => FairlmStatus::Internal,
        _ => FairlmStatus::Validation,
    }
}

struct Fail(FairlmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> FairlmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FairlmStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            FairlmStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(FairlmStatus::NullOrInvalidArgument, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(FairlmStatus::NullOrInvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn model_arg<'a>(p: *const FairlmModel) -> Result<&'a FairlmModel, Fail> {
    p.as_ref().ok_or_else(|| null("model"))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).map_or(ptr::null_mut(), CString::into_raw)
}

/// Message of the last failed call on this thread, or NULL. Free with
/// [`fairlm_string_free`].
#[no_mangle]
pub extern "C" fn fairlm_last_error() -> *mut c_char {
    LAST_ERROR.with(|e| {
        e.borrow()
            .as_ref()
            .map_or(ptr::null_mut(), |c| c.clone().into_raw())
    })
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn fairlm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fairlm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// `lms · min(ss, 100 − ss) / 50`. Both inputs must lie in [0, 100].
///
/// # Safety
/// `out` must be a valid pointer to a `double`.
#[no_mangle]
pub unsafe extern "C" fn fairlm_icat(lms: f64, ss: f64, out: *mut f64) -> FairlmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = metrics::icat(lms, ss).map_err(|e| Fail(FairlmStatus::Validation, e.to_string()))?;
        Ok(())
    })
}

/// Loads a checkpoint that embeds its vocabulary. `adapters_path` may be
/// NULL; otherwise the adapter file is applied on top.
///
/// # Safety
/// Path arguments must be NUL-terminated strings or (for adapters) NULL;
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fairlm_model_load(
    checkpoint_path: *const c_char,
    adapters_path: *const c_char,
    out: *mut *mut FairlmModel,
) -> FairlmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = str_arg(checkpoint_path, "checkpoint_path")?;
        let ckpt = Checkpoint::load(Path::new(path))?;
        let vocab = ckpt.vocab()?.clone();
        let inner = if adapters_path.is_null() {
            Inner::Base(ckpt.model)
        } else {
            let a = str_arg(adapters_path, "adapters_path")?;
            Inner::Adapted(AdaptedModel::load_adapters(ckpt.model, Path::new(a))?)
        };
        *out = Box::into_raw(Box::new(FairlmModel { inner, vocab }));
        Ok(())
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from [`fairlm_model_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn fairlm_model_free(model: *mut FairlmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size of a loaded model, or 0 for NULL.
///
/// # Safety
/// `model` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn fairlm_model_vocab_size(model: *const FairlmModel) -> usize {
    model.as_ref().map_or(0, |m| m.lm().vocab_size())
}

/// Score of one sentence: reduced next-token log-probability.
///
/// # Safety
/// `model` must be live, `text` NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn fairlm_sentence_log_prob(
    model: *const FairlmModel,
    text: *const c_char,
    mode: FairlmScoreMode,
    out: *mut f64,
) -> FairlmStatus {
    guard(|| {
        let m = model_arg(model)?;
        let text = str_arg(text, "text")?;
        let out = out_arg(out, "out")?;
        let lp = m.lm().score_tokens(&[m.vocab.encode(text)])?;
        let lp: Vec<f64> = lp[0].iter().map(|&x| x as f64).collect();
        *out = ScoreMode::from(mode).reduce_f64(&lp);
        Ok(())
    })
}

/// Token-weighted perplexity over `n` sentences.
///
/// # Safety
/// `sentences` must point to `n` NUL-terminated strings; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fairlm_perplexity(
    model: *const FairlmModel,
    sentences: *const *const c_char,
    n: usize,
    out: *mut f64,
) -> FairlmStatus {
    guard(|| {
        let m = model_arg(model)?;
        let out = out_arg(out, "out")?;
        if sentences.is_null() {
            return Err(null("sentences"));
        }
        let lines = (0..n)
            .map(|i| str_arg(*sentences.add(i), "sentences[i]"))
            .collect::<Result<Vec<&str>, Fail>>()?;
        *out = metrics::perplexity(m.lm(), &m.vocab, &lines)?;
        Ok(())
    })
}

/// Evaluates a triplet JSON-Lines file into a report handle.
///
/// # Safety
/// `model` must be live, `triplets_path` NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn fairlm_eval_triplets(
    model: *const FairlmModel,
    triplets_path: *const c_char,
    mode: FairlmScoreMode,
    include_unrelated: bool,
    out: *mut *mut FairlmReport,
) -> FairlmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let m = model_arg(model)?;
        let path = str_arg(triplets_path, "triplets_path")?;
        let ts = load_triplets(Path::new(path))?;
        let opts = EvalOptions {
            perplexity_includes_unrelated: include_unrelated,
        };
        let report = metrics::evaluate(m.lm(), &m.vocab, &ts, mode.into(), opts)?;
        *out = Box::into_raw(Box::new(FairlmReport { report }));
        Ok(())
    })
}

/// Number of rows, the last being the all-domains row. 0 for NULL.
///
/// # Safety
/// `report` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn fairlm_report_len(report: *const FairlmReport) -> usize {
    report.as_ref().map_or(0, |r| r.report.rows.len())
}

/// Copies row `index` into `out` and, when `domain` is non-NULL, stores a
/// newly allocated domain name there.
///
/// # Safety
/// `report` must be live; `out` valid; `domain` NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn fairlm_report_row(
    report: *const FairlmReport,
    index: usize,
    out: *mut FairlmReportRow,
    domain: *mut *mut c_char,
) -> FairlmStatus {
    guard(|| {
        let r = report.as_ref().ok_or_else(|| null("report"))?;
        let out = out_arg(out, "out")?;
        let row = r.report.rows.get(index).ok_or_else(|| {
            Fail(
                FairlmStatus::Validation,
                format!("row {index} out of range for {} rows", r.report.rows.len()),
            )
        })?;
        *out = FairlmReportRow {
            n: row.n,
            lms: row.lms,
            ss: row.ss,
            icat: row.icat,
            perplexity: row.perplexity,
        };
        if let Some(d) = domain.as_mut() {
            *d = into_c_string(row.domain.clone());
        }
        Ok(())
    })
}

/// The report as `domain,n,lms,ss,icat,perplexity` CSV. Free with
/// [`fairlm_string_free`]; NULL on a NULL handle.
///
/// # Safety
/// `report` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn fairlm_report_csv(report: *const FairlmReport) -> *mut c_char {
    report.as_ref().map_or(ptr::null_mut(), |r| into_c_string(r.report.to_csv()))
}

/// Releases a report. NULL is ignored.
///
/// # Safety
/// `report` must come from [`fairlm_eval_triplets`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn fairlm_report_free(report: *mut FairlmReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}
