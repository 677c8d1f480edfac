//! C ABI over the nowcast core.
//!
//! Every function returns a [`NowcastStatus`]; on failure the message is available
//! from [`nowcast_last_error`] on the same thread. Strings handed out by the library
//! must be released with [`nowcast_string_free`], models with [`nowcast_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use nowcast::contribution::{attention_rollout, AttentionStack};
use nowcast::corpus::tokenize;
use nowcast::dfm::{build_state_space, log_likelihood, DfmSpec};
use nowcast::index::{di_from_counts, pearson, DiWeights};
use nowcast::outlier::OneClassSvm;
use nowcast::sentiment::RidgeModel;
use nowcast::vectorize::TfidfModel;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NowcastStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Panic = 5,
}

/// Trained tf-idf vocabulary, ridge regressor and optional outlier filter.
pub struct NowcastModel {
    tfidf: TfidfModel,
    ridge: RidgeModel,
    svm: Option<OneClassSvm>,
}

struct Failure {
    status: NowcastStatus,
    message: String,
}

impl Failure {
    fn new(status: NowcastStatus, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<nowcast::Error> for Failure {
    fn from(e: nowcast::Error) -> Self {
        let status = match e {
            nowcast::Error::Io { .. } => NowcastStatus::Io,
            _ => NowcastStatus::InvalidArgument,
        };
        Failure::new(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(text));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> NowcastStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NowcastStatus::Ok,
        Ok(Err(failure)) => {
            set_last_error(&failure.message);
            failure.status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_last_error(&format!("internal panic: {message}"));
            NowcastStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure::new(NowcastStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(NowcastStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path)
        .map_err(|e| Failure::new(NowcastStatus::Io, format!("{}: {e}", path.display())))
}

/// Message for the last failed call on this thread, or NULL. Valid until the next call.
#[no_mangle]
pub extern "C" fn nowcast_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn nowcast_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Release a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn nowcast_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Load `tfidf.json`, `ridge.json` and, when present, `ocsvm.json` from a model directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nowcast_model_load(dir: *const c_char, out: *mut *mut NowcastModel) -> NowcastStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let dir = Path::new(str_arg(dir, "dir")?);
        let tfidf = TfidfModel::from_json(&read(&dir.join("tfidf.json"))?)?;
        let ridge = RidgeModel::from_json(&read(&dir.join("ridge.json"))?)?;
        let svm_path = dir.join("ocsvm.json");
        let svm = if svm_path.exists() {
            Some(OneClassSvm::from_json(&read(&svm_path)?)?)
        } else {
            None
        };
        *out = Box::into_raw(Box::new(NowcastModel { tfidf, ridge, svm }));
        Ok(())
    })
}

/// Release a model. NULL is ignored.
///
/// # Safety
/// `model` must come from [`nowcast_model_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn nowcast_model_free(model: *mut NowcastModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Sentiment score of one sentence.
///
/// # Safety
/// `model` must be a live model, `text` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn nowcast_model_score(
    model: *const NowcastModel,
    text: *const c_char,
    out: *mut f64,
) -> NowcastStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let x = model.tfidf.transform(&tokenize(str_arg(text, "text")?));
        *out_arg(out, "out")? = model.ridge.predict(&x)?;
        Ok(())
    })
}

/// Outlier-filter decision value of one sentence; negative means off-topic.
///
/// # Safety
/// `model` must be a live model, `text` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn nowcast_model_decision(
    model: *const NowcastModel,
    text: *const c_char,
    out: *mut f64,
) -> NowcastStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let svm = model
            .svm
            .as_ref()
            .ok_or_else(|| Failure::new(NowcastStatus::InvalidArgument, "model has no outlier filter"))?;
        let x = model.tfidf.transform(&tokenize(str_arg(text, "text")?));
        *out_arg(out, "out")? = svm.decision(&x);
        Ok(())
    })
}

/// Tokens of `text` as a JSON array of strings. Free with [`nowcast_string_free`].
///
/// # Safety
/// `text` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nowcast_tokenize(text: *const c_char, out: *mut *mut c_char) -> NowcastStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let json = serde_json::to_string(&tokenize(str_arg(text, "text")?))
            .map_err(|e| Failure::new(NowcastStatus::InvalidArgument, e.to_string()))?;
        *out = CString::new(json).expect("JSON has no interior nul").into_raw();
        Ok(())
    })
}

/// Pearson correlation of two length-`n` arrays.
///
/// # Safety
/// `a` and `b` must point to `n` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nowcast_pearson(a: *const f64, b: *const f64, n: usize, out: *mut f64) -> NowcastStatus {
    guard(|| {
        *out_arg(out, "out")? = pearson(slice_arg(a, n, "a")?, slice_arg(b, n, "b")?)?;
        Ok(())
    })
}

/// Diffusion index from five response counts in ◎ ○ □ △ × order.
///
/// # Safety
/// `counts` must point to 5 readable values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nowcast_diffusion_index(counts: *const u64, out: *mut f64) -> NowcastStatus {
    guard(|| {
        let c = slice_arg(counts, 5, "counts")?;
        let counts: [usize; 5] = std::array::from_fn(|i| c[i] as usize);
        *out_arg(out, "out")? = di_from_counts(&counts, &DiWeights::default())?;
        Ok(())
    })
}

/// Attention rollout for the first token. `attention` holds `layers × heads × n × n`
/// row-stochastic weights in row-major order; `out` receives `n` values.
///
/// # Safety
/// `attention` must hold `layers * heads * n * n` doubles; `out` must hold `n`.
#[no_mangle]
pub unsafe extern "C" fn nowcast_attention_rollout(
    attention: *const f64,
    layers: usize,
    heads: usize,
    n: usize,
    out: *mut f64,
) -> NowcastStatus {
    guard(|| {
        let len = layers
            .checked_mul(heads)
            .and_then(|x| x.checked_mul(n))
            .and_then(|x| x.checked_mul(n))
            .ok_or_else(|| Failure::new(NowcastStatus::InvalidArgument, "attention size overflows"))?;
        let data = slice_arg(attention, len, "attention")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let nested: Vec<Vec<Vec<Vec<f64>>>> = (0..layers)
            .map(|l| {
                (0..heads)
                    .map(|h| {
                        (0..n)
                            .map(|i| {
                                let start = ((l * heads + h) * n + i) * n;
                                data[start..start + n].to_vec()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let tokens = (0..n).map(|i| i.to_string()).collect();
        let row = attention_rollout(&AttentionStack::from_nested(tokens, &nested)?)?;
        slice::from_raw_parts_mut(out, n).copy_from_slice(&row);
        Ok(())
    })
}

/// Exact Gaussian log-likelihood of a panel under a factor-model spec given as JSON
/// (`beta0`, `gamma`, `phi`, `d`, `var_eta`, `var_eps`). `y` is `n_series × t_len`
/// row-major; NaN marks a missing value.
///
/// # Safety
/// `spec_json` must be NUL-terminated, `y` must hold `n_series * t_len` doubles and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nowcast_dfm_loglik(
    spec_json: *const c_char,
    y: *const f64,
    n_series: usize,
    t_len: usize,
    out: *mut f64,
) -> NowcastStatus {
    guard(|| {
        let spec: DfmSpec = serde_json::from_str(str_arg(spec_json, "spec_json")?)
            .map_err(|e| Failure::new(NowcastStatus::InvalidArgument, format!("spec: {e}")))?;
        let len = n_series
            .checked_mul(t_len)
            .ok_or_else(|| Failure::new(NowcastStatus::InvalidArgument, "panel size overflows"))?;
        let data = slice_arg(y, len, "y")?;
        let panel: Vec<Vec<Option<f64>>> = data
            .chunks(t_len.max(1))
            .take(n_series)
            .map(|row| row.iter().map(|v| (!v.is_nan()).then_some(*v)).collect())
            .collect();
        *out_arg(out, "out")? = log_likelihood(&build_state_space(&spec)?, &panel)?;
        Ok(())
    })
}
