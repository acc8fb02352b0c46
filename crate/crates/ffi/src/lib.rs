//! C ABI over `ecf-core`.
//!
//! Objects are opaque handles created by `ecf_*_new`/`ecf_*_from_*`
//! functions and released with the matching `ecf_*_free`. Every fallible
//! call returns an [`EcfStatus`]; on failure a message is available from
//! [`ecf_last_error_message`] on the same thread until the next failing call.
//! Panics never cross the boundary, they are reported as
//! `ECF_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ecf_core::ecf::{self, ModelParams, TrainConfig};
use ecf_core::experiment;
use ecf_core::feature_model::{make_paired_dataset, FeatureSpec};
use ecf_core::fisher::{self, LinearClassifier};
use ecf_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EcfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidSpec = 3,
    /// Undefined angle, zero scatter, degenerate interpolation and similar.
    Numeric = 4,
    Divergence = 5,
    Io = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EcfClosedForm {
    /// Optimal classifier for original data.
    Original = 0,
    /// Optimal classifier for counterfactually augmented data.
    Counterfactual = 1,
    /// Classifier over causal features only.
    Robust = 2,
}

/// Feature law of the synthetic sentences.
pub struct EcfSpec {
    inner: FeatureSpec,
}

/// Weight vector with block views.
pub struct EcfClassifier {
    inner: LinearClassifier,
}

/// Trained encoder and classifier.
pub struct EcfModel {
    inner: ModelParams,
}

/// Closed-form myopia numbers of a spec.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EcfMyopia {
    pub norm_e: f64,
    pub norm_u: f64,
    pub norm_r: f64,
    pub cos_ori: f64,
    pub cos_cad: f64,
    /// False when `lambda_star` and `cos_interp` are undefined (both NaN).
    pub has_lambda: bool,
    pub lambda_star: f64,
    pub cos_interp: f64,
}

/// Training settings; `d_repr = 0` means the input dimension.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EcfTrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_pairs: usize,
    pub seed: u64,
    pub d_repr: usize,
    pub identity_encoder: bool,
}

impl From<&EcfTrainConfig> for TrainConfig {
    fn from(c: &EcfTrainConfig) -> Self {
        TrainConfig {
            alpha: c.alpha,
            beta: c.beta,
            learning_rate: c.learning_rate,
            epochs: c.epochs,
            batch_pairs: c.batch_pairs,
            seed: c.seed,
            d_repr: (c.d_repr != 0).then_some(c.d_repr),
            identity_encoder: c.identity_encoder,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(EcfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidSpec(_) | Error::Config(_) => EcfStatus::InvalidSpec,
            Error::Divergence { .. } => EcfStatus::Divergence,
            Error::Io(_) => EcfStatus::Io,
            Error::Singular { .. }
            | Error::ZeroNorm(_)
            | Error::DegenerateInterpolation
            | Error::NonFinite(_)
            | Error::DegenerateClassifier { .. } => EcfStatus::Numeric,
            _ => EcfStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(EcfStatus::NullPointer, format!("{what} is null"))
}

fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> EcfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EcfStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            EcfStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(EcfStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failed call on this thread, or NULL. Owned by the
/// library; valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ecf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ecf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Built-in spec by name ("reference" or "hard").
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ecf_spec_preset(name: *const c_char, out: *mut *mut EcfSpec) -> EcfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let spec = experiment::preset(c_str(name, "name")?)?;
        *out = Box::into_raw(Box::new(EcfSpec { inner: spec }));
        Ok(())
    })
}

/// Parses and validates a TOML spec.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ecf_spec_from_toml(
    text: *const c_char,
    out: *mut *mut EcfSpec,
) -> EcfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let spec = FeatureSpec::from_toml_str(c_str(text, "text")?)?;
        *out = Box::into_raw(Box::new(EcfSpec { inner: spec }));
        Ok(())
    })
}

/// # Safety
/// `spec` must come from this library or be NULL; it must not be used after.
#[no_mangle]
pub unsafe extern "C" fn ecf_spec_free(spec: *mut EcfSpec) {
    if !spec.is_null() {
        drop(Box::from_raw(spec));
    }
}

/// Total feature dimension of `spec`.
///
/// # Safety
/// `spec` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ecf_spec_dimension(spec: *const EcfSpec, out: *mut usize) -> EcfStatus {
    guard(|| {
        *out_ptr(out, "out")? = borrow(spec, "spec")?.inner.dimension();
        Ok(())
    })
}

/// # Safety
/// `spec` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ecf_analyze(spec: *const EcfSpec, out: *mut EcfMyopia) -> EcfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let a = fisher::analyze(&borrow(spec, "spec")?.inner)?;
        *out = EcfMyopia {
            norm_e: a.norm_e,
            norm_u: a.norm_u,
            norm_r: a.norm_r,
            cos_ori: a.cos_ori,
            cos_cad: a.cos_cad,
            has_lambda: a.lambda_star.is_some(),
            lambda_star: a.lambda_star.unwrap_or(f64::NAN),
            cos_interp: a.cos_interp.unwrap_or(f64::NAN),
        };
        Ok(())
    })
}

/// # Safety
/// `spec` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ecf_closed_form(
    spec: *const EcfSpec,
    kind: EcfClosedForm,
    out: *mut *mut EcfClassifier,
) -> EcfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let s = &borrow(spec, "spec")?.inner;
        let c = match kind {
            EcfClosedForm::Original => fisher::closed_form_ori(s)?,
            EcfClosedForm::Counterfactual => fisher::closed_form_cad(s)?,
            EcfClosedForm::Robust => fisher::closed_form_rob(s)?,
        };
        *out = Box::into_raw(Box::new(EcfClassifier { inner: c }));
        Ok(())
    })
}

/// Classifier with the block layout of `spec` and the given weights.
///
/// # Safety
/// `weights` must point to `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ecf_classifier_new(
    spec: *const EcfSpec,
    weights: *const f64,
    len: usize,
    out: *mut *mut EcfClassifier,
) -> EcfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let dims = borrow(spec, "spec")?.inner.dims();
        let w = slice(weights, len, "weights")?.to_vec();
        let c = LinearClassifier::new(dims, w)?;
        *out = Box::into_raw(Box::new(EcfClassifier { inner: c }));
        Ok(())
    })
}

/// # Safety
/// `classifier` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn ecf_classifier_free(classifier: *mut EcfClassifier) {
    if !classifier.is_null() {
        drop(Box::from_raw(classifier));
    }
}

/// Copies the weights into `buf`. `*written` receives the weight count;
/// when `cap` is too small nothing is copied and `ECF_STATUS_BUFFER_TOO_SMALL`
/// is returned, so a NULL/0 call queries the length.
///
/// # Safety
/// `buf` must hold `cap` doubles; `written` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ecf_classifier_weights(
    classifier: *const EcfClassifier,
    buf: *mut f64,
    cap: usize,
    written: *mut usize,
) -> EcfStatus {
    guard(|| {
        let written = out_ptr(written, "written")?;
        let w = &borrow(classifier, "classifier")?.inner.weights;
        *written = w.len();
        if cap < w.len() {
            return Err(Failure(
                EcfStatus::BufferTooSmall,
                format!("buffer holds {cap} values, {} needed", w.len()),
            ));
        }
        if !w.is_empty() {
            if buf.is_null() {
                return Err(null("buf"));
            }
            ptr::copy_nonoverlapping(w.as_ptr(), buf, w.len());
        }
        Ok(())
    })
}

/// Cosine similarity between the classifier and the robust classifier of
/// `spec`.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ecf_cosine_to_robust(
    classifier: *const EcfClassifier,
    spec: *const EcfSpec,
    out: *mut f64,
) -> EcfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = fisher::cosine_to_robust(
            &borrow(classifier, "classifier")?.inner,
            &borrow(spec, "spec")?.inner,
        )?;
        Ok(())
    })
}

/// Default training settings.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ecf_train_config_default(out: *mut EcfTrainConfig) -> EcfStatus {
    guard(|| {
        let d = TrainConfig::default();
        *out_ptr(out, "out")? = EcfTrainConfig {
            alpha: d.alpha,
            beta: d.beta,
            learning_rate: d.learning_rate,
            epochs: d.epochs,
            batch_pairs: d.batch_pairs,
            seed: d.seed,
            d_repr: d.d_repr.unwrap_or(0),
            identity_encoder: d.identity_encoder,
        };
        Ok(())
    })
}

/// Samples `n_pairs` counterfactual pairs from `spec` with `data_seed` and
/// trains a model on them.
///
/// # Safety
/// Pointers must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ecf_train(
    spec: *const EcfSpec,
    config: *const EcfTrainConfig,
    n_pairs: usize,
    alignment_noise_sd: f64,
    data_seed: u64,
    out: *mut *mut EcfModel,
) -> EcfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let spec = &borrow(spec, "spec")?.inner;
        let config = TrainConfig::from(borrow(config, "config")?);
        let data = make_paired_dataset(spec, n_pairs, alignment_noise_sd, data_seed)?;
        let (params, _) = ecf::train_ecf(&data, &config)?;
        *out = Box::into_raw(Box::new(EcfModel { inner: params }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn ecf_model_free(model: *mut EcfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// `[p(negative), p(positive)]` for one feature vector.
///
/// # Safety
/// `features` must point to `len` doubles and `out` to 2 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ecf_model_predict_proba(
    model: *const EcfModel,
    features: *const f64,
    len: usize,
    out: *mut f64,
) -> EcfStatus {
    guard(|| {
        let model = &borrow(model, "model")?.inner;
        if len != model.d_input() {
            return Err(Error::DimensionMismatch {
                expected: model.d_input(),
                actual: len,
            }
            .into());
        }
        let x = slice(features, len, "features")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let p = ecf::predict_proba(model, x)?;
        ptr::copy_nonoverlapping(p.as_ptr(), out, 2);
        Ok(())
    })
}

/// The model's effective decision vector over the input features.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ecf_model_decision(
    model: *const EcfModel,
    spec: *const EcfSpec,
    out: *mut *mut EcfClassifier,
) -> EcfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let model = &borrow(model, "model")?.inner;
        let dims = borrow(spec, "spec")?.inner.dims();
        if dims.total() != model.d_input() {
            return Err(Error::DimensionMismatch {
                expected: model.d_input(),
                actual: dims.total(),
            }
            .into());
        }
        let c = ecf::effective_linear_map(model, dims)?;
        *out = Box::into_raw(Box::new(EcfClassifier { inner: c }));
        Ok(())
    })
}

/// Model as a JSON string; release it with [`ecf_string_free`].
///
/// # Safety
/// `model` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ecf_model_to_json(
    model: *const EcfModel,
    out: *mut *mut c_char,
) -> EcfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let json = borrow(model, "model")?.inner.to_json();
        *out = CString::new(json)
            .map_err(|_| Failure(EcfStatus::Io, "interior NUL in JSON".into()))?
            .into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn ecf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
