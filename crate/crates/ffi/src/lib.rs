//! C ABI for diagbed.
//!
//! Every fallible function returns a [`DiagbedStatus`]. On failure the
//! message can be read with [`diagbed_last_error`] from the same thread.
//! Strings returned through out-parameters are owned by the caller and must
//! be released with [`diagbed_string_free`]; handles with their `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use diagbed::belief::{entropy_bernoulli, expected_kl, kl_bernoulli, stopping_threshold, Belief, StoppingPolicy};
use diagbed::dataset::Dataset;
use diagbed::engine::{ChosenBy, Criterion, Engine, EngineError, Recommendation, SessionState};
use diagbed::harness::metrics::{auc, energy_distance_1d, wasserstein_1d};
use diagbed::surrogate::{Surrogate, SurrogateConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagbedStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Dataset, manifest or value error.
    Data = 3,
    /// The surrogate failed or is misconfigured.
    Surrogate = 4,
    /// Operation not allowed in the session's current state.
    Conflict = 5,
    Panic = 6,
}

/// A loaded dataset.
pub struct DiagbedDataset {
    inner: Arc<Dataset>,
}

/// One interactive diagnosis session.
pub struct DiagbedSession {
    dataset: Arc<Dataset>,
    engine: Engine,
    surrogate: Arc<dyn Surrogate>,
    state: SessionState,
    pending: Option<Recommendation>,
    seed: u64,
}

struct Error {
    status: DiagbedStatus,
    message: String,
}

impl Error {
    fn new(status: DiagbedStatus, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<EngineError> for Error {
    fn from(e: EngineError) -> Self {
        let status = match &e {
            EngineError::Surrogate(_) | EngineError::NoEvaluable => DiagbedStatus::Surrogate,
            EngineError::Data(_) => DiagbedStatus::Data,
            EngineError::AlreadyKnown(_) | EngineError::Inactive(_) => DiagbedStatus::Conflict,
            _ => DiagbedStatus::InvalidArgument,
        };
        Error::new(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(text));
}

fn guard(f: impl FnOnce() -> Result<(), Error>) -> DiagbedStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DiagbedStatus::Ok,
        Ok(Err(e)) => {
            set_last_error(&e.message);
            e.status
        }
        Err(_) => {
            set_last_error("internal panic");
            DiagbedStatus::Panic
        }
    }
}

fn null(what: &str) -> Error {
    Error::new(DiagbedStatus::NullPointer, format!("{what} is null"))
}

fn invalid(message: impl Into<String>) -> Error {
    Error::new(DiagbedStatus::InvalidArgument, message)
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Error> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Error> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), Error> {
    if out.is_null() {
        return Err(null("out"));
    }
    out.write(value);
    Ok(())
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Error> {
    let c = CString::new(s).map_err(|_| invalid("string contains a nul byte"))?;
    write_out(out, c.into_raw())
}

fn probability(p: f64, what: &str) -> Result<f64, Error> {
    if (0.0..=1.0).contains(&p) {
        Ok(p)
    } else {
        Err(invalid(format!("{what} = {p} is not a probability")))
    }
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn diagbed_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn diagbed_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// KL(Bern(q) || Bern(p)) in nats.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn diagbed_kl_bernoulli(q: f64, p: f64, out: *mut f64) -> DiagbedStatus {
    guard(|| write_out(out, kl_bernoulli(probability(q, "q")?, probability(p, "p")?)))
}

/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn diagbed_entropy_bernoulli(p: f64, out: *mut f64) -> DiagbedStatus {
    guard(|| write_out(out, entropy_bernoulli(probability(p, "p")?)))
}

/// Mean KL of `n` posterior draws against `prior`.
///
/// # Safety
/// `draws` must point to `n` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn diagbed_expected_kl(
    draws: *const f64,
    n: usize,
    prior: f64,
    out: *mut f64,
) -> DiagbedStatus {
    guard(|| {
        let draws = slice_arg(draws, n, "draws")?;
        let prior = Belief::new(prior).map_err(|e| invalid(e.to_string()))?;
        let v = expected_kl(draws, prior).map_err(|e| invalid(e.to_string()))?;
        write_out(out, v)
    })
}

/// Expected KL a test must exceed to be worth acquiring.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn diagbed_stopping_threshold(
    prior: f64,
    theta: f64,
    gamma: f64,
    out: *mut f64,
) -> DiagbedStatus {
    guard(|| {
        let policy = StoppingPolicy::new(theta, gamma).map_err(|e| invalid(e.to_string()))?;
        let prior = Belief::new(prior).map_err(|e| invalid(e.to_string()))?;
        write_out(out, stopping_threshold(prior, &policy))
    })
}

/// ROC AUC. Fails when only one class is present.
///
/// # Safety
/// `labels` and `scores` must point to `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn diagbed_auc(
    labels: *const u8,
    scores: *const f64,
    n: usize,
    out: *mut f64,
) -> DiagbedStatus {
    guard(|| {
        let labels = slice_arg(labels, n, "labels")?;
        let scores = slice_arg(scores, n, "scores")?;
        if labels.iter().any(|&l| l > 1) {
            return Err(invalid("labels must be 0 or 1"));
        }
        let v = auc(labels, scores).ok_or_else(|| invalid("AUC is undefined for a single class"))?;
        write_out(out, v)
    })
}

/// # Safety
/// `a` and `b` must point to `na` and `nb` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn diagbed_wasserstein_1d(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    out: *mut f64,
) -> DiagbedStatus {
    guard(|| {
        let v = wasserstein_1d(slice_arg(a, na, "a")?, slice_arg(b, nb, "b")?)
            .map_err(|e| invalid(e.to_string()))?;
        write_out(out, v)
    })
}

/// # Safety
/// `a` and `b` must point to `na` and `nb` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn diagbed_energy_distance_1d(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    out: *mut f64,
) -> DiagbedStatus {
    guard(|| {
        let v = energy_distance_1d(slice_arg(a, na, "a")?, slice_arg(b, nb, "b")?)
            .map_err(|e| invalid(e.to_string()))?;
        write_out(out, v)
    })
}

/// Loads a dataset from its TOML manifest.
///
/// # Safety
/// `manifest_path` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn diagbed_dataset_open(
    manifest_path: *const c_char,
    out: *mut *mut DiagbedDataset,
) -> DiagbedStatus {
    guard(|| {
        let path = str_arg(manifest_path, "manifest_path")?;
        let dataset =
            Dataset::from_manifest(Path::new(path)).map_err(|e| Error::new(DiagbedStatus::Data, e.to_string()))?;
        write_out(
            out,
            Box::into_raw(Box::new(DiagbedDataset {
                inner: Arc::new(dataset),
            })),
        )
    })
}

/// # Safety
/// `dataset` must be NULL or a handle from [`diagbed_dataset_open`].
#[no_mangle]
pub unsafe extern "C" fn diagbed_dataset_free(dataset: *mut DiagbedDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

unsafe fn dataset_ref<'a>(dataset: *const DiagbedDataset) -> Result<&'a Dataset, Error> {
    dataset.as_ref().map(|d| &*d.inner).ok_or_else(|| null("dataset"))
}

/// Number of loaded patient records.
///
/// # Safety
/// `dataset` must be a valid handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn diagbed_dataset_len(dataset: *const DiagbedDataset, out: *mut usize) -> DiagbedStatus {
    guard(|| write_out(out, dataset_ref(dataset)?.records.len()))
}

/// Patient id of record `index`.
///
/// # Safety
/// `dataset` must be a valid handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn diagbed_dataset_patient_id(
    dataset: *const DiagbedDataset,
    index: usize,
    out: *mut *mut c_char,
) -> DiagbedStatus {
    guard(|| {
        let d = dataset_ref(dataset)?;
        let r = d
            .records
            .get(index)
            .ok_or_else(|| invalid(format!("index {index} out of range")))?;
        write_string(out, r.id.clone())
    })
}

/// Vignette of record `index` with every feature known.
///
/// # Safety
/// `dataset` must be a valid handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn diagbed_dataset_vignette(
    dataset: *const DiagbedDataset,
    index: usize,
    out: *mut *mut c_char,
) -> DiagbedStatus {
    guard(|| {
        let d = dataset_ref(dataset)?;
        let r = d
            .records
            .get(index)
            .ok_or_else(|| invalid(format!("index {index} out of range")))?;
        let evidence = r
            .evidence(r.values.keys().map(String::as_str))
            .map_err(|e| Error::new(DiagbedStatus::Data, e.to_string()))?;
        write_string(out, evidence.render(&d.schema))
    })
}

/// Starts a session for `patient_id`. `surrogate_path` names a surrogate
/// TOML; relative paths inside it resolve against its directory.
///
/// # Safety
/// Strings must be NUL-terminated; `dataset` must be a valid handle; `out`
/// must be valid.
#[no_mangle]
pub unsafe extern "C" fn diagbed_session_new(
    dataset: *const DiagbedDataset,
    patient_id: *const c_char,
    surrogate_path: *const c_char,
    theta: f64,
    gamma: f64,
    m: usize,
    seed: u64,
    out: *mut *mut DiagbedSession,
) -> DiagbedStatus {
    guard(|| {
        let handle = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        let d = handle.inner.clone();
        let id = str_arg(patient_id, "patient_id")?;
        let path = Path::new(str_arg(surrogate_path, "surrogate_path")?);
        let record = d
            .record(id)
            .ok_or_else(|| Error::new(DiagbedStatus::Data, format!("no patient `{id}`")))?;
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::new(DiagbedStatus::Surrogate, format!("{}: {e}", path.display())))?;
        let mut config: SurrogateConfig = toml::from_str(&text)
            .map_err(|e| Error::new(DiagbedStatus::Surrogate, format!("{}: {e}", path.display())))?;
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        let surrogate = config
            .build(&d.schema)
            .map_err(|e| Error::new(DiagbedStatus::Surrogate, e.to_string()))?;
        let policy = StoppingPolicy::new(theta, gamma).map_err(|e| invalid(e.to_string()))?;
        let engine = Engine::new(d.schema.clone(), policy, Criterion::Kl, m)?;
        let state = SessionState::from_record(&d.schema, record)?;
        write_out(
            out,
            Box::into_raw(Box::new(DiagbedSession {
                dataset: d,
                engine,
                surrogate,
                state,
                pending: None,
                seed,
            })),
        )
    })
}

/// # Safety
/// `session` must be NULL or a handle from [`diagbed_session_new`].
#[no_mangle]
pub unsafe extern "C" fn diagbed_session_free(session: *mut DiagbedSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Evaluates the current step and writes the recommendation as JSON. The
/// result is cached until a value is submitted.
///
/// # Safety
/// `session` must be a valid handle; `out_json` must be valid.
#[no_mangle]
pub unsafe extern "C" fn diagbed_session_recommend(
    session: *mut DiagbedSession,
    out_json: *mut *mut c_char,
) -> DiagbedStatus {
    guard(|| {
        let s = session.as_mut().ok_or_else(|| null("session"))?;
        if s.pending.is_none() {
            let rec = s.engine.recommend(&s.state, &*s.surrogate, s.seed)?;
            s.state.prior = Some(rec.prior);
            s.pending = Some(rec);
        }
        let json = serde_json::to_string(s.pending.as_ref().expect("set above")).map_err(|e| invalid(e.to_string()))?;
        write_string(out_json, json)
    })
}

/// Records an observed value for `feature`. Without `override_choice` the
/// feature must be the current recommendation.
///
/// # Safety
/// `session` must be a valid handle; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn diagbed_session_submit(
    session: *mut DiagbedSession,
    feature: *const c_char,
    value: *const c_char,
    override_choice: bool,
) -> DiagbedStatus {
    guard(|| {
        let s = session.as_mut().ok_or_else(|| null("session"))?;
        let feature = str_arg(feature, "feature")?;
        let raw = str_arg(value, "value")?;
        if s.state.evidence.contains(feature) {
            return Err(Error::new(DiagbedStatus::Conflict, format!("`{feature}` is already known")));
        }
        let recommended = s.pending.as_ref().and_then(|p| p.recommended.as_deref());
        if !override_choice && recommended != Some(feature) {
            return Err(invalid(format!("`{feature}` is not the current recommendation")));
        }
        let chosen_by = if recommended == Some(feature) {
            ChosenBy::Criterion
        } else {
            ChosenBy::Override
        };
        let spec = s
            .dataset
            .schema
            .feature(feature)
            .ok_or_else(|| Error::new(DiagbedStatus::Data, format!("unknown feature `{feature}`")))?;
        let value = spec
            .parse_value(raw)
            .map_err(|e| Error::new(DiagbedStatus::Data, e.to_string()))?;
        let pending = s.pending.take();
        if let Err(e) = s
            .state
            .apply_result(&s.dataset.schema, feature, value, chosen_by, pending.clone())
        {
            s.pending = pending;
            return Err(e.into());
        }
        Ok(())
    })
}

/// Full session state, including the trajectory, as JSON.
///
/// # Safety
/// `session` must be a valid handle; `out_json` must be valid.
#[no_mangle]
pub unsafe extern "C" fn diagbed_session_state(
    session: *const DiagbedSession,
    out_json: *mut *mut c_char,
) -> DiagbedStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        let json = serde_json::to_string(&s.state).map_err(|e| invalid(e.to_string()))?;
        write_string(out_json, json)
    })
}
