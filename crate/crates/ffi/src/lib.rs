//! C ABI over the calrank engine.
//!
//! Every function returns a [`CalrankStatus`]; results are written through
//! out-pointers. On failure the message is available from
//! [`calrank_last_error_message`] on the same thread. Objects are opaque
//! handles released with their `_free` function; strings returned by the
//! library are released with [`calrank_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use calrank::calibrator::{self, CalibratorKnots, PlattParams};
use calrank::experiment::{self, ExperimentSpec, Method};
use calrank::losses::{self, DumpedContext, LossValueGrad};
use calrank::metrics;
use calrank::world::SyntheticWorld;
use calrank::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalrankStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Shape = 3,
    Numeric = 4,
    Domain = 5,
    Lookup = 6,
    Data = 7,
    Fit = 8,
    UndefinedMetric = 9,
    Format = 10,
    Io = 11,
    Utf8 = 12,
    Panic = 13,
}

impl From<&Error> for CalrankStatus {
    fn from(e: &Error) -> Self {
        match e.kind() {
            "config" => CalrankStatus::Config,
            "shape" => CalrankStatus::Shape,
            "numeric" => CalrankStatus::Numeric,
            "domain" => CalrankStatus::Domain,
            "lookup" => CalrankStatus::Lookup,
            "data" => CalrankStatus::Data,
            "fit" => CalrankStatus::Fit,
            "undefined_metric" => CalrankStatus::UndefinedMetric,
            "io" => CalrankStatus::Io,
            _ => CalrankStatus::Format,
        }
    }
}

/// A generated or loaded synthetic world.
pub struct CalrankWorld(SyntheticWorld);

/// A piecewise-linear calibrator built from raw heights.
pub struct CalrankKnots(CalibratorKnots);

/// Optimal score gaps of the two-item pairwise problem.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CalrankPairOptimum {
    pub pointwise_gap: f64,
    pub pair_gap: f64,
    pub pair_probability: f64,
    pub expected_loss: f64,
    pub distinct: bool,
}

struct Failure(CalrankStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(CalrankStatus::from(&e), e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CalrankStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            CalrankStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            CalrankStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(CalrankStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(CalrankStatus::Utf8, format!("{what} is not UTF-8")))
}

unsafe fn spec_from(json: *const c_char) -> Result<ExperimentSpec, Failure> {
    let spec = if json.is_null() { ExperimentSpec::default() } else { ExperimentSpec::from_json(text(json, "spec_json")?)? };
    spec.validate()?;
    Ok(spec)
}

unsafe fn write_loss(l: LossValueGrad, value: *mut f64, grad: *mut f64) -> Result<(), Failure> {
    *out(value, "out_value")? = l.value;
    if !grad.is_null() {
        std::slice::from_raw_parts_mut(grad, l.grad.len()).copy_from_slice(&l.grad);
    }
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn calrank_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn calrank_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn calrank_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Generates the world of an experiment spec (JSON; null for defaults) with
/// the given seed.
///
/// # Safety
/// `spec_json` is null or a NUL-terminated string; `out_world` is writable.
#[no_mangle]
pub unsafe extern "C" fn calrank_world_generate(
    spec_json: *const c_char,
    seed: u64,
    out_world: *mut *mut CalrankWorld,
) -> CalrankStatus {
    guard(|| {
        let slot = out(out_world, "out_world")?;
        let world = spec_from(spec_json)?.world_for_seed(seed)?;
        *slot = Box::into_raw(Box::new(CalrankWorld(world)));
        Ok(())
    })
}

/// Loads a world written by `calrank generate`.
///
/// # Safety
/// `dir` is a NUL-terminated path; `out_world` is writable.
#[no_mangle]
pub unsafe extern "C" fn calrank_world_load(dir: *const c_char, out_world: *mut *mut CalrankWorld) -> CalrankStatus {
    guard(|| {
        let slot = out(out_world, "out_world")?;
        let world = SyntheticWorld::read_from_dir(Path::new(text(dir, "dir")?))?;
        *slot = Box::into_raw(Box::new(CalrankWorld(world)));
        Ok(())
    })
}

/// Writes the world to a directory.
///
/// # Safety
/// `world` is a live handle; `dir` is a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn calrank_world_save(world: *const CalrankWorld, dir: *const c_char) -> CalrankStatus {
    guard(|| {
        let w = world.as_ref().ok_or_else(|| null("world"))?;
        w.0.write_to_dir(Path::new(text(dir, "dir")?))?;
        Ok(())
    })
}

/// Ground-truth click probability of a (user, item) pair.
///
/// # Safety
/// `world` is a live handle; `out_ctr` is writable.
#[no_mangle]
pub unsafe extern "C" fn calrank_world_true_ctr(
    world: *const CalrankWorld,
    user_id: usize,
    item_id: usize,
    out_ctr: *mut f64,
) -> CalrankStatus {
    guard(|| {
        let w = world.as_ref().ok_or_else(|| null("world"))?;
        *out(out_ctr, "out_ctr")? = w.0.true_ctr(user_id, item_id)?;
        Ok(())
    })
}

/// Number of users and items of the world.
///
/// # Safety
/// `world` is a live handle; the out-pointers are writable.
#[no_mangle]
pub unsafe extern "C" fn calrank_world_size(
    world: *const CalrankWorld,
    out_users: *mut usize,
    out_items: *mut usize,
) -> CalrankStatus {
    guard(|| {
        let w = world.as_ref().ok_or_else(|| null("world"))?;
        *out(out_users, "out_users")? = w.0.config.num_users;
        *out(out_items, "out_items")? = w.0.config.num_items;
        Ok(())
    })
}

/// Releases a world. Null is ignored.
///
/// # Safety
/// `world` comes from this library and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn calrank_world_free(world: *mut CalrankWorld) {
    if !world.is_null() {
        drop(Box::from_raw(world));
    }
}

/// Builds a calibrator from 100 raw heights.
///
/// # Safety
/// `raw` points to `len` doubles; `out_knots` is writable.
#[no_mangle]
pub unsafe extern "C" fn calrank_knots_from_raw(
    raw: *const f64,
    len: usize,
    out_knots: *mut *mut CalrankKnots,
) -> CalrankStatus {
    guard(|| {
        let slot = out(out_knots, "out_knots")?;
        let k = calibrator::knots_from_raw(slice(raw, len, "raw")?)?;
        *slot = Box::into_raw(Box::new(CalrankKnots(k)));
        Ok(())
    })
}

/// Calibrates one prediction in `[0, 1]`.
///
/// # Safety
/// `knots` is a live handle; `out_value` is writable.
#[no_mangle]
pub unsafe extern "C" fn calrank_knots_calibrate(
    knots: *const CalrankKnots,
    prediction: f64,
    out_value: *mut f64,
) -> CalrankStatus {
    guard(|| {
        let k = knots.as_ref().ok_or_else(|| null("knots"))?;
        *out(out_value, "out_value")? = k.0.calibrate(prediction)?;
        Ok(())
    })
}

/// Releases a calibrator. Null is ignored.
///
/// # Safety
/// `knots` comes from this library and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn calrank_knots_free(knots: *mut CalrankKnots) {
    if !knots.is_null() {
        drop(Box::from_raw(knots));
    }
}

/// AUC of one query; `UndefinedMetric` when a class is missing.
///
/// # Safety
/// `scores` and `labels` point to `n` elements; `out_value` is writable.
#[no_mangle]
pub unsafe extern "C" fn calrank_auc(scores: *const f64, labels: *const u8, n: usize, out_value: *mut f64) -> CalrankStatus {
    guard(|| {
        let v = metrics::auc(slice(scores, n, "scores")?, slice(labels, n, "labels")?)
            .ok_or_else(|| Failure(CalrankStatus::UndefinedMetric, "AUC needs both classes".into()))?;
        *out(out_value, "out_value")? = v;
        Ok(())
    })
}

/// GAUC over groups stored back to back; `offsets` holds `num_groups + 1`
/// increasing boundaries into `scores`/`labels`.
///
/// # Safety
/// `offsets` has `num_groups + 1` entries and the arrays cover
/// `offsets[num_groups]` elements; the out-pointers are writable
/// (`out_skipped` may be null).
#[no_mangle]
pub unsafe extern "C" fn calrank_gauc(
    scores: *const f64,
    labels: *const u8,
    offsets: *const usize,
    num_groups: usize,
    out_value: *mut f64,
    out_skipped: *mut usize,
) -> CalrankStatus {
    guard(|| {
        let offsets = slice(offsets, num_groups + 1, "offsets")?;
        if offsets.windows(2).any(|w| w[1] < w[0]) {
            return Err(Failure(CalrankStatus::Shape, "offsets must be nondecreasing".into()));
        }
        let total = offsets[num_groups];
        let scores = slice(scores, total, "scores")?;
        let labels = slice(labels, total, "labels")?;
        let groups = offsets.windows(2).map(|w| (&scores[w[0]..w[1]], &labels[w[0]..w[1]]));
        let (v, skipped) = metrics::gauc(groups)?;
        *out(out_value, "out_value")? = v;
        if let Some(s) = out_skipped.as_mut() {
            *s = skipped;
        }
        Ok(())
    })
}

/// Binary-gain NDCG@k; `UndefinedMetric` without positives.
///
/// # Safety
/// `scores` and `labels` point to `n` elements; `out_value` is writable.
#[no_mangle]
pub unsafe extern "C" fn calrank_ndcg_at_k(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    k: usize,
    out_value: *mut f64,
) -> CalrankStatus {
    guard(|| {
        let v = metrics::ndcg_at_k(slice(scores, n, "scores")?, slice(labels, n, "labels")?, k)
            .ok_or_else(|| Failure(CalrankStatus::UndefinedMetric, "NDCG needs a positive label".into()))?;
        *out(out_value, "out_value")? = v;
        Ok(())
    })
}

type ProbabilityMetric = fn(&[f64], &[u8]) -> calrank::Result<f64>;

unsafe fn probability_metric(
    f: ProbabilityMetric,
    predictions: *const f64,
    labels: *const u8,
    n: usize,
    out_value: *mut f64,
) -> CalrankStatus {
    guard(|| {
        *out(out_value, "out_value")? = f(slice(predictions, n, "predictions")?, slice(labels, n, "labels")?)?;
        Ok(())
    })
}

/// Mean binary cross-entropy of probabilities.
///
/// # Safety
/// `predictions` and `labels` point to `n` elements; `out_value` is writable.
#[no_mangle]
pub unsafe extern "C" fn calrank_logloss(predictions: *const f64, labels: *const u8, n: usize, out_value: *mut f64) -> CalrankStatus {
    probability_metric(metrics::logloss, predictions, labels, n, out_value)
}

/// Expected calibration error over 100 equal-width bins.
///
/// # Safety
/// As [`calrank_logloss`].
#[no_mangle]
pub unsafe extern "C" fn calrank_ece(predictions: *const f64, labels: *const u8, n: usize, out_value: *mut f64) -> CalrankStatus {
    probability_metric(metrics::ece, predictions, labels, n, out_value)
}

/// Sum of predictions over sum of labels.
///
/// # Safety
/// As [`calrank_logloss`].
#[no_mangle]
pub unsafe extern "C" fn calrank_pcoc(predictions: *const f64, labels: *const u8, n: usize, out_value: *mut f64) -> CalrankStatus {
    probability_metric(metrics::pcoc, predictions, labels, n, out_value)
}

/// Pointwise cross-entropy of one logit and its gradient.
///
/// # Safety
/// `out_value` is writable; `out_grad` is null or writable.
#[no_mangle]
pub unsafe extern "C" fn calrank_pointwise_loss(logit: f64, label: u8, out_value: *mut f64, out_grad: *mut f64) -> CalrankStatus {
    guard(|| {
        if label > 1 {
            return Err(Failure(CalrankStatus::Data, "label must be 0 or 1".into()));
        }
        write_loss(losses::pointwise_loss_from_logit(logit, label), out_value, out_grad)
    })
}

/// Group pairwise loss; `out_grad` receives `n` logit gradients.
///
/// # Safety
/// `logits` and `labels` point to `n` elements; `out_value` is writable;
/// `out_grad` is null or has room for `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn calrank_pairwise_loss(
    logits: *const f64,
    labels: *const u8,
    n: usize,
    out_value: *mut f64,
    out_grad: *mut f64,
) -> CalrankStatus {
    guard(|| write_loss(losses::pairwise_loss(slice(logits, n, "logits")?, slice(labels, n, "labels")?)?, out_value, out_grad))
}

/// Group listwise softmax loss; gradients as [`calrank_pairwise_loss`].
///
/// # Safety
/// As [`calrank_pairwise_loss`].
#[no_mangle]
pub unsafe extern "C" fn calrank_listnet_loss(
    logits: *const f64,
    labels: *const u8,
    n: usize,
    out_value: *mut f64,
    out_grad: *mut f64,
) -> CalrankStatus {
    guard(|| write_loss(losses::listnet_loss(slice(logits, n, "logits")?, slice(labels, n, "labels")?)?, out_value, out_grad))
}

/// `alpha` times mean pointwise plus `1 - alpha` times pairwise loss.
///
/// # Safety
/// As [`calrank_pairwise_loss`].
#[no_mangle]
pub unsafe extern "C" fn calrank_multi_objective_loss(
    logits: *const f64,
    labels: *const u8,
    n: usize,
    alpha: f64,
    out_value: *mut f64,
    out_grad: *mut f64,
) -> CalrankStatus {
    guard(|| {
        let l = losses::multi_objective_loss(slice(logits, n, "logits")?, slice(labels, n, "labels")?, alpha)?;
        write_loss(l, out_value, out_grad)
    })
}

unsafe fn dumped(scores: *const f64, labels: *const u8, m: usize) -> Result<DumpedContext, Failure> {
    Ok(DumpedContext::new(slice(scores, m, "dumped_scores")?.to_vec(), slice(labels, m, "dumped_labels")?.to_vec(), 0)?)
}

/// Per-sample pairwise loss against a dumped context of `m` logged scores.
///
/// # Safety
/// The dumped arrays point to `m` elements; `out_value` is writable;
/// `out_grad` is null or writable.
#[no_mangle]
pub unsafe extern "C" fn calrank_self_boost_loss(
    logit: f64,
    label: u8,
    dumped_scores: *const f64,
    dumped_labels: *const u8,
    m: usize,
    out_value: *mut f64,
    out_grad: *mut f64,
) -> CalrankStatus {
    guard(|| write_loss(losses::self_boost_pair_loss(logit, label, &dumped(dumped_scores, dumped_labels, m)?)?, out_value, out_grad))
}

/// `alpha` times pointwise plus `1 - alpha` times the self-boosted pairwise
/// loss. `m = 0` passes no dumped context, which is a `Data` error.
///
/// # Safety
/// As [`calrank_self_boost_loss`].
#[no_mangle]
pub unsafe extern "C" fn calrank_multi_boost_loss(
    logit: f64,
    label: u8,
    dumped_scores: *const f64,
    dumped_labels: *const u8,
    m: usize,
    alpha: f64,
    out_value: *mut f64,
    out_grad: *mut f64,
) -> CalrankStatus {
    guard(|| {
        let ctx = if m == 0 { None } else { Some(dumped(dumped_scores, dumped_labels, m)?) };
        write_loss(losses::multi_boost_loss(logit, label, ctx.as_ref(), alpha)?, out_value, out_grad)
    })
}

/// Fits Platt scaling `σ(scale · logit + offset)`.
///
/// # Safety
/// `logits` and `labels` point to `n` elements; the out-pointers are writable.
#[no_mangle]
pub unsafe extern "C" fn calrank_platt_fit(
    logits: *const f64,
    labels: *const u8,
    n: usize,
    out_scale: *mut f64,
    out_offset: *mut f64,
) -> CalrankStatus {
    guard(|| {
        let p = calibrator::platt_fit(slice(logits, n, "logits")?, slice(labels, n, "labels")?)?;
        *out(out_scale, "out_scale")? = p.scale;
        *out(out_offset, "out_offset")? = p.offset;
        Ok(())
    })
}

/// `σ(scale · logit + offset)`.
#[no_mangle]
pub extern "C" fn calrank_platt_apply(scale: f64, offset: f64, logit: f64) -> f64 {
    PlattParams { scale, offset }.apply(logit)
}

/// Optimal pairwise and pointwise score gaps for two Bernoulli items.
///
/// # Safety
/// `out_result` is writable.
#[no_mangle]
pub unsafe extern "C" fn calrank_pair_optimum(
    p1: f64,
    p2: f64,
    include_ties: bool,
    out_result: *mut CalrankPairOptimum,
) -> CalrankStatus {
    guard(|| {
        let r = experiment::cmd_theorem1_oracle(p1, p2, include_ties)?;
        *out(out_result, "out_result")? = CalrankPairOptimum {
            pointwise_gap: r.pointwise_gap,
            pair_gap: r.pair_gap,
            pair_probability: r.pair_probability,
            expected_loss: r.expected_loss,
            distinct: r.distinct,
        };
        Ok(())
    })
}

/// Runs an experiment command (`compare`, `shuffle-ablation`, `alpha-sweep`
/// or `calibration-ablation`) on a spec (JSON; null for defaults) and
/// returns its summary JSON, to be released with [`calrank_string_free`].
///
/// # Safety
/// `command` is a NUL-terminated string; `spec_json` is null or one;
/// `out_json` is writable.
#[no_mangle]
pub unsafe extern "C" fn calrank_run_command(
    command: *const c_char,
    spec_json: *const c_char,
    out_json: *mut *mut c_char,
) -> CalrankStatus {
    guard(|| {
        let slot = out(out_json, "out_json")?;
        *slot = ptr::null_mut();
        let spec = spec_from(spec_json)?;
        let report = match text(command, "command")? {
            "compare" => experiment::compare_methods(&spec, &Method::ALL)?,
            "shuffle-ablation" => experiment::cmd_shuffle_ablation(&spec)?,
            "alpha-sweep" => experiment::cmd_alpha_sweep(&spec, &spec.weights)?,
            "calibration-ablation" => experiment::cmd_calibration_ablation(&spec)?,
            other => return Err(Failure(CalrankStatus::Config, format!("unknown command `{other}`"))),
        };
        let json = report.summary_json().to_string();
        *slot = CString::new(json).map_err(|_| Failure(CalrankStatus::Format, "summary contains NUL".into()))?.into_raw();
        Ok(())
    })
}
