//! C ABI for the one-shot learner library.
//!
//! Conventions: opaque handles behind pointers, integer status codes, and a
//! thread-local last-error message. Images cross the boundary as row-major
//! `h x w x c` buffers of doubles in `[0, 1]`; they are converted to the
//! model's stored precision internally. The generated header lives at
//! `include/learnet.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use learnet::evaluation::argmax_scores;
use learnet::model_io;
use learnet::networks::{
    bind_exemplar, score_candidates, score_map, Binding, NetworkSpec, ParamSet, Plan,
};
use learnet::scalar::Scalar;
use learnet::tensor::Tensor;
use learnet::Error;

/// Status code returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LearnetStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    IoError = 3,
    BadModelFile = 4,
    BadConfig = 5,
    ShapeMismatch = 6,
    Unsupported = 7,
    InternalPanic = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn status_for(err: &Error) -> LearnetStatus {
    match err {
        Error::Config(_) => LearnetStatus::BadConfig,
        Error::Io(_) | Error::Data(_) => LearnetStatus::IoError,
        Error::Format(_) => LearnetStatus::BadModelFile,
        Error::Shape(_) => LearnetStatus::ShapeMismatch,
        Error::Diverged(_) => LearnetStatus::Unsupported,
        Error::Unsupported(_) => LearnetStatus::Unsupported,
    }
}

struct ModelImpl<F: Scalar> {
    spec: NetworkSpec,
    plan: Plan,
    params: ParamSet<F>,
}

enum AnyModel {
    F32(Arc<ModelImpl<f32>>),
    F64(Arc<ModelImpl<f64>>),
}

/// Opaque handle to a loaded model.
pub struct LearnetModel {
    inner: AnyModel,
}

enum AnyPupil {
    F32(Arc<ModelImpl<f32>>, Binding<f32>),
    F64(Arc<ModelImpl<f64>>, Binding<f64>),
}

/// Opaque handle to a pupil network induced by one bound exemplar.
pub struct LearnetPupil {
    inner: AnyPupil,
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn learnet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message describing the most recent error on this thread. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn learnet_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

unsafe fn path_arg<'a>(ptr: *const c_char) -> Result<&'a Path, LearnetStatus> {
    if ptr.is_null() {
        set_error("path is NULL");
        return Err(LearnetStatus::NullArgument);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(LearnetStatus::InvalidUtf8)
        }
    }
}

fn guard(f: impl FnOnce() -> LearnetStatus) -> LearnetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "internal panic".into());
            set_error(&msg);
            LearnetStatus::InternalPanic
        }
    }
}

/// Load a model file. On success `*out` owns the handle; release it with
/// [`learnet_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn learnet_model_load(
    path: *const c_char,
    out: *mut *mut LearnetModel,
) -> LearnetStatus {
    guard(|| {
        if out.is_null() {
            set_error("out pointer is NULL");
            return LearnetStatus::NullArgument;
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let loaded = match model_io::load_model(path) {
            Ok(m) => m,
            Err(e) => {
                set_error(&e.to_string());
                return status_for(&e);
            }
        };
        let build = |model: LearnetModel| {
            *out = Box::into_raw(Box::new(model));
            LearnetStatus::Ok
        };
        match loaded {
            model_io::LoadedModel::F32 { spec, params } => match spec.validate() {
                Ok(plan) => build(LearnetModel {
                    inner: AnyModel::F32(Arc::new(ModelImpl { spec, plan, params })),
                }),
                Err(e) => {
                    set_error(&e.to_string());
                    status_for(&e)
                }
            },
            model_io::LoadedModel::F64 { spec, params } => match spec.validate() {
                Ok(plan) => build(LearnetModel {
                    inner: AnyModel::F64(Arc::new(ModelImpl { spec, plan, params })),
                }),
                Err(e) => {
                    set_error(&e.to_string());
                    status_for(&e)
                }
            },
        }
    })
}

/// Write the model back out (byte-identical for identical models).
///
/// # Safety
/// `model` must come from [`learnet_model_load`]; `path` must be a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn learnet_model_save(
    model: *const LearnetModel,
    path: *const c_char,
) -> LearnetStatus {
    guard(|| {
        let Some(model) = model.as_ref() else {
            set_error("model is NULL");
            return LearnetStatus::NullArgument;
        };
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let result = match &model.inner {
            AnyModel::F32(m) => model_io::save(&m.spec, &m.params, path),
            AnyModel::F64(m) => model_io::save(&m.spec, &m.params, path),
        };
        match result {
            Ok(()) => LearnetStatus::Ok,
            Err(e) => {
                set_error(&e.to_string());
                status_for(&e)
            }
        }
    })
}

/// Release a model handle (NULL is a no-op).
///
/// # Safety
/// `model` must come from [`learnet_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn learnet_model_free(model: *mut LearnetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Exemplar/candidate input dimensions of the model.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn learnet_model_input_dims(
    model: *const LearnetModel,
    out_h: *mut usize,
    out_w: *mut usize,
    out_c: *mut usize,
) -> LearnetStatus {
    guard(|| {
        let Some(model) = model.as_ref() else {
            set_error("model is NULL");
            return LearnetStatus::NullArgument;
        };
        if out_h.is_null() || out_w.is_null() || out_c.is_null() {
            set_error("output pointer is NULL");
            return LearnetStatus::NullArgument;
        }
        let input = match &model.inner {
            AnyModel::F32(m) => m.spec.input,
            AnyModel::F64(m) => m.spec.input,
        };
        *out_h = input[0];
        *out_w = input[1];
        *out_c = input[2];
        LearnetStatus::Ok
    })
}

unsafe fn image_from_raw<F: Scalar>(
    data: *const f64,
    h: usize,
    w: usize,
    c: usize,
    expect: Option<[usize; 3]>,
) -> Result<Tensor<F>, LearnetStatus> {
    if data.is_null() {
        set_error("image pointer is NULL");
        return Err(LearnetStatus::NullArgument);
    }
    if h == 0 || w == 0 || c == 0 {
        set_error("image dimensions must be positive");
        return Err(LearnetStatus::ShapeMismatch);
    }
    if let Some(e) = expect {
        if [h, w, c] != e {
            set_error(&format!("image is {h}x{w}x{c} but the model expects {}x{}x{}", e[0], e[1], e[2]));
            return Err(LearnetStatus::ShapeMismatch);
        }
    }
    let slice = std::slice::from_raw_parts(data, h * w * c);
    Ok(Tensor::new(
        vec![h, w, c],
        slice.iter().map(|&v| F::from_f64(v)).collect(),
    ))
}

/// Similarity score of an (exemplar, candidate) pair; both images must be
/// `h x w x c` doubles matching the model's input dimensions.
///
/// # Safety
/// Pointers must be valid and the image buffers at least `h*w*c` long.
#[no_mangle]
pub unsafe extern "C" fn learnet_model_score(
    model: *const LearnetModel,
    exemplar: *const f64,
    candidate: *const f64,
    h: usize,
    w: usize,
    c: usize,
    out_score: *mut f64,
) -> LearnetStatus {
    guard(|| {
        let Some(model) = model.as_ref() else {
            set_error("model is NULL");
            return LearnetStatus::NullArgument;
        };
        if out_score.is_null() {
            set_error("out_score is NULL");
            return LearnetStatus::NullArgument;
        }
        match &model.inner {
            AnyModel::F32(m) => score_pair(m, exemplar, candidate, h, w, c, out_score),
            AnyModel::F64(m) => score_pair(m, exemplar, candidate, h, w, c, out_score),
        }
    })
}

unsafe fn score_pair<F: Scalar>(
    m: &ModelImpl<F>,
    exemplar: *const f64,
    candidate: *const f64,
    h: usize,
    w: usize,
    c: usize,
    out_score: *mut f64,
) -> LearnetStatus {
    let expect = Some(m.spec.input);
    let z = match image_from_raw::<F>(exemplar, h, w, c, expect) {
        Ok(t) => t,
        Err(s) => return s,
    };
    let x = match image_from_raw::<F>(candidate, h, w, c, expect) {
        Ok(t) => t,
        Err(s) => return s,
    };
    let binding = bind_exemplar(&m.spec, &m.plan, &m.params, &z);
    let scores = score_candidates(&m.spec, &m.plan, &m.params, &binding, &[&x]);
    *out_score = scores[0].as_f64();
    LearnetStatus::Ok
}

/// Bind an exemplar once: for meta-network models this runs the parameter
/// prediction a single time; the returned pupil then scores any number of
/// candidates. Release with [`learnet_pupil_free`].
///
/// # Safety
/// Pointers must be valid; the exemplar buffer must hold `h*w*c` doubles.
#[no_mangle]
pub unsafe extern "C" fn learnet_bind_exemplar(
    model: *const LearnetModel,
    exemplar: *const f64,
    h: usize,
    w: usize,
    c: usize,
    out: *mut *mut LearnetPupil,
) -> LearnetStatus {
    guard(|| {
        let Some(model) = model.as_ref() else {
            set_error("model is NULL");
            return LearnetStatus::NullArgument;
        };
        if out.is_null() {
            set_error("out pointer is NULL");
            return LearnetStatus::NullArgument;
        }
        match &model.inner {
            AnyModel::F32(m) => {
                let z = match image_from_raw::<f32>(exemplar, h, w, c, Some(m.spec.input)) {
                    Ok(t) => t,
                    Err(s) => return s,
                };
                let binding = bind_exemplar(&m.spec, &m.plan, &m.params, &z);
                *out = Box::into_raw(Box::new(LearnetPupil {
                    inner: AnyPupil::F32(Arc::clone(m), binding),
                }));
            }
            AnyModel::F64(m) => {
                let z = match image_from_raw::<f64>(exemplar, h, w, c, Some(m.spec.input)) {
                    Ok(t) => t,
                    Err(s) => return s,
                };
                let binding = bind_exemplar(&m.spec, &m.plan, &m.params, &z);
                *out = Box::into_raw(Box::new(LearnetPupil {
                    inner: AnyPupil::F64(Arc::clone(m), binding),
                }));
            }
        }
        LearnetStatus::Ok
    })
}

/// Score one candidate against a bound exemplar.
///
/// # Safety
/// Pointers must be valid; the candidate buffer must hold `h*w*c` doubles.
#[no_mangle]
pub unsafe extern "C" fn learnet_pupil_score(
    pupil: *const LearnetPupil,
    candidate: *const f64,
    h: usize,
    w: usize,
    c: usize,
    out_score: *mut f64,
) -> LearnetStatus {
    guard(|| {
        let Some(pupil) = pupil.as_ref() else {
            set_error("pupil is NULL");
            return LearnetStatus::NullArgument;
        };
        if out_score.is_null() {
            set_error("out_score is NULL");
            return LearnetStatus::NullArgument;
        }
        match &pupil.inner {
            AnyPupil::F32(m, b) => {
                let x = match image_from_raw::<f32>(candidate, h, w, c, Some(m.spec.input)) {
                    Ok(t) => t,
                    Err(s) => return s,
                };
                let scores = score_candidates(&m.spec, &m.plan, &m.params, b, &[&x]);
                *out_score = scores[0].as_f64();
            }
            AnyPupil::F64(m, b) => {
                let x = match image_from_raw::<f64>(candidate, h, w, c, Some(m.spec.input)) {
                    Ok(t) => t,
                    Err(s) => return s,
                };
                let scores = score_candidates(&m.spec, &m.plan, &m.params, b, &[&x]);
                *out_score = scores[0].as_f64();
            }
        }
        LearnetStatus::Ok
    })
}

/// Index of the best-scoring candidate among `count` images laid out
/// consecutively (each `h*w*c` doubles). Ties break to the lowest index.
///
/// # Safety
/// `candidates` must hold `count*h*w*c` doubles.
#[no_mangle]
pub unsafe extern "C" fn learnet_pupil_best_match(
    pupil: *const LearnetPupil,
    candidates: *const f64,
    count: usize,
    h: usize,
    w: usize,
    c: usize,
    out_index: *mut usize,
) -> LearnetStatus {
    guard(|| {
        let Some(pupil) = pupil.as_ref() else {
            set_error("pupil is NULL");
            return LearnetStatus::NullArgument;
        };
        if out_index.is_null() || candidates.is_null() {
            set_error("pointer argument is NULL");
            return LearnetStatus::NullArgument;
        }
        if count == 0 {
            set_error("need at least one candidate");
            return LearnetStatus::ShapeMismatch;
        }
        match &pupil.inner {
            AnyPupil::F32(m, b) => best_match(m, b, candidates, count, h, w, c, out_index),
            AnyPupil::F64(m, b) => best_match(m, b, candidates, count, h, w, c, out_index),
        }
    })
}

#[allow(clippy::too_many_arguments)]
unsafe fn best_match<F: Scalar>(
    m: &ModelImpl<F>,
    binding: &Binding<F>,
    candidates: *const f64,
    count: usize,
    h: usize,
    w: usize,
    c: usize,
    out_index: *mut usize,
) -> LearnetStatus {
    if [h, w, c] != m.spec.input {
        set_error(&format!(
            "candidates are {h}x{w}x{c} but the model expects {}x{}x{}",
            m.spec.input[0], m.spec.input[1], m.spec.input[2]
        ));
        return LearnetStatus::ShapeMismatch;
    }
    let per = h * w * c;
    let raw = std::slice::from_raw_parts(candidates, count * per);
    let tensors: Vec<Tensor<F>> = raw
        .chunks_exact(per)
        .map(|chunk| Tensor::new(vec![h, w, c], chunk.iter().map(|&v| F::from_f64(v)).collect()))
        .collect();
    let refs: Vec<&Tensor<F>> = tensors.iter().collect();
    let scores = score_candidates(&m.spec, &m.plan, &m.params, binding, &refs);
    *out_index = argmax_scores(&scores);
    LearnetStatus::Ok
}

/// Dimensions of the score map a `search_h x search_w` input would produce
/// (dot-product models only).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn learnet_model_map_dims(
    model: *const LearnetModel,
    search_h: usize,
    search_w: usize,
    out_mh: *mut usize,
    out_mw: *mut usize,
) -> LearnetStatus {
    guard(|| {
        let Some(model) = model.as_ref() else {
            set_error("model is NULL");
            return LearnetStatus::NullArgument;
        };
        if out_mh.is_null() || out_mw.is_null() {
            set_error("output pointer is NULL");
            return LearnetStatus::NullArgument;
        }
        let (spec, c) = match &model.inner {
            AnyModel::F32(m) => (&m.spec, m.spec.input[2]),
            AnyModel::F64(m) => (&m.spec, m.spec.input[2]),
        };
        match spec.map_dims(&[search_h, search_w, c]) {
            Ok((mh, mw)) => {
                *out_mh = mh;
                *out_mw = mw;
                LearnetStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_for(&e)
            }
        }
    })
}

/// Cross-correlate the bound exemplar over a larger search image, writing
/// the `mh x mw` score map into `out_map` (row-major; capacity `map_cap`).
/// Requires the dot-product comparison.
///
/// # Safety
/// `search` must hold `h*w*c` doubles and `out_map` at least `map_cap`.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn learnet_pupil_score_map(
    pupil: *const LearnetPupil,
    search: *const f64,
    h: usize,
    w: usize,
    c: usize,
    out_map: *mut f64,
    map_cap: usize,
    out_mh: *mut usize,
    out_mw: *mut usize,
) -> LearnetStatus {
    guard(|| {
        let Some(pupil) = pupil.as_ref() else {
            set_error("pupil is NULL");
            return LearnetStatus::NullArgument;
        };
        if out_map.is_null() || out_mh.is_null() || out_mw.is_null() {
            set_error("output pointer is NULL");
            return LearnetStatus::NullArgument;
        }
        match &pupil.inner {
            AnyPupil::F32(m, b) => pupil_map(m, b, search, h, w, c, out_map, map_cap, out_mh, out_mw),
            AnyPupil::F64(m, b) => pupil_map(m, b, search, h, w, c, out_map, map_cap, out_mh, out_mw),
        }
    })
}

#[allow(clippy::too_many_arguments)]
unsafe fn pupil_map<F: Scalar>(
    m: &ModelImpl<F>,
    binding: &Binding<F>,
    search: *const f64,
    h: usize,
    w: usize,
    c: usize,
    out_map: *mut f64,
    map_cap: usize,
    out_mh: *mut usize,
    out_mw: *mut usize,
) -> LearnetStatus {
    if m.spec.comparison != learnet::networks::ComparisonKind::Dot {
        set_error("score maps need the dot-product comparison");
        return LearnetStatus::Unsupported;
    }
    let x = match image_from_raw::<F>(search, h, w, c, None) {
        Ok(t) => t,
        Err(s) => return s,
    };
    if c != m.spec.input[2] {
        set_error(&format!("search image has {c} channels, model expects {}", m.spec.input[2]));
        return LearnetStatus::ShapeMismatch;
    }
    if let Err(e) = m.spec.map_dims(&[h, w, c]) {
        set_error(&e.to_string());
        return status_for(&e);
    }
    let map = score_map(&m.spec, &m.plan, &m.params, binding, &x);
    let (mh, mw) = (map.shape()[0], map.shape()[1]);
    if map_cap < mh * mw {
        set_error(&format!("map buffer holds {map_cap} values, need {}", mh * mw));
        return LearnetStatus::ShapeMismatch;
    }
    let out = std::slice::from_raw_parts_mut(out_map, mh * mw);
    for (o, v) in out.iter_mut().zip(map.data()) {
        *o = v.as_f64();
    }
    *out_mh = mh;
    *out_mw = mw;
    LearnetStatus::Ok
}

/// Release a pupil handle (NULL is a no-op).
///
/// # Safety
/// `pupil` must come from [`learnet_bind_exemplar`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn learnet_pupil_free(pupil: *mut LearnetPupil) {
    if !pupil.is_null() {
        drop(Box::from_raw(pupil));
    }
}

// `ptr` is pulled in for the generated header's benefit only.
#[doc(hidden)]
pub fn _unused() {
    let _ = ptr::null::<u8>();
}
