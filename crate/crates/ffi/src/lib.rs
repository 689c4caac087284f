//! C interface to kaa-cal.
//!
//! Datasets and models are opaque handles created by `kc_*` constructors and
//! released with the matching `*_free`. Every fallible call returns a
//! [`KcStatus`]; on failure [`kc_last_error`] holds a message for the calling
//! thread. Strings are NUL-terminated UTF-8.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use kaa_cal::harness::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, RunState};
use kaa_cal::harness::config::RunConfig;
use kaa_cal::harness::gradcheck::{check_model_gradients, Precision};
use kaa_cal::harness::pipeline::evaluate_split;
use kaa_cal::model::{predict_all, ModelBundle, Role};
use kaa_cal::synthdata::{generate_bundle, load_bundle, save_bundle, DatasetBundle};
use kaa_cal::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KcStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Dimension = 3,
    Numeric = 4,
    Contract = 5,
    Config = 6,
    Budget = 7,
    Consistency = 8,
    NoSignal = 9,
    Lookup = 10,
    Determinism = 11,
    Format = 12,
    Version = 13,
    Io = 14,
    Json = 15,
    Panic = 16,
}

impl KcStatus {
    fn of(e: &Error) -> Self {
        match e.kind() {
            "dimension" => Self::Dimension,
            "numeric" => Self::Numeric,
            "contract" => Self::Contract,
            "config" => Self::Config,
            "budget" => Self::Budget,
            "consistency" => Self::Consistency,
            "no_signal" => Self::NoSignal,
            "lookup" => Self::Lookup,
            "determinism" => Self::Determinism,
            "format" => Self::Format,
            "version" => Self::Version,
            "io" => Self::Io,
            _ => Self::Json,
        }
    }
}

/// Synthetic dataset bundle.
pub struct KcDataset(DatasetBundle);

/// Model bundle (student, teacher and heads) with its run position.
pub struct KcModel(Checkpoint);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(KcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(KcStatus::of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> KcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            KcStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            KcStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(KcStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(KcStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn config(p: *const c_char) -> Result<RunConfig, Fail> {
    if p.is_null() {
        return Ok(RunConfig::default());
    }
    let s = text(p, "config")?;
    let cfg: RunConfig = serde_json::from_str(s).map_err(|e| Fail(KcStatus::Config, format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref()
        .ok_or_else(|| Fail(KcStatus::NullArgument, format!("{what} is null")))
}

fn out_ptr<T>(out: *mut *mut T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail(KcStatus::NullArgument, "output pointer is null".into()));
    }
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn kc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Short stable name of a status code.
#[no_mangle]
pub extern "C" fn kc_status_name(status: KcStatus) -> *const c_char {
    let s: &'static CStr = match status {
        KcStatus::Ok => c"ok",
        KcStatus::NullArgument => c"null_argument",
        KcStatus::InvalidUtf8 => c"invalid_utf8",
        KcStatus::Dimension => c"dimension",
        KcStatus::Numeric => c"numeric",
        KcStatus::Contract => c"contract",
        KcStatus::Config => c"config",
        KcStatus::Budget => c"budget",
        KcStatus::Consistency => c"consistency",
        KcStatus::NoSignal => c"no_signal",
        KcStatus::Lookup => c"lookup",
        KcStatus::Determinism => c"determinism",
        KcStatus::Format => c"format",
        KcStatus::Version => c"version",
        KcStatus::Io => c"io",
        KcStatus::Json => c"json",
        KcStatus::Panic => c"panic",
    };
    s.as_ptr()
}

/// Generates a dataset. `config_json` may be null for defaults.
#[no_mangle]
pub unsafe extern "C" fn kc_dataset_generate(config_json: *const c_char, seed: u64, out: *mut *mut KcDataset) -> KcStatus {
    guard(|| {
        out_ptr(out)?;
        let cfg = config(config_json)?;
        let data = generate_bundle(&cfg.synth, seed)?;
        *out = Box::into_raw(Box::new(KcDataset(data)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn kc_dataset_load(dir: *const c_char, out: *mut *mut KcDataset) -> KcStatus {
    guard(|| {
        out_ptr(out)?;
        let dir = text(dir, "dir")?;
        let data = load_bundle(Path::new(dir))?;
        *out = Box::into_raw(Box::new(KcDataset(data)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn kc_dataset_save(dataset: *const KcDataset, dir: *const c_char) -> KcStatus {
    guard(|| {
        let d = handle(dataset, "dataset")?;
        let dir = Path::new(text(dir, "dir")?);
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_bundle(&d.0, dir)?;
        Ok(())
    })
}

/// Number of examples; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn kc_dataset_len(dataset: *const KcDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.examples.len())
}

/// Values per image (channels × height × width); 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn kc_dataset_image_len(dataset: *const KcDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.config.image_len())
}

#[no_mangle]
pub unsafe extern "C" fn kc_dataset_free(dataset: *mut KcDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Trains a foundation model on `dataset`. `config_json` may be null.
#[no_mangle]
pub unsafe extern "C" fn kc_model_train_kaa(
    dataset: *const KcDataset,
    config_json: *const c_char,
    out: *mut *mut KcModel,
) -> KcStatus {
    guard(|| {
        out_ptr(out)?;
        let d = handle(dataset, "dataset")?;
        let cfg = config(config_json)?;
        let (bundle, history) = kaa_cal::kaa::run_kaa(&d.0, &cfg.kaa)?;
        let ck = Checkpoint {
            bundle,
            run: RunState {
                t: history.cycles.last().map_or(0, |c| c.t),
                i: history.iterations.last().map_or(0, |r| r.i),
                j: 0,
            },
            rng: RngState::from_seed(cfg.kaa.seed),
            config_hash: cfg.hash()?,
        };
        *out = Box::into_raw(Box::new(KcModel(ck)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn kc_model_load(path: *const c_char, out: *mut *mut KcModel) -> KcStatus {
    guard(|| {
        out_ptr(out)?;
        let path = text(path, "path")?;
        let ck = load_checkpoint(Path::new(path), None)?;
        *out = Box::into_raw(Box::new(KcModel(ck)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn kc_model_save(model: *const KcModel, path: *const c_char) -> KcStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let path = text(path, "path")?;
        save_checkpoint(&m.0, Path::new(path))?;
        Ok(())
    })
}

/// Number of task heads; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn kc_model_num_tasks(model: *const KcModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.bundle.num_tasks())
}

fn bundle(m: &KcModel) -> &ModelBundle<f32> {
    &m.0.bundle
}

/// Predicted class per task for one channel-major image of `image_len`
/// values. `labels` must have room for `num_tasks` entries.
#[no_mangle]
pub unsafe extern "C" fn kc_model_predict(
    model: *const KcModel,
    image: *const f32,
    image_len: usize,
    labels: *mut u32,
    num_tasks: usize,
) -> KcStatus {
    guard(|| {
        let m = handle(model, "model")?;
        if image.is_null() || labels.is_null() {
            return Err(Fail(KcStatus::NullArgument, "image or labels is null".into()));
        }
        let b = bundle(m);
        if num_tasks != b.num_tasks() {
            return Err(Fail(
                KcStatus::Dimension,
                format!("labels has room for {num_tasks} tasks, model has {}", b.num_tasks()),
            ));
        }
        let img = std::slice::from_raw_parts(image, image_len);
        let pred = predict_all(&[img], b, Role::Student)?;
        let out = std::slice::from_raw_parts_mut(labels, num_tasks);
        for (m, o) in out.iter_mut().enumerate() {
            *o = pred.argmax(m)[0] as u32;
        }
        Ok(())
    })
}

/// Mean per-task accuracy on `split` (`train`, `val`, `test` or `joint`).
#[no_mangle]
pub unsafe extern "C" fn kc_model_evaluate(
    model: *const KcModel,
    dataset: *const KcDataset,
    split: *const c_char,
    accuracy: *mut f64,
) -> KcStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let d = handle(dataset, "dataset")?;
        let split = text(split, "split")?;
        if accuracy.is_null() {
            return Err(Fail(KcStatus::NullArgument, "accuracy is null".into()));
        }
        let report = evaluate_split(bundle(m), &d.0, split)?;
        *accuracy = report.average.unwrap_or(0.0);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn kc_model_free(model: *mut KcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Gradient check on the toy model. `precision` is 32 or 64. Writes the
/// maximum relative error; returns `KC_STATUS_NUMERIC` when it exceeds the
/// tolerance for that precision.
#[no_mangle]
pub unsafe extern "C" fn kc_grad_check(precision: u32, seed: u64, max_relative_error: *mut f64) -> KcStatus {
    guard(|| {
        if max_relative_error.is_null() {
            return Err(Fail(KcStatus::NullArgument, "max_relative_error is null".into()));
        }
        let p = match precision {
            32 => Precision::F32,
            64 => Precision::F64,
            _ => return Err(Fail(KcStatus::Config, format!("precision {precision} is not 32 or 64"))),
        };
        let r = check_model_gradients(p, seed)?;
        *max_relative_error = r.max_relative_error();
        if !r.passed() {
            return Err(Fail(
                KcStatus::Numeric,
                format!("max relative error {:.3e} above {:.0e}", r.max_relative_error(), r.tolerance),
            ));
        }
        Ok(())
    })
}

/// Library version string.
#[no_mangle]
pub extern "C" fn kc_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => c"unknown",
    };
    VERSION.as_ptr()
}
