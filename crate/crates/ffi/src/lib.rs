//! C interface to the varfa toolkit.
//!
//! Objects cross the boundary as opaque handles that the caller releases
//! with the matching `*_free` function. Every fallible call returns a
//! [`VarfaStatus`]; on failure the message is available from
//! [`varfa_last_error_message`] on the same thread. Training options are
//! passed as a TOML document in the same format as the command-line
//! configuration file.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ndarray::Array2;
use varfa::cli::{fit, load_checkpoint, load_dataset, save_checkpoint, test_metrics, Checkpoint, ExperimentConfig};
use varfa::data::{split, ResponseDataset, SplitMask};
use varfa::error::{Error, ErrorCategory};
use varfa::model::sigmoid;
use varfa::vi::infer_posterior;

/// Status code returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarfaStatus {
    Ok = 0,
    /// Invalid configuration or parameter.
    Config = 2,
    /// Malformed or corrupted data.
    Data = 3,
    /// Non-finite values or undefined metrics.
    Numeric = 4,
    /// File system failure.
    Io = 5,
    /// A required pointer argument was null.
    NullArgument = 10,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 11,
    /// A student or question index was out of range.
    OutOfRange = 12,
    /// The operation is not available for this model kind.
    Unsupported = 13,
    /// An internal panic was caught at the boundary.
    Internal = 14,
}

/// Test-set metrics of a model.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct VarfaMetrics {
    pub accuracy: f64,
    pub auc: f64,
    pub f1: f64,
    pub n_test: usize,
    pub wall_train_seconds: f64,
}

/// Packed response matrix.
pub struct VarfaDataset(ResponseDataset);

/// Train/test partition of a dataset's observed entries.
pub struct VarfaSplit(SplitMask);

/// Trained model, either point-estimate or variational.
pub struct VarfaModel(Checkpoint);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(VarfaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.category() {
            ErrorCategory::Config => VarfaStatus::Config,
            ErrorCategory::Data => VarfaStatus::Data,
            ErrorCategory::Numeric => VarfaStatus::Numeric,
            ErrorCategory::Io => VarfaStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

type FfiResult<T> = Result<T, Failure>;

fn guard(body: impl FnOnce() -> FfiResult<()>) -> VarfaStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => VarfaStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            VarfaStatus::Internal
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, name: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| Failure(VarfaStatus::NullArgument, format!("`{name}` is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, name: &str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or_else(|| Failure(VarfaStatus::NullArgument, format!("`{name}` is null")))
}

unsafe fn string<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(Failure(VarfaStatus::NullArgument, format!("`{name}` is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(VarfaStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

unsafe fn config(toml: *const c_char) -> FfiResult<ExperimentConfig> {
    let doc = if toml.is_null() { None } else { Some(string(toml, "config_toml")?) };
    Ok(ExperimentConfig::layered(ExperimentConfig::default(), doc, &[])?)
}

fn check_index(value: usize, bound: usize, what: &str) -> FfiResult<()> {
    if value < bound {
        Ok(())
    } else {
        Err(Failure(VarfaStatus::OutOfRange, format!("{what} index {value} out of range (< {bound})")))
    }
}

/// Ability vector of student `i`: the posterior mean in variational mode.
fn ability(model: &Checkpoint, ds: &ResponseDataset, sp: &SplitMask, i: usize) -> FfiResult<Vec<f64>> {
    check_index(i, ds.n_students(), "student")?;
    match &model.encoder {
        Some(enc) => Ok(infer_posterior(enc, ds, sp, i)?.mean),
        None => {
            check_index(i, model.factors.c.ncols(), "student")?;
            Ok(model.factors.c.column(i).to_vec())
        }
    }
}

fn check_split(ds: &ResponseDataset, sp: &SplitMask) -> FfiResult<()> {
    if sp.train.dim() != (ds.n_students(), ds.n_questions()) {
        return Err(Error::Shape("split does not match dataset".into()).into());
    }
    Ok(())
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn varfa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or null if none.
///
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn varfa_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads the dataset described by the `[data]` table of a TOML document.
///
/// # Safety
/// `config_toml` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn varfa_dataset_load(config_toml: *const c_char, out: *mut *mut VarfaDataset) -> VarfaStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let doc = string(config_toml, "config_toml")?;
        let c = ExperimentConfig::layered(ExperimentConfig::default(), Some(doc), &[])?;
        *out = Box::into_raw(Box::new(VarfaDataset(load_dataset(&c)?)));
        Ok(())
    })
}

/// Builds a dataset from row-major `n_students x n_questions` arrays.
/// `observed[k] != 0` marks an observed entry whose `values[k]` must be 0 or 1.
///
/// # Safety
/// `values` and `observed` must point to `n_students * n_questions` elements.
#[no_mangle]
pub unsafe extern "C" fn varfa_dataset_from_dense(
    values: *const f64,
    observed: *const u8,
    n_students: usize,
    n_questions: usize,
    out: *mut *mut VarfaDataset,
) -> VarfaStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        borrow(values, "values")?;
        borrow(observed, "observed")?;
        let len = n_students
            .checked_mul(n_questions)
            .ok_or_else(|| Failure(VarfaStatus::Config, "matrix size overflows".into()))?;
        let v = std::slice::from_raw_parts(values, len).to_vec();
        let m = std::slice::from_raw_parts(observed, len).iter().map(|&b| b != 0).collect();
        let shape = (n_students, n_questions);
        let v = Array2::from_shape_vec(shape, v).map_err(|e| Error::Shape(e.to_string()))?;
        let m = Array2::from_shape_vec(shape, m).map_err(|e| Error::Shape(e.to_string()))?;
        *out = Box::into_raw(Box::new(VarfaDataset(ResponseDataset::from_dense(v, m)?)));
        Ok(())
    })
}

/// # Safety
/// `dataset` must be null or a handle from this library that is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn varfa_dataset_free(dataset: *mut VarfaDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of students, or 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn varfa_dataset_n_students(dataset: *const VarfaDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.n_students())
}

/// Number of questions, or 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn varfa_dataset_n_questions(dataset: *const VarfaDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.n_questions())
}

/// Row index of a student id.
///
/// # Safety
/// `dataset` must be a live handle, `student_id` a nul-terminated string and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn varfa_dataset_student_index(
    dataset: *const VarfaDataset,
    student_id: *const c_char,
    out: *mut usize,
) -> VarfaStatus {
    guard(|| {
        let ds = &borrow(dataset, "dataset")?.0;
        let id = string(student_id, "student_id")?;
        let out = out_ptr(out, "out")?;
        *out = ds
            .students()
            .index(id)
            .ok_or_else(|| Failure(VarfaStatus::OutOfRange, format!("unknown student id `{id}`")))?;
        Ok(())
    })
}

/// Splits the observed entries, keeping `train_fraction` of each student's row for training.
///
/// # Safety
/// `dataset` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn varfa_split_new(
    dataset: *const VarfaDataset,
    train_fraction: f64,
    seed: u64,
    out: *mut *mut VarfaSplit,
) -> VarfaStatus {
    guard(|| {
        let ds = &borrow(dataset, "dataset")?.0;
        let out = out_ptr(out, "out")?;
        *out = Box::into_raw(Box::new(VarfaSplit(split(ds, train_fraction, seed)?)));
        Ok(())
    })
}

/// # Safety
/// `split` must be null or a handle from this library that is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn varfa_split_free(split: *mut VarfaSplit) {
    if !split.is_null() {
        drop(Box::from_raw(split));
    }
}

/// Number of training entries, or 0 for a null handle.
///
/// # Safety
/// `split` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn varfa_split_n_train(split: *const VarfaSplit) -> usize {
    split.as_ref().map_or(0, |s| s.0.n_train())
}

/// Number of test entries, or 0 for a null handle.
///
/// # Safety
/// `split` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn varfa_split_n_test(split: *const VarfaSplit) -> usize {
    split.as_ref().map_or(0, |s| s.0.n_test())
}

/// Trains on the training entries. `config_toml` may be null for defaults;
/// its `mode`, `hyper` and `train` tables apply.
///
/// # Safety
/// Handles must be live, `config_toml` null or nul-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn varfa_model_train(
    dataset: *const VarfaDataset,
    split: *const VarfaSplit,
    config_toml: *const c_char,
    out: *mut *mut VarfaModel,
) -> VarfaStatus {
    guard(|| {
        let ds = &borrow(dataset, "dataset")?.0;
        let sp = &borrow(split, "split")?.0;
        let out = out_ptr(out, "out")?;
        check_split(ds, sp)?;
        let c = config(config_toml)?;
        *out = Box::into_raw(Box::new(VarfaModel(fit(&c, ds, sp)?.checkpoint)));
        Ok(())
    })
}

/// # Safety
/// `path` must be nul-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn varfa_model_load(path: *const c_char, out: *mut *mut VarfaModel) -> VarfaStatus {
    guard(|| {
        let path = string(path, "path")?;
        let out = out_ptr(out, "out")?;
        *out = Box::into_raw(Box::new(VarfaModel(load_checkpoint(Path::new(path))?)));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `path` nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn varfa_model_save(model: *const VarfaModel, path: *const c_char) -> VarfaStatus {
    guard(|| {
        let model = &borrow(model, "model")?.0;
        save_checkpoint(model, Path::new(string(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library that is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn varfa_model_free(model: *mut VarfaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Latent dimension, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn varfa_model_latent_dim(model: *const VarfaModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.hyper.k)
}

/// 1 for a variational model, 0 for a point-estimate model or a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn varfa_model_is_variational(model: *const VarfaModel) -> i32 {
    model.as_ref().map_or(0, |m| m.0.encoder.is_some() as i32)
}

/// Probability that `student` answers `question` correctly. Variational
/// models plug in the posterior mean computed from the training entries.
///
/// # Safety
/// Handles must be live and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn varfa_model_predict(
    model: *const VarfaModel,
    dataset: *const VarfaDataset,
    split: *const VarfaSplit,
    student: usize,
    question: usize,
    out: *mut f64,
) -> VarfaStatus {
    guard(|| {
        let model = &borrow(model, "model")?.0;
        let ds = &borrow(dataset, "dataset")?.0;
        let sp = &borrow(split, "split")?.0;
        let out = out_ptr(out, "out")?;
        check_split(ds, sp)?;
        check_index(question, model.factors.m.ncols(), "question")?;
        let c = ability(model, ds, sp, student)?;
        let m = model.factors.m.column(question);
        let z: f64 = c.iter().zip(m.iter()).map(|(a, b)| a * b).sum::<f64>() + model.factors.mu[question];
        *out = sigmoid(z);
        Ok(())
    })
}

/// Ability estimate of a student, written to `out[0..len]` with `len` equal
/// to the latent dimension.
///
/// # Safety
/// Handles must be live and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn varfa_model_ability(
    model: *const VarfaModel,
    dataset: *const VarfaDataset,
    split: *const VarfaSplit,
    student: usize,
    out: *mut f64,
    len: usize,
) -> VarfaStatus {
    guard(|| {
        let model = &borrow(model, "model")?.0;
        let ds = &borrow(dataset, "dataset")?.0;
        let sp = &borrow(split, "split")?.0;
        borrow(out, "out")?;
        check_split(ds, sp)?;
        let c = ability(model, ds, sp, student)?;
        if len != c.len() {
            return Err(Error::Shape(format!("buffer holds {len} values, latent dimension is {}", c.len())).into());
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&c);
        Ok(())
    })
}

/// Posterior mean and standard deviation of a student's ability. Only
/// variational models have a posterior.
///
/// # Safety
/// Handles must be live; `mean` and `std` must each hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn varfa_model_posterior(
    model: *const VarfaModel,
    dataset: *const VarfaDataset,
    split: *const VarfaSplit,
    student: usize,
    mean: *mut f64,
    std: *mut f64,
    len: usize,
) -> VarfaStatus {
    guard(|| {
        let model = &borrow(model, "model")?.0;
        let ds = &borrow(dataset, "dataset")?.0;
        let sp = &borrow(split, "split")?.0;
        borrow(mean, "mean")?;
        borrow(std, "std")?;
        check_split(ds, sp)?;
        let enc = model
            .encoder
            .as_ref()
            .ok_or_else(|| Failure(VarfaStatus::Unsupported, "point-estimate models have no posterior".into()))?;
        check_index(student, ds.n_students(), "student")?;
        let post = infer_posterior(enc, ds, sp, student)?;
        if len != post.k() {
            return Err(Error::Shape(format!("buffers hold {len} values, latent dimension is {}", post.k())).into());
        }
        std::slice::from_raw_parts_mut(mean, len).copy_from_slice(&post.mean);
        std::slice::from_raw_parts_mut(std, len).copy_from_slice(&post.std());
        Ok(())
    })
}

/// Accuracy, AUC and F1 on the split's test entries.
///
/// # Safety
/// Handles must be live and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn varfa_model_evaluate(
    model: *const VarfaModel,
    dataset: *const VarfaDataset,
    split: *const VarfaSplit,
    out: *mut VarfaMetrics,
) -> VarfaStatus {
    guard(|| {
        let model = &borrow(model, "model")?.0;
        let ds = &borrow(dataset, "dataset")?.0;
        let sp = &borrow(split, "split")?.0;
        let out = out_ptr(out, "out")?;
        check_split(ds, sp)?;
        let r = test_metrics(model, ds, sp)?;
        *out = VarfaMetrics {
            accuracy: r.acc,
            auc: r.auc,
            f1: r.f1,
            n_test: r.n_test,
            wall_train_seconds: r.wall_train_seconds,
        };
        Ok(())
    })
}
