//! C interface to varsig.
//!
//! Every function returns a [`VarsigStatus`]; on failure the message is
//! available from [`varsig_last_error`] on the same thread. Objects are
//! opaque handles created by `*_new`/`*_load`/`*_read` and released with
//! the matching `*_free`. Panics are caught and reported as
//! [`VarsigStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;

use varsig::error::Error;
use varsig::metrics::{fidelity, psnr, PsnrFormula};
use varsig::model::Model;
use varsig::physics::PhysicsConfig;
use varsig::tensor_file::{self, TensorData};
use varsig::types::ForwardModel;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarsigStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Format = 4,
    Domain = 5,
    Config = 6,
    SystemMismatch = 7,
    Unsupported = 8,
    State = 9,
    NonFiniteLoss = 10,
    MissingFile = 11,
    Io = 12,
    Panic = 13,
}

/// PSNR variants: `10 log10(max / MSE)` or `10 log10(max^2 / MSE)`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarsigPsnrFormula {
    Linear = 0,
    Standard = 1,
}

impl From<VarsigPsnrFormula> for PsnrFormula {
    fn from(f: VarsigPsnrFormula) -> Self {
        match f {
            VarsigPsnrFormula::Linear => PsnrFormula::Linear,
            VarsigPsnrFormula::Standard => PsnrFormula::Standard,
        }
    }
}

/// A forward model built from a JSON physics configuration.
pub struct VarsigForwardModel {
    inner: Arc<dyn ForwardModel>,
}

/// A trained model loaded from an artifact directory.
pub struct VarsigModel {
    inner: Model,
}

/// An in-memory tensor read from a tensor file.
pub struct VarsigTensor {
    inner: TensorData,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> VarsigStatus {
    match e.kind() {
        "shape" => VarsigStatus::Shape,
        "format" | "json" => VarsigStatus::Format,
        "domain" | "alignment_undefined" => VarsigStatus::Domain,
        "config" => VarsigStatus::Config,
        "system_mismatch" => VarsigStatus::SystemMismatch,
        "unsupported" => VarsigStatus::Unsupported,
        "state" => VarsigStatus::State,
        "non_finite_loss" => VarsigStatus::NonFiniteLoss,
        "missing_file" => VarsigStatus::MissingFile,
        _ => VarsigStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> VarsigStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            VarsigStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(&format!("null pointer: {what}"));
            VarsigStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(&msg);
            VarsigStatus::InvalidArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            VarsigStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Arg(format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, what: &'static str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn write_out<T>(p: *mut T, v: T, what: &'static str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    p.write(v);
    Ok(())
}

fn check_len(got: usize, want: usize, what: &str) -> Result<(), Fail> {
    if got != want {
        return Err(Fail::Lib(Error::Shape(format!("{what} has length {got}, expected {want}"))));
    }
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn varsig_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn varsig_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a forward model from a JSON physics configuration such as
/// `{"system": "hologram", "n": 64}`.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn varsig_forward_model_new(
    config_json: *const c_char,
    out: *mut *mut VarsigForwardModel,
) -> VarsigStatus {
    guard(|| {
        let json = str_arg(config_json, "config_json")?;
        let cfg: PhysicsConfig = serde_json::from_str(json).map_err(|e| Fail::Lib(Error::Config(e.to_string())))?;
        let inner = cfg.build()?;
        write_out(out, Box::into_raw(Box::new(VarsigForwardModel { inner })), "out")
    })
}

/// # Safety
/// `model` must be null or a handle from [`varsig_forward_model_new`].
#[no_mangle]
pub unsafe extern "C" fn varsig_forward_model_free(model: *mut VarsigForwardModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `signal_len` and `measurement_len` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn varsig_forward_model_lengths(
    model: *const VarsigForwardModel,
    signal_len: *mut usize,
    measurement_len: *mut usize,
) -> VarsigStatus {
    guard(|| {
        let m = handle(model, "model")?;
        write_out(signal_len, m.inner.signal_len(), "signal_len")?;
        write_out(measurement_len, m.inner.measurement_len(), "measurement_len")
    })
}

/// Computes `g = A(f)`.
///
/// # Safety
/// `f` must hold `f_len` doubles and `g` room for `g_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn varsig_forward_model_apply(
    model: *const VarsigForwardModel,
    f: *const f64,
    f_len: usize,
    g: *mut f64,
    g_len: usize,
) -> VarsigStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let f = slice_arg(f, f_len, "f")?;
        let g = out_slice(g, g_len, "g")?;
        check_len(g_len, m.inner.measurement_len(), "g")?;
        g.copy_from_slice(&m.inner.apply_flat(f)?);
        Ok(())
    })
}

/// Loads a trained model from an artifact directory.
///
/// # Safety
/// `dir` must be a NUL-terminated path and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn varsig_model_load(dir: *const c_char, out: *mut *mut VarsigModel) -> VarsigStatus {
    guard(|| {
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        let inner = varsig::artifact::load_model(&dir)?;
        write_out(out, Box::into_raw(Box::new(VarsigModel { inner })), "out")
    })
}

/// # Safety
/// `model` must be null or a handle from [`varsig_model_load`].
#[no_mangle]
pub unsafe extern "C" fn varsig_model_free(model: *mut VarsigModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `signal_len` and `measurement_len` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn varsig_model_lengths(
    model: *const VarsigModel,
    signal_len: *mut usize,
    measurement_len: *mut usize,
) -> VarsigStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let fm = m.inner.forward_model();
        write_out(signal_len, fm.signal_len(), "signal_len")?;
        write_out(measurement_len, fm.measurement_len(), "measurement_len")
    })
}

/// Writes `instances` reconstructions of `g`, back to back, into `out`
/// (`instances * signal_len` doubles). Point-estimate models repeat their
/// single estimate.
///
/// # Safety
/// `g` must hold `g_len` doubles and `out` room for `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn varsig_model_retrieve(
    model: *const VarsigModel,
    g: *const f64,
    g_len: usize,
    instances: usize,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> VarsigStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let g = slice_arg(g, g_len, "g")?;
        let out = out_slice(out, out_len, "out")?;
        let n = m.inner.forward_model().signal_len();
        check_len(out_len, instances * n, "out")?;
        for (k, f) in m.inner.reconstruct(g, instances, seed)?.iter().enumerate() {
            out[k * n..(k + 1) * n].copy_from_slice(f.as_flat());
        }
        Ok(())
    })
}

/// Reads a tensor file (f32 values are widened to f64).
///
/// # Safety
/// `path` must be a NUL-terminated path and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn varsig_tensor_read(path: *const c_char, out: *mut *mut VarsigTensor) -> VarsigStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let inner = tensor_file::read(path)?;
        write_out(out, Box::into_raw(Box::new(VarsigTensor { inner })), "out")
    })
}

/// # Safety
/// `tensor` must be null or a handle from [`varsig_tensor_read`].
#[no_mangle]
pub unsafe extern "C" fn varsig_tensor_free(tensor: *mut VarsigTensor) {
    if !tensor.is_null() {
        drop(Box::from_raw(tensor));
    }
}

/// Rank and element count of a tensor.
///
/// # Safety
/// `tensor` must be a live handle; `rank` and `len` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn varsig_tensor_info(tensor: *const VarsigTensor, rank: *mut usize, len: *mut usize) -> VarsigStatus {
    guard(|| {
        let t = handle(tensor, "tensor")?;
        write_out(rank, t.inner.dims.len(), "rank")?;
        write_out(len, t.inner.data.len(), "len")
    })
}

/// Copies the dimensions (`dims_len` must equal the rank) and values
/// (`data_len` must equal the element count).
///
/// # Safety
/// `dims` must have room for `dims_len` entries and `data` for `data_len`.
#[no_mangle]
pub unsafe extern "C" fn varsig_tensor_copy(
    tensor: *const VarsigTensor,
    dims: *mut usize,
    dims_len: usize,
    data: *mut f64,
    data_len: usize,
) -> VarsigStatus {
    guard(|| {
        let t = handle(tensor, "tensor")?;
        check_len(dims_len, t.inner.dims.len(), "dims")?;
        check_len(data_len, t.inner.data.len(), "data")?;
        if dims.is_null() {
            return Err(Fail::Null("dims"));
        }
        std::slice::from_raw_parts_mut(dims, dims_len).copy_from_slice(&t.inner.dims);
        out_slice(data, data_len, "data")?.copy_from_slice(&t.inner.data);
        Ok(())
    })
}

/// Writes an f64 tensor file.
///
/// # Safety
/// `path` must be NUL-terminated, `dims` hold `rank` entries and `data` `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn varsig_tensor_write(
    path: *const c_char,
    dims: *const usize,
    rank: usize,
    data: *const f64,
    len: usize,
) -> VarsigStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if dims.is_null() {
            return Err(Fail::Null("dims"));
        }
        let dims = std::slice::from_raw_parts(dims, rank);
        let data = slice_arg(data, len, "data")?;
        tensor_file::write_f64(path, dims, data)?;
        Ok(())
    })
}

/// PSNR in dB of `f_hat` against `f_true` (99 for an exact match).
///
/// # Safety
/// Both arrays must hold `len` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn varsig_psnr(
    f_hat: *const f64,
    f_true: *const f64,
    len: usize,
    formula: VarsigPsnrFormula,
    out: *mut f64,
) -> VarsigStatus {
    guard(|| {
        let a = slice_arg(f_hat, len, "f_hat")?;
        let b = slice_arg(f_true, len, "f_true")?;
        write_out(out, psnr(a, b, formula.into())?, "out")
    })
}

/// PSNR in dB between `A(f_hat)` and the measurement `g`.
///
/// # Safety
/// `f_hat` must hold `f_len` doubles, `g` `g_len` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn varsig_fidelity(
    model: *const VarsigForwardModel,
    f_hat: *const f64,
    f_len: usize,
    g: *const f64,
    g_len: usize,
    formula: VarsigPsnrFormula,
    out: *mut f64,
) -> VarsigStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let f = slice_arg(f_hat, f_len, "f_hat")?;
        let g = slice_arg(g, g_len, "g")?;
        write_out(out, fidelity(f, g, m.inner.as_ref(), formula.into())?, "out")
    })
}
