//! C interface to `blurret`.
//!
//! Every fallible function returns a [`BlurretStatus`]; on failure the
//! message is available from [`blurret_last_error`] on the same thread.
//! Models and descriptor stores are opaque handles released with their
//! `_free` function. Images are planar RGB `double`s in `[0, 1]`, laid out
//! as 3 × height × width.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use blurret::blur_synth::{blur_level, blur_severity};
use blurret::model::{Checkpoint, Model};
use blurret::raster::Grid;
use blurret::retrieval::{Cutoff, DescriptorStore};
use blurret::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlurretStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Domain = 4,
    EmptyErodedMask = 5,
    EmptyIndex = 6,
    DegenerateDescriptor = 7,
    Io = 8,
    Format = 9,
    Panic = 10,
    Other = 11,
}

impl From<&Error> for BlurretStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::ShapeMismatch(_) => BlurretStatus::ShapeMismatch,
            Error::Domain(_) => BlurretStatus::Domain,
            Error::EmptyErodedMask | Error::EmptyAlpha => BlurretStatus::EmptyErodedMask,
            Error::EmptyIndex => BlurretStatus::EmptyIndex,
            Error::DegenerateDescriptor(_) => BlurretStatus::DegenerateDescriptor,
            Error::Io { .. } | Error::Image { .. } => BlurretStatus::Io,
            Error::Format { .. } | Error::Json(_) => BlurretStatus::Format,
            Error::InvalidParameter(_) | Error::Config(_) | Error::OutOfBounds { .. } => {
                BlurretStatus::InvalidArgument
            }
            _ => BlurretStatus::Other,
        }
    }
}

/// A trained descriptor network.
pub struct BlurretModel(Model);

/// Unit descriptors with ids, object ids and blur levels.
pub struct BlurretStore(DescriptorStore);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(BlurretStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(BlurretStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(BlurretStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(BlurretStatus::InvalidArgument, msg.into())
}

/// Runs `f`, records its error and converts panics.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> BlurretStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            BlurretStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal error: {msg}"));
            BlurretStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn to_path(ptr: *const c_char) -> Result<PathBuf, Failure> {
    if ptr.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(ptr).to_str().map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn out<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn blurret_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn blurret_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Blur severity of a row-major `height × width` alpha mask.
///
/// # Safety
/// `alpha` must point to `height * width` doubles and `out_bs` to one.
#[no_mangle]
pub unsafe extern "C" fn blurret_blur_severity(
    alpha: *const f64,
    height: usize,
    width: usize,
    erosion_radius: usize,
    out_bs: *mut f64,
) -> BlurretStatus {
    guard(|| {
        let n = height.checked_mul(width).ok_or_else(|| invalid("mask size overflows"))?;
        if n == 0 {
            return Err(invalid("mask must be non-empty"));
        }
        let data = slice(alpha, n, "alpha")?.to_vec();
        let out_bs = out(out_bs, "out_bs")?;
        *out_bs = blur_severity(&Grid { height, width, data }, erosion_radius)?;
        Ok(())
    })
}

/// Blur level `max(1, ceil(10 * bs))` for `bs` in `[0, 1)`.
///
/// # Safety
/// `out_level` must point to one byte.
#[no_mangle]
pub unsafe extern "C" fn blurret_blur_level(bs: f64, out_level: *mut u8) -> BlurretStatus {
    guard(|| {
        let out_level = out(out_level, "out_level")?;
        *out_level = blur_level(bs)?;
        Ok(())
    })
}

/// Loads a model checkpoint written by `blurret train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out_model` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn blurret_model_load(path: *const c_char, out_model: *mut *mut BlurretModel) -> BlurretStatus {
    guard(|| {
        let out_model = out(out_model, "out_model")?;
        let ck = Checkpoint::load(&to_path(path)?)?;
        *out_model = Box::into_raw(Box::new(BlurretModel(ck.model)));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`blurret_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn blurret_model_free(model: *mut BlurretModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Descriptor dimension of the model, 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn blurret_model_descriptor_dim(model: *const BlurretModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.descriptor_dim())
}

/// Unit-norm descriptor of one planar RGB image into `out_descriptor`,
/// which must hold exactly the model's descriptor dimension.
///
/// # Safety
/// `image` must point to `3 * height * width` doubles and `out_descriptor`
/// to `descriptor_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn blurret_model_embed(
    model: *const BlurretModel,
    image: *const f64,
    height: usize,
    width: usize,
    out_descriptor: *mut f64,
    descriptor_len: usize,
) -> BlurretStatus {
    guard(|| {
        let model = &model.as_ref().ok_or_else(|| null("model"))?.0;
        let n = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(3))
            .ok_or_else(|| invalid("image size overflows"))?;
        let image = slice(image, n, "image")?;
        if descriptor_len != model.descriptor_dim() {
            return Err(Failure(
                BlurretStatus::ShapeMismatch,
                format!("output holds {descriptor_len} values, descriptor has {}", model.descriptor_dim()),
            ));
        }
        if out_descriptor.is_null() {
            return Err(null("out_descriptor"));
        }
        let d = model.embed(image, height, width)?;
        std::slice::from_raw_parts_mut(out_descriptor, descriptor_len).copy_from_slice(&d);
        Ok(())
    })
}

/// Creates an empty store for descriptors of dimension `dim`.
///
/// # Safety
/// `out_store` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn blurret_store_new(dim: usize, out_store: *mut *mut BlurretStore) -> BlurretStatus {
    guard(|| {
        let out_store = out(out_store, "out_store")?;
        if dim == 0 {
            return Err(invalid("dimension must be positive"));
        }
        *out_store = Box::into_raw(Box::new(BlurretStore(DescriptorStore::new(dim))));
        Ok(())
    })
}

/// Reads a descriptor file written by `blurret embed`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out_store` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn blurret_store_load(path: *const c_char, out_store: *mut *mut BlurretStore) -> BlurretStatus {
    guard(|| {
        let out_store = out(out_store, "out_store")?;
        let store = DescriptorStore::read(&to_path(path)?)?;
        *out_store = Box::into_raw(Box::new(BlurretStore(store)));
        Ok(())
    })
}

/// Writes the store in the `blurret embed` format.
///
/// # Safety
/// `store` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn blurret_store_save(store: *const BlurretStore, path: *const c_char) -> BlurretStatus {
    guard(|| {
        let store = &store.as_ref().ok_or_else(|| null("store"))?.0;
        store.write(&to_path(path)?)?;
        Ok(())
    })
}

/// Releases a store; null is ignored.
///
/// # Safety
/// `store` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn blurret_store_free(store: *mut BlurretStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Number of descriptors, 0 for null.
///
/// # Safety
/// `store` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn blurret_store_len(store: *const BlurretStore) -> usize {
    store.as_ref().map_or(0, |s| s.0.len())
}

/// Descriptor dimension, 0 for null.
///
/// # Safety
/// `store` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn blurret_store_dim(store: *const BlurretStore) -> usize {
    store.as_ref().map_or(0, |s| s.0.dim())
}

/// Adds a unit-norm descriptor (within 1e-6) under a new `id`.
///
/// # Safety
/// `store` must be a live handle and `descriptor` point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn blurret_store_push(
    store: *mut BlurretStore,
    id: u64,
    object_id: u64,
    blur_level: u8,
    descriptor: *const f64,
    len: usize,
) -> BlurretStatus {
    guard(|| {
        let store = &mut store.as_mut().ok_or_else(|| null("store"))?.0;
        let d = slice(descriptor, len, "descriptor")?;
        store.push(id, object_id, blur_level, d)?;
        Ok(())
    })
}

/// Exact top-`k` search by inner product, ties broken by ascending id.
/// Writes up to `k` ids and scores and the number written to `out_count`.
///
/// # Safety
/// `query` must point to `len` doubles; `out_ids` and `out_scores` to `k`
/// elements each; `out_count` to one.
#[no_mangle]
pub unsafe extern "C" fn blurret_store_search(
    store: *const BlurretStore,
    query: *const f64,
    len: usize,
    k: usize,
    out_ids: *mut u64,
    out_scores: *mut f64,
    out_count: *mut usize,
) -> BlurretStatus {
    guard(|| {
        let store = &store.as_ref().ok_or_else(|| null("store"))?.0;
        let q = slice(query, len, "query")?;
        let out_count = out(out_count, "out_count")?;
        if k > 0 && (out_ids.is_null() || out_scores.is_null()) {
            return Err(null("output buffer"));
        }
        let hits = store.search(q, Cutoff::At(k))?;
        for (i, (id, score)) in hits.iter().enumerate() {
            *out_ids.add(i) = *id;
            *out_scores.add(i) = *score;
        }
        *out_count = hits.len();
        Ok(())
    })
}
