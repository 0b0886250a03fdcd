//! C ABI for the stegograph library.
//!
//! Every function returns an [`SgStatus`]; on failure a description is
//! available from [`sg_last_error_message`] on the same thread. Models are
//! opaque [`SgModel`] handles owned by the caller until [`sg_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use stegograph::experiment::{load_model, LoadedModel};
use stegograph::stego::{cost_map, hill_cost, simulate_embedding, Algorithm};
use stegograph::{Error, GrayImage, PatchPlan};

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Shape = 5,
    Numeric = 6,
    Internal = 7,
}

/// Embedding cost models.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgAlgorithm {
    Uniform = 0,
    Hill = 1,
}

/// A trained model loaded from a checkpoint.
pub struct SgModel {
    inner: LoadedModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs were replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SgStatus {
    match e {
        Error::Io(_) | Error::Image { .. } | Error::Manifest(_) => SgStatus::Io,
        Error::Checkpoint(_) => SgStatus::Checkpoint,
        Error::Shape { .. } | Error::ImageTooSmall { .. } | Error::Plan(_) => SgStatus::Shape,
        Error::NonFinite(_) | Error::Unbracketable { .. } => SgStatus::Numeric,
        _ => SgStatus::InvalidArgument,
    }
}

/// Run `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (SgStatus, String)>) -> SgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SgStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SgStatus::Internal
        }
    }
}

fn lib(e: Error) -> (SgStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (SgStatus, String) {
    (SgStatus::NullPointer, format!("{what} is null"))
}

/// Borrow `h * w` pixels as an image.
unsafe fn image_from(pixels: *const u8, height: usize, width: usize) -> Result<GrayImage, (SgStatus, String)> {
    if pixels.is_null() {
        return Err(null("pixels"));
    }
    let len = height
        .checked_mul(width)
        .ok_or((SgStatus::InvalidArgument, "image size overflows".to_string()))?;
    GrayImage::new(height, width, std::slice::from_raw_parts(pixels, len).to_vec()).map_err(lib)
}

/// Message describing the last failure on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a checkpoint manifest; on success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sg_model_load(path: *const c_char, out: *mut *mut SgModel) -> SgStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (SgStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let inner = load_model(Path::new(path)).map_err(lib)?;
        *out = Box::into_raw(Box::new(SgModel { inner }));
        Ok(())
    })
}

/// Release a handle from [`sg_model_load`]. NULL is ignored.
///
/// # Safety
/// `model` must come from [`sg_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sg_model_free(model: *mut SgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Image size the model was trained on.
///
/// # Safety
/// `model` must be a live handle; `height` and `width` writable.
#[no_mangle]
pub unsafe extern "C" fn sg_model_input_size(model: *const SgModel, height: *mut usize, width: *mut usize) -> SgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if height.is_null() || width.is_null() {
            return Err(null("output"));
        }
        *height = m.inner.model.config.image_h;
        *width = m.inner.model.config.image_w;
        Ok(())
    })
}

/// Class probabilities `[cover, stego]` for one image, written to `probs`.
///
/// # Safety
/// `pixels` must hold `height * width` bytes and `probs` two floats.
#[no_mangle]
pub unsafe extern "C" fn sg_model_predict(
    model: *const SgModel,
    pixels: *const u8,
    height: usize,
    width: usize,
    probs: *mut f32,
) -> SgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if probs.is_null() {
            return Err(null("probs"));
        }
        let img = image_from(pixels, height, width)?;
        let p = m.inner.model.predict(&m.inner.store, &[&img]).map_err(lib)?[0];
        std::ptr::copy_nonoverlapping(p.as_ptr(), probs, 2);
        Ok(())
    })
}

/// 1-based `(row, col)` offsets of an `n x m` patch grid, row-major, written
/// as `2 * n * m` values to `offsets` (which holds `capacity` values).
///
/// # Safety
/// `offsets` must hold `capacity` values.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn sg_plan_patches(
    height: usize,
    width: usize,
    patch_h: usize,
    patch_w: usize,
    n: usize,
    m: usize,
    alpha: f64,
    beta: f64,
    offsets: *mut usize,
    capacity: usize,
) -> SgStatus {
    guard(|| {
        if offsets.is_null() {
            return Err(null("offsets"));
        }
        let plan = PatchPlan::new(height, width, patch_h, patch_w, n, m, alpha, beta).map_err(lib)?;
        if capacity < 2 * plan.node_count() {
            return Err((
                SgStatus::InvalidArgument,
                format!("{} values needed, capacity is {capacity}", 2 * plan.node_count()),
            ));
        }
        let out = std::slice::from_raw_parts_mut(offsets, 2 * plan.node_count());
        for (dst, &(r, c)) in out.chunks_mut(2).zip(plan.offsets()) {
            dst[0] = r;
            dst[1] = c;
        }
        Ok(())
    })
}

/// HILL costs of an image, `height * width` doubles in row-major order.
///
/// # Safety
/// `pixels` and `costs` must hold `height * width` elements.
#[no_mangle]
pub unsafe extern "C" fn sg_hill_cost(pixels: *const u8, height: usize, width: usize, costs: *mut f64) -> SgStatus {
    guard(|| {
        if costs.is_null() {
            return Err(null("costs"));
        }
        let img = image_from(pixels, height, width)?;
        let rho = hill_cost(&img).map_err(lib)?;
        std::ptr::copy_nonoverlapping(rho.rho.as_ptr(), costs, rho.rho.len());
        Ok(())
    })
}

/// Simulate embedding `payload_bpp` bits per pixel; writes the stego image
/// and, when `lambda` is non-NULL, the chosen multiplier.
///
/// # Safety
/// `pixels` and `stego` must hold `height * width` bytes.
#[no_mangle]
pub unsafe extern "C" fn sg_simulate_embedding(
    pixels: *const u8,
    height: usize,
    width: usize,
    algorithm: SgAlgorithm,
    payload_bpp: f64,
    seed: u64,
    stego: *mut u8,
    lambda: *mut f64,
) -> SgStatus {
    guard(|| {
        if stego.is_null() {
            return Err(null("stego"));
        }
        let img = image_from(pixels, height, width)?;
        let algo = match algorithm {
            SgAlgorithm::Uniform => Algorithm::Uniform,
            SgAlgorithm::Hill => Algorithm::Hill,
        };
        let rho = cost_map(&img, algo).map_err(lib)?;
        let emb = simulate_embedding(&img, &rho, payload_bpp, seed).map_err(lib)?;
        std::ptr::copy_nonoverlapping(emb.stego.pixels().as_ptr(), stego, emb.stego.pixels().len());
        if !lambda.is_null() {
            *lambda = emb.lambda;
        }
        Ok(())
    })
}
