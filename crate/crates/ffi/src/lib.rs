//! C ABI for the `defscan` deformable state space model.
//!
//! Every function returns a [`DefscanStatus`]. On failure a description is
//! kept per thread and can be copied out with
//! [`defscan_last_error_message`]. Models are opaque handles created by
//! [`defscan_model_new_preset`] or [`defscan_model_load`] and released with
//! [`defscan_model_free`]. Images are `H × W × 3` row-major `double` arrays.
//! Panics never cross the boundary; they surface as
//! [`DefscanStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use defscan::autodiff::Tape;
use defscan::harness::checkpoint::Checkpoint;
use defscan::model::{Model, ModelConfig, Preset};
use defscan::scan_order::{fixed_order, FixedScanKind};
use defscan::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DefscanStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    BufferTooSmall = 3,
    Dimension = 4,
    Config = 5,
    Input = 6,
    Format = 7,
    NonFinite = 8,
    Diverged = 9,
    Io = 10,
    Panic = 11,
}

/// Opaque model handle.
pub struct DefscanModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Failure(DefscanStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Dimension { .. } => DefscanStatus::Dimension,
            Error::Config(_) => DefscanStatus::Config,
            Error::Input(_) => DefscanStatus::Input,
            Error::Format { .. } => DefscanStatus::Format,
            Error::NonFinite { .. } => DefscanStatus::NonFinite,
            Error::Diverged { .. } => DefscanStatus::Diverged,
            Error::Io { .. } => DefscanStatus::Io,
        };
        Failure(status, format!("{}: {e}", e.code()))
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DefscanStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DefscanStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let what = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("E_PANIC: {what}"));
            DefscanStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(
        DefscanStatus::NullPointer,
        format!("E_NULL: {what} is null"),
    )
}

unsafe fn text<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        Failure(
            DefscanStatus::InvalidUtf8,
            format!("E_UTF8: {what} is not UTF-8"),
        )
    })
}

unsafe fn handle<'a>(model: *const DefscanModel) -> Result<&'a DefscanModel, Failure> {
    model.as_ref().ok_or_else(|| null("model"))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn image(model: &Model, data: *const f64, len: usize) -> Result<Tensor, Failure> {
    if data.is_null() {
        return Err(null("image"));
    }
    let side = model.config().image_size;
    let expected = side * side * 3;
    if len != expected {
        return Err(Failure(
            DefscanStatus::Input,
            format!(
                "E_INPUT: image holds {len} values, model expects {side}x{side}x3 = {expected}"
            ),
        ));
    }
    Ok(Tensor::new(
        &[side, side, 3],
        std::slice::from_raw_parts(data, len).to_vec(),
    )?)
}

/// Copies `values` into `out[..capacity]` and stores the count in `out_len`.
/// With too little room nothing is copied, `out_len` still receives the
/// required count and the call reports `BufferTooSmall`.
unsafe fn copy_indices(
    values: &[usize],
    out: *mut usize,
    capacity: usize,
    out_len: *mut usize,
) -> Result<(), Failure> {
    write_out(out_len, values.len(), "out_len")?;
    if capacity < values.len() {
        return Err(Failure(
            DefscanStatus::BufferTooSmall,
            format!(
                "E_BUFFER: need room for {} indices, got {capacity}",
                values.len()
            ),
        ));
    }
    if out.is_null() {
        return Err(null("order buffer"));
    }
    std::ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

/// Builds a freshly initialized model from a preset name (`nano`, `tiny`,
/// `small` or `base`).
///
/// # Safety
/// `preset` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn defscan_model_new_preset(
    preset: *const c_char,
    seed: u64,
    out: *mut *mut DefscanModel,
) -> DefscanStatus {
    guard(|| {
        let preset: Preset = text(preset, "preset")?.parse()?;
        let model = Model::new(ModelConfig::preset(preset), seed)?;
        write_out(out, Box::into_raw(Box::new(DefscanModel { model })), "out")
    })
}

/// Loads a model from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn defscan_model_load(
    path: *const c_char,
    out: *mut *mut DefscanModel,
) -> DefscanStatus {
    guard(|| {
        let path = text(path, "path")?;
        let (model, _) = Checkpoint::load(Path::new(path))?.to_model()?;
        write_out(out, Box::into_raw(Box::new(DefscanModel { model })), "out")
    })
}

/// Releases a model. Null is accepted and ignored.
///
/// # Safety
/// `model` must be null or a handle from this library that was not freed yet.
#[no_mangle]
pub unsafe extern "C" fn defscan_model_free(model: *mut DefscanModel) {
    if !model.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(model))));
    }
}

/// Number of learnable scalars.
///
/// # Safety
/// `model` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn defscan_model_param_count(
    model: *const DefscanModel,
    out: *mut usize,
) -> DefscanStatus {
    guard(|| write_out(out, handle(model)?.model.param_count(), "out"))
}

/// # Safety
/// `model` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn defscan_model_num_classes(
    model: *const DefscanModel,
    out: *mut usize,
) -> DefscanStatus {
    guard(|| write_out(out, handle(model)?.model.config().num_classes, "out"))
}

/// Input side length; images are `image_size × image_size × 3`.
///
/// # Safety
/// `model` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn defscan_model_image_size(
    model: *const DefscanModel,
    out: *mut usize,
) -> DefscanStatus {
    guard(|| write_out(out, handle(model)?.model.config().image_size, "out"))
}

/// Class logits of one image. `logits_len` must equal the class count.
///
/// # Safety
/// `model` must be a live handle, `image_data` must point to `image_len`
/// readable doubles and `logits` to `logits_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn defscan_model_forward(
    model: *const DefscanModel,
    image_data: *const f64,
    image_len: usize,
    logits: *mut f64,
    logits_len: usize,
) -> DefscanStatus {
    guard(|| {
        let m = &handle(model)?.model;
        let img = image(m, image_data, image_len)?;
        if logits.is_null() {
            return Err(null("logits"));
        }
        let k = m.config().num_classes;
        if logits_len != k {
            return Err(Failure(
                DefscanStatus::BufferTooSmall,
                format!("E_BUFFER: logits buffer holds {logits_len} values, model has {k} classes"),
            ));
        }
        let out = m.logits(&img)?;
        std::ptr::copy_nonoverlapping(out.data().as_ptr(), logits, k);
        Ok(())
    })
}

/// Deformable scan order of the first block of the first stage for one
/// image: entry `i` is the raster index of the `i`-th scanned token.
///
/// # Safety
/// `model` must be a live handle, `image_data` must point to `image_len`
/// readable doubles, `order` to `capacity` writable indices and `out_len`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn defscan_model_scan_order(
    model: *const DefscanModel,
    image_data: *const f64,
    image_len: usize,
    order: *mut usize,
    capacity: usize,
    out_len: *mut usize,
) -> DefscanStatus {
    guard(|| {
        let m = &handle(model)?.model;
        let img = image(m, image_data, image_len)?;
        let mut tape = Tape::new();
        let b = m.store().bind_frozen(&mut tape);
        let x = tape.constant(img);
        let trace = m.forward(&mut tape, &b, x)?;
        let record = trace
            .deform
            .iter()
            .find(|r| r.stage == 0 && r.block == 0)
            .ok_or_else(|| {
                Failure(
                    DefscanStatus::Config,
                    "E_CONFIG: model has no deformable branch".into(),
                )
            })?;
        copy_indices(record.order.order(), order, capacity, out_len)
    })
}

/// Fixed scan order of an `h × w` grid. `kind` is `raster`,
/// `raster_reversed`, `continuous`, `local_window` or `local_window(N)`.
///
/// # Safety
/// `kind` must be a NUL-terminated string, `order` must point to `capacity`
/// writable indices and `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn defscan_fixed_order(
    kind: *const c_char,
    h: usize,
    w: usize,
    order: *mut usize,
    capacity: usize,
    out_len: *mut usize,
) -> DefscanStatus {
    guard(|| {
        let kind: FixedScanKind = text(kind, "kind")?.parse()?;
        let o = fixed_order(kind, h, w)?;
        copy_indices(o.order(), order, capacity, out_len)
    })
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to fit, into `buf`. Returns the full message length in bytes
/// excluding the terminator, or 0 when the last call succeeded.
///
/// # Safety
/// `buf` must be null or point to `capacity` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn defscan_last_error_message(buf: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else {
            if !buf.is_null() && capacity > 0 {
                *buf = 0;
            }
            return 0;
        };
        let bytes = msg.as_bytes();
        if !buf.is_null() && capacity > 0 {
            let n = bytes.len().min(capacity - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}
