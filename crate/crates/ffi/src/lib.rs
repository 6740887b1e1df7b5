//! C ABI over the trained-model runtime: load a checkpoint, generate
//! radius-scaled samples from the prior, encode data, and score samples
//! against the checkpoint's scientific line.
//!
//! Conventions:
//! * A [`SwaeModel`] is an opaque handle created by [`swae_model_load`] and
//!   released by [`swae_model_free`]. It is not thread-safe; callers must
//!   serialize access to one handle (or load one handle per thread).
//! * All functions return a [`SwaeStatus`]; on any non-OK status,
//!   [`swae_last_error`] returns a thread-local message describing the
//!   failure until the next call on that thread.
//! * Output buffers are caller-allocated; sizes are documented per call in
//!   elements, not bytes. Images are row-major (sample, channel, row, col),
//!   scalars (sample, scalar).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use swae::autodiff::{no_grad, BnMode, Tensor};
use swae::error::Error;
use swae::evaluation::{generate_samples, image_temperature};
use swae::model::{encode, load_checkpoint, project_to_sphere, Checkpoint};

/// Result codes for every FFI entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwaeStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    IoError = 4,
    FormatError = 5,
    ShapeMismatch = 6,
    /// The checkpoint lacks the standardizer or scientific line required
    /// by the call.
    MissingMetadata = 7,
    NumericError = 8,
    InternalPanic = 9,
}

/// Opaque handle to a loaded checkpoint.
pub struct SwaeModel {
    ckpt: Checkpoint,
}

/// Model dimensions, all in elements.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SwaeDims {
    pub latent_dim: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub n_scalars: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> SwaeStatus {
    match err {
        Error::Io { .. } => SwaeStatus::IoError,
        Error::Format { .. } => SwaeStatus::FormatError,
        Error::ShapeMismatch { .. } | Error::ArchMismatch { .. } | Error::Empty(_) => {
            SwaeStatus::ShapeMismatch
        }
        Error::Config(_) => SwaeStatus::MissingMetadata,
        Error::InvalidInput(_) => SwaeStatus::InvalidArgument,
        Error::NonFinite { .. }
        | Error::DegenerateLatent { .. }
        | Error::BackwardNonScalar { .. }
        | Error::BackwardNoTape
        | Error::Numerical(_) => SwaeStatus::NumericError,
    }
}

fn fail(err: &Error) -> SwaeStatus {
    set_error(&err.to_string());
    status_of(err)
}

fn guarded(f: impl FnOnce() -> SwaeStatus) -> SwaeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            SwaeStatus::InternalPanic
        }
    }
}

/// Message for the most recent failure on this thread. Valid until the
/// next FFI call from the same thread; never null.
#[no_mangle]
pub extern "C" fn swae_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Load a checkpoint from `path` into a fresh handle.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out_model` a valid
/// pointer; the returned handle must be released with [`swae_model_free`].
#[no_mangle]
pub unsafe extern "C" fn swae_model_load(
    path: *const c_char,
    out_model: *mut *mut SwaeModel,
) -> SwaeStatus {
    guarded(|| {
        if path.is_null() || out_model.is_null() {
            set_error("null argument");
            return SwaeStatus::NullArgument;
        }
        let Ok(path) = unsafe { CStr::from_ptr(path) }.to_str() else {
            set_error("path is not valid UTF-8");
            return SwaeStatus::InvalidUtf8;
        };
        match load_checkpoint(Path::new(path)) {
            Ok(ckpt) => {
                let handle = Box::new(SwaeModel { ckpt });
                unsafe { *out_model = Box::into_raw(handle) };
                SwaeStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Release a handle. A null pointer is a no-op.
///
/// # Safety
/// `model` must have come from [`swae_model_load`] and not be used after.
#[no_mangle]
pub unsafe extern "C" fn swae_model_free(model: *mut SwaeModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Query the model's data and latent dimensions.
///
/// # Safety
/// Both pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn swae_model_dims(
    model: *const SwaeModel,
    out_dims: *mut SwaeDims,
) -> SwaeStatus {
    guarded(|| {
        if model.is_null() || out_dims.is_null() {
            set_error("null argument");
            return SwaeStatus::NullArgument;
        }
        let ckpt = unsafe { &(*model).ckpt };
        let s = ckpt.config.data_shape;
        unsafe {
            *out_dims = SwaeDims {
                latent_dim: ckpt.config.arch.latent_dim,
                channels: s.channels,
                height: s.height,
                width: s.width,
                n_scalars: s.n_scalars,
            };
        }
        SwaeStatus::Ok
    })
}

/// Generate `n` samples: draw from the prior, project to the unit sphere,
/// scale by `radius`, decode. Identical (seed, radius) calls reproduce the
/// CLI `sample` subcommand exactly.
///
/// `images_out` must hold n*channels*height*width floats and `scalars_out`
/// n*n_scalars floats (de-standardized units).
///
/// # Safety
/// All pointers must be valid for the documented lengths.
#[no_mangle]
pub unsafe extern "C" fn swae_generate(
    model: *const SwaeModel,
    n: usize,
    radius: f64,
    seed: u64,
    images_out: *mut f32,
    scalars_out: *mut f32,
) -> SwaeStatus {
    guarded(|| {
        if model.is_null() || images_out.is_null() || scalars_out.is_null() {
            set_error("null argument");
            return SwaeStatus::NullArgument;
        }
        let ckpt = unsafe { &(*model).ckpt };
        let Some(std) = ckpt.standardizer.as_ref() else {
            set_error("checkpoint has no standardizer");
            return SwaeStatus::MissingMetadata;
        };
        let samples = match generate_samples(&ckpt.params, &ckpt.config, std, n, radius, seed) {
            Ok(s) => s,
            Err(e) => return fail(&e),
        };
        let shape = samples.shape;
        let images = unsafe { std::slice::from_raw_parts_mut(images_out, n * shape.image_len()) };
        let scalars =
            unsafe { std::slice::from_raw_parts_mut(scalars_out, n * shape.n_scalars) };
        for (i, rec) in samples.records.iter().enumerate() {
            images[i * shape.image_len()..(i + 1) * shape.image_len()]
                .copy_from_slice(&rec.image);
            scalars[i * shape.n_scalars..(i + 1) * shape.n_scalars]
                .copy_from_slice(&rec.scalars);
        }
        SwaeStatus::Ok
    })
}

/// Encode `n` samples to latents. With `project` nonzero the rows are
/// normalized onto the unit sphere (the generator-side representation);
/// with zero they are the raw Euclidean encodings.
///
/// `images` holds n*channels*height*width floats in [0,1], `scalars`
/// n*n_scalars floats in original units, `latents_out` n*latent_dim floats.
///
/// # Safety
/// All pointers must be valid for the documented lengths.
#[no_mangle]
pub unsafe extern "C" fn swae_encode(
    model: *const SwaeModel,
    n: usize,
    images: *const f32,
    scalars: *const f32,
    project: i32,
    latents_out: *mut f32,
) -> SwaeStatus {
    guarded(|| {
        if model.is_null() || images.is_null() || scalars.is_null() || latents_out.is_null() {
            set_error("null argument");
            return SwaeStatus::NullArgument;
        }
        if n == 0 {
            set_error("n must be >= 1");
            return SwaeStatus::InvalidArgument;
        }
        let ckpt = unsafe { &(*model).ckpt };
        let Some(std) = ckpt.standardizer.as_ref() else {
            set_error("checkpoint has no standardizer");
            return SwaeStatus::MissingMetadata;
        };
        let shape = ckpt.config.data_shape;
        let d = ckpt.config.arch.latent_dim;
        let images = unsafe { std::slice::from_raw_parts(images, n * shape.image_len()) };
        let scalars = unsafe { std::slice::from_raw_parts(scalars, n * shape.n_scalars) };

        let std_scalars: Vec<f32> = scalars
            .chunks_exact(shape.n_scalars)
            .flat_map(|row| std.transform(row))
            .collect();
        let result = no_grad(|| -> Result<Vec<f32>, Error> {
            let images = Tensor::from_vec(
                images.to_vec(),
                &[n, shape.channels, shape.height, shape.width],
            )?;
            let scalars = Tensor::from_vec(std_scalars, &[n, shape.n_scalars])?;
            let z = encode(&ckpt.params, &ckpt.config, &images, &scalars, BnMode::Eval)?;
            let z = if project != 0 { project_to_sphere(&z)? } else { z };
            Ok(z.to_vec())
        });
        match result {
            Ok(latents) => {
                unsafe { std::slice::from_raw_parts_mut(latents_out, n * d) }
                    .copy_from_slice(&latents);
                SwaeStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Score `n` samples against the checkpoint's scientific line: residual =
/// t_ion - (slope * image_temperature + intercept), one double per sample.
///
/// # Safety
/// All pointers must be valid for the documented lengths.
#[no_mangle]
pub unsafe extern "C" fn swae_score(
    model: *const SwaeModel,
    n: usize,
    images: *const f32,
    scalars: *const f32,
    residuals_out: *mut f64,
) -> SwaeStatus {
    guarded(|| {
        if model.is_null() || images.is_null() || scalars.is_null() || residuals_out.is_null() {
            set_error("null argument");
            return SwaeStatus::NullArgument;
        }
        if n == 0 {
            set_error("n must be >= 1");
            return SwaeStatus::InvalidArgument;
        }
        let ckpt = unsafe { &(*model).ckpt };
        let Some(line) = ckpt.line.as_ref() else {
            set_error("checkpoint has no scientific line");
            return SwaeStatus::MissingMetadata;
        };
        let shape = ckpt.config.data_shape;
        let images = unsafe { std::slice::from_raw_parts(images, n * shape.image_len()) };
        let scalars = unsafe { std::slice::from_raw_parts(scalars, n * shape.n_scalars) };
        let out = unsafe { std::slice::from_raw_parts_mut(residuals_out, n) };
        for i in 0..n {
            let image = &images[i * shape.image_len()..(i + 1) * shape.image_len()];
            let t_ion = scalars[i * shape.n_scalars] as f64;
            out[i] = line.residual(t_ion, image_temperature(image));
        }
        SwaeStatus::Ok
    })
}
