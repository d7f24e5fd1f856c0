//! C ABI over the `dyncloud` pipeline.
//!
//! Objects are opaque heap handles released with the matching `*_free`.
//! Every fallible call returns a [`DcStatus`]; on failure a message for the
//! calling thread is available from [`dc_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, c_int, c_void, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dyncloud::evaluation::{mse, psnr, ssim};
use dyncloud::neural::{load_checkpoint, Role, UNetModel};
use dyncloud::optical_flow::{farneback_flow, FarnebackParams, FlowField};
use dyncloud::sky_image::{compute_cloud_mask, load_png, save_png, SkyImage};
use dyncloud::sphere_map::FisheyeProjection;
use dyncloud::temporal_engine::{advect, gamma, synthesize_with, xi_step, FrameKind, SequenceConfig};
use dyncloud::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DcStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Precondition = 3,
    NumericFailure = 4,
    Io = 5,
    Format = 6,
    DimensionMismatch = 7,
    TimeOutOfRange = 8,
    BufferTooSmall = 9,
    Aborted = 10,
    Panic = 11,
}

/// Frame kinds reported to a synthesis callback.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DcFrameKind {
    Keyframe = 0,
    Anchor = 1,
    Blend = 2,
}

/// A square sky image in display range.
pub struct DcImage(SkyImage);

/// A dense flow field in pixels per keyframe interval.
pub struct DcFlow(FlowField);

/// A trained network loaded from a checkpoint.
pub struct DcModel(UNetModel);

/// Receives each synthesized frame in order. The image is borrowed for the
/// duration of the call. Returning nonzero stops synthesis with
/// `DC_STATUS_ABORTED`.
pub type DcFrameSink =
    Option<unsafe extern "C" fn(user: *mut c_void, index: usize, time: f64, kind: DcFrameKind, frame: *const DcImage) -> c_int>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(err: &Error) -> DcStatus {
    match err.root() {
        Error::Config(_) => DcStatus::InvalidArgument,
        Error::DimensionMismatch { .. } => DcStatus::DimensionMismatch,
        Error::TimeOutOfRange { .. } => DcStatus::TimeOutOfRange,
        Error::NumericFailure { .. } | Error::NonFinite { .. } => DcStatus::NumericFailure,
        Error::File { .. } | Error::Io(_) => DcStatus::Io,
        Error::Format { .. } | Error::Json(_) | Error::Image(_) => DcStatus::Format,
        _ => DcStatus::Precondition,
    }
}

enum Failure {
    Status(DcStatus, String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DcStatus::Ok,
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            DcStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure::Status(DcStatus::NullArgument, format!("`{name}` is null"))
}

unsafe fn get<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Status(DcStatus::InvalidArgument, format!("`{name}` is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds an image from `size * size` interleaved RGB floats. Values are
/// clamped to `[0, 1]`; pixels outside the fisheye disc are zeroed.
///
/// # Safety
/// `rgb` must point to `len` readable floats.
#[no_mangle]
pub unsafe extern "C" fn dc_image_new(size: usize, rgb: *const f32, len: usize, out: *mut *mut DcImage) -> DcStatus {
    guard(|| {
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        if size == 0 || len != size * size * 3 {
            return Err(Failure::Status(
                DcStatus::InvalidArgument,
                format!("expected {} floats for size {size}, got {len}", size * size * 3),
            ));
        }
        let data = std::slice::from_raw_parts(rgb, len);
        let pixels = data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        put(out, DcImage(SkyImage::from_pixels_clamped(size, pixels)))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dc_image_load_png(path: *const c_char, out: *mut *mut DcImage) -> DcStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        put(out, DcImage(load_png(&path)?))
    })
}

/// # Safety
/// `img` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dc_image_save_png(img: *const DcImage, path: *const c_char) -> DcStatus {
    guard(|| {
        let img = get(img, "img")?;
        let path = path_arg(path, "path")?;
        Ok(save_png(&img.0, &path)?)
    })
}

/// Side length in pixels, or 0 for a null handle.
///
/// # Safety
/// `img` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dc_image_size(img: *const DcImage) -> usize {
    img.as_ref().map_or(0, |i| i.0.width())
}

/// Copies `size * size * 3` interleaved floats into `out`.
///
/// # Safety
/// `img` must be a live handle and `out` point to `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn dc_image_read(img: *const DcImage, out: *mut f32, len: usize) -> DcStatus {
    guard(|| {
        let img = get(img, "img")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let need = img.0.pixels().len() * 3;
        if len < need {
            return Err(Failure::Status(DcStatus::BufferTooSmall, format!("need {need} floats, got {len}")));
        }
        let dst = std::slice::from_raw_parts_mut(out, need);
        for (d, p) in dst.chunks_exact_mut(3).zip(img.0.pixels()) {
            d.copy_from_slice(p);
        }
        Ok(())
    })
}

/// Writes the cloud mask (1 = cloud) as `size * size` bytes.
///
/// # Safety
/// `img` must be a live handle and `out` point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn dc_cloud_mask(img: *const DcImage, threshold: f32, out: *mut u8, len: usize) -> DcStatus {
    guard(|| {
        let img = get(img, "img")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let mask = compute_cloud_mask(&img.0, threshold);
        let bits = mask.bits();
        if len < bits.len() {
            return Err(Failure::Status(
                DcStatus::BufferTooSmall,
                format!("need {} bytes, got {len}", bits.len()),
            ));
        }
        let dst = std::slice::from_raw_parts_mut(out, bits.len());
        for (d, &b) in dst.iter_mut().zip(bits) {
            *d = u8::from(b);
        }
        Ok(())
    })
}

/// # Safety
/// `img` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dc_image_free(img: *mut DcImage) {
    if !img.is_null() {
        drop(Box::from_raw(img));
    }
}

/// Builds a flow field from `size * size` interleaved `(du, dv)` pairs.
///
/// # Safety
/// `uv` must point to `len` readable floats.
#[no_mangle]
pub unsafe extern "C" fn dc_flow_new(size: usize, uv: *const f32, len: usize, out: *mut *mut DcFlow) -> DcStatus {
    guard(|| {
        if uv.is_null() {
            return Err(null("uv"));
        }
        if size == 0 || len != size * size * 2 {
            return Err(Failure::Status(
                DcStatus::InvalidArgument,
                format!("expected {} floats for size {size}, got {len}", size * size * 2),
            ));
        }
        let data = std::slice::from_raw_parts(uv, len);
        let vectors = data.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        put(out, DcFlow(FlowField::from_vectors(size, size, vectors)?))
    })
}

/// Dense flow from `a` to `b` with default estimator settings.
///
/// # Safety
/// `a` and `b` must be live handles.
#[no_mangle]
pub unsafe extern "C" fn dc_flow_estimate(a: *const DcImage, b: *const DcImage, out: *mut *mut DcFlow) -> DcStatus {
    guard(|| {
        let (a, b) = (get(a, "a")?, get(b, "b")?);
        put(out, DcFlow(farneback_flow(&a.0, &b.0, &FarnebackParams::default())?))
    })
}

/// Copies `size * size * 2` interleaved floats into `out`.
///
/// # Safety
/// `flow` must be a live handle and `out` point to `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn dc_flow_read(flow: *const DcFlow, out: *mut f32, len: usize) -> DcStatus {
    guard(|| {
        let flow = get(flow, "flow")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let v = flow.0.vectors();
        if len < v.len() * 2 {
            return Err(Failure::Status(
                DcStatus::BufferTooSmall,
                format!("need {} floats, got {len}", v.len() * 2),
            ));
        }
        let dst = std::slice::from_raw_parts_mut(out, v.len() * 2);
        for (d, p) in dst.chunks_exact_mut(2).zip(v) {
            d.copy_from_slice(p);
        }
        Ok(())
    })
}

/// # Safety
/// `flow` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dc_flow_free(flow: *mut DcFlow) {
    if !flow.is_null() {
        drop(Box::from_raw(flow));
    }
}

/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dc_model_load(path: *const c_char, out: *mut *mut DcModel) -> DcStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        put(out, DcModel(load_checkpoint(&path)?))
    })
}

/// Input resolution of the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dc_model_resolution(model: *const DcModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config.resolution)
}

/// 1 for FlowNet, 2 for CloudNet, 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dc_model_role(model: *const DcModel) -> c_int {
    match model.as_ref().map(|m| m.0.role) {
        Some(Role::FlowNet) => 1,
        Some(Role::CloudNet) => 2,
        None => 0,
    }
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dc_model_free(model: *mut DcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// One keyframe step: the image `delta_t` seconds after `img`.
///
/// # Safety
/// All handles must be live.
#[no_mangle]
pub unsafe extern "C" fn dc_predict_next(
    flownet: *const DcModel,
    cloudnet: *const DcModel,
    img: *const DcImage,
    out: *mut *mut DcImage,
) -> DcStatus {
    guard(|| {
        let (f, c, img) = (get(flownet, "flownet")?, get(cloudnet, "cloudnet")?, get(img, "img")?);
        put(out, DcImage(xi_step(&f.0, &c.0, &img.0)?.0))
    })
}

/// Moves `img` along `flow` by the fraction `s` of one interval.
///
/// # Safety
/// All handles must be live.
#[no_mangle]
pub unsafe extern "C" fn dc_advect(img: *const DcImage, flow: *const DcFlow, s: f64, out: *mut *mut DcImage) -> DcStatus {
    guard(|| {
        let (img, flow) = (get(img, "img")?, get(flow, "flow")?);
        let proj = FisheyeProjection::new(img.0.width());
        put(out, DcImage(advect(&img.0, &flow.0, s, &proj)?))
    })
}

/// The in-between frame at `t` seconds, `0 < t < delta_t`, for keyframes
/// `a` and `b` and the flow from `a` to `b`.
///
/// # Safety
/// All handles must be live.
#[no_mangle]
pub unsafe extern "C" fn dc_interpolate_frame(
    a: *const DcImage,
    b: *const DcImage,
    flow: *const DcFlow,
    t: f64,
    delta_t: f64,
    out: *mut *mut DcImage,
) -> DcStatus {
    guard(|| {
        let (a, b, flow) = (get(a, "a")?, get(b, "b")?, get(flow, "flow")?);
        let proj = FisheyeProjection::new(a.0.width());
        let pair = dyncloud::temporal_engine::KeyframePair::new(a.0.clone(), b.0.clone(), flow.0.clone(), 0)?;
        put(out, DcImage(gamma(&pair, t, delta_t, &proj)?))
    })
}

/// Synthesizes `keyframes * substeps + 1` frames from `input`, passing
/// each to `sink` in order.
///
/// # Safety
/// All handles must be live; `sink` must be callable with `user`.
#[no_mangle]
pub unsafe extern "C" fn dc_synthesize(
    input: *const DcImage,
    flownet: *const DcModel,
    cloudnet: *const DcModel,
    keyframes: usize,
    substeps: usize,
    delta_t: f64,
    sink: DcFrameSink,
    user: *mut c_void,
) -> DcStatus {
    guard(|| {
        let (input, f, c) = (get(input, "input")?, get(flownet, "flownet")?, get(cloudnet, "cloudnet")?);
        let sink = sink.ok_or_else(|| null("sink"))?;
        let cfg = SequenceConfig {
            delta_t,
            keyframes,
            substeps,
            projection: FisheyeProjection::new(input.0.width()),
            ..SequenceConfig::default()
        };
        let mut aborted = false;
        let res = synthesize_with(&input.0, &f.0, &c.0, &cfg, |frame| {
            let kind = match frame.kind {
                FrameKind::Keyframe => DcFrameKind::Keyframe,
                FrameKind::Anchor => DcFrameKind::Anchor,
                FrameKind::Blend => DcFrameKind::Blend,
            };
            let handle = DcImage(frame.image);
            if sink(user, frame.index, frame.time, kind, &handle) != 0 {
                aborted = true;
                return Err(Error::Precondition(format!("stopped by callback at frame {}", frame.index)));
            }
            Ok(())
        });
        match res {
            Err(e) if aborted => Err(Failure::Status(DcStatus::Aborted, e.to_string())),
            other => Ok(other?),
        }
    })
}

unsafe fn metric(
    a: *const DcImage,
    b: *const DcImage,
    out: *mut f64,
    f: impl FnOnce(&SkyImage, &SkyImage) -> dyncloud::Result<f64>,
) -> DcStatus {
    guard(|| {
        let (a, b) = (get(a, "a")?, get(b, "b")?);
        if out.is_null() {
            return Err(null("out"));
        }
        *out = f(&a.0, &b.0)?;
        Ok(())
    })
}

/// # Safety
/// `a`, `b` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dc_mse(a: *const DcImage, b: *const DcImage, out: *mut f64) -> DcStatus {
    metric(a, b, out, mse)
}

/// Infinite for identical images.
///
/// # Safety
/// `a`, `b` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dc_psnr(a: *const DcImage, b: *const DcImage, peak: f64, out: *mut f64) -> DcStatus {
    metric(a, b, out, |a, b| psnr(a, b, peak))
}

/// # Safety
/// `a`, `b` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dc_ssim(a: *const DcImage, b: *const DcImage, peak: f64, out: *mut f64) -> DcStatus {
    metric(a, b, out, |a, b| ssim(a, b, peak))
}
