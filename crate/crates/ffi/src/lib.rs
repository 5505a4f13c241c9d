//! C ABI for the frustumfield engine.
//!
//! Conventions:
//! - every call returns an `FfStatus`; non-zero means failure and
//!   `ff_last_error()` holds a message (thread-local, valid until the next
//!   call on the same thread);
//! - handles (`FfRenderer`) are opaque; create/destroy in pairs;
//! - buffers are caller-allocated, sizes in elements are validated.
//!
//! Panics never cross the boundary: all entry points catch unwinds and map
//! them to `FF_STATUS_INTERNAL`.

use frustumfield::error::Error;
use frustumfield::geometry::CameraView;
use frustumfield::model::Model;
use frustumfield::render;
use frustumfield::scene::synth::Preset;
use frustumfield::scene::{load_scene, Scene};
use frustumfield::tensor::no_grad;
use frustumfield::train;
use libc::{c_char, c_double, size_t};
use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

/// Status codes returned by every FFI call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FfStatus {
    FfStatusOk = 0,
    FfStatusInvalidArgument = 1,
    FfStatusIo = 2,
    FfStatusParse = 3,
    FfStatusContract = 4,
    FfStatusInternal = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let clean = msg.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).unwrap());
}

fn status_of(err: &Error) -> FfStatus {
    match err {
        Error::Io { .. } => FfStatus::FfStatusIo,
        Error::Parse { .. } | Error::Checkpoint(_) => FfStatus::FfStatusParse,
        Error::Contract(_) | Error::Dim(_) | Error::Config(_) | Error::UnknownView(_) => {
            FfStatus::FfStatusContract
        }
        Error::NonFinite(_) => FfStatus::FfStatusInternal,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (FfStatus, String)>) -> FfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FfStatus::FfStatusOk,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .map(|s| s.as_str())
                .or_else(|| panic.downcast_ref::<&str>().copied())
                .unwrap_or("panic");
            set_error(msg);
            FfStatus::FfStatusInternal
        }
    }
}

fn fail(e: Error) -> (FfStatus, String) {
    (status_of(&e), e.to_string())
}

fn invalid(msg: &str) -> (FfStatus, String) {
    (FfStatus::FfStatusInvalidArgument, msg.to_string())
}

unsafe fn cstr<'a>(p: *const c_char, what: &str) -> Result<&'a str, (FfStatus, String)> {
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(&format!("{what} is not valid utf-8")))
}

/// Message for the most recent failure on this thread. Never null; valid
/// until the next FFI call on the same thread.
#[no_mangle]
pub extern "C" fn ff_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// ABI version of this header/library pair.
#[no_mangle]
pub extern "C" fn ff_abi_version() -> u32 {
    1
}

/// Generate a synthetic scene directory (views, depths, manifest).
///
/// # Safety
/// `preset` and `out_dir` must be valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn ff_synth_scene(
    preset: *const c_char,
    views: u32,
    baseline_deg: c_double,
    width: u32,
    height: u32,
    seed: u64,
    out_dir: *const c_char,
) -> FfStatus {
    guard(|| {
        let preset = cstr(preset, "preset")?;
        let out = cstr(out_dir, "out_dir")?;
        let preset = Preset::parse(preset)
            .ok_or_else(|| invalid(&format!("unknown preset `{preset}`")))?;
        let _ = seed;
        frustumfield::scene::synth::synth_scene(
            preset,
            views as usize,
            baseline_deg,
            width as usize,
            height as usize,
            512,
            Path::new(out),
        )
        .map_err(fail)?;
        Ok(())
    })
}

/// Train on a scene directory using a config file; writes a checkpoint.
/// Blocking. `coarse_ckpt` may be null (required for the fine stage).
///
/// # Safety
/// All non-null pointers must be valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn ff_train(
    scene_dir: *const c_char,
    config_path: *const c_char,
    coarse_ckpt: *const c_char,
    out_ckpt: *const c_char,
) -> FfStatus {
    guard(|| {
        let scene = cstr(scene_dir, "scene_dir")?;
        let config = cstr(config_path, "config_path")?;
        let out = cstr(out_ckpt, "out_ckpt")?;
        let coarse = if coarse_ckpt.is_null() {
            None
        } else {
            Some(cstr(coarse_ckpt, "coarse_ckpt")?)
        };
        let cfg = frustumfield::config::TrainConfig::from_file(Path::new(config)).map_err(fail)?;
        train::train(
            &cfg,
            Path::new(scene),
            Path::new(out),
            coarse.map(Path::new),
        )
        .map_err(fail)?;
        Ok(())
    })
}

/// A loaded scene + model, ready to render views.
pub struct FfRenderer {
    scene: Scene<f32>,
    model: Model<f32>,
    input_views: usize,
}

/// Open a renderer over a scene directory and a checkpoint.
///
/// # Safety
/// `scene_dir`/`ckpt_path` must be valid strings; `out` must be a valid
/// pointer to receive the handle. Close with `ff_renderer_close`.
#[no_mangle]
pub unsafe extern "C" fn ff_renderer_open(
    scene_dir: *const c_char,
    ckpt_path: *const c_char,
    input_views: u32,
    out: *mut *mut FfRenderer,
) -> FfStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out handle pointer is null"));
        }
        let scene_dir = cstr(scene_dir, "scene_dir")?;
        let ckpt = cstr(ckpt_path, "ckpt_path")?;
        let scene = load_scene::<f32>(Path::new(scene_dir)).map_err(fail)?;
        let model = Model::<f32>::load(Path::new(ckpt)).map_err(fail)?;
        if input_views == 0 || (input_views as usize) > scene.views.len() {
            return Err(invalid("input_views must be in [1, view count]"));
        }
        let handle = Box::new(FfRenderer {
            scene,
            model,
            input_views: input_views as usize,
        });
        *out = Box::into_raw(handle);
        Ok(())
    })
}

/// # Safety
/// `handle` must come from `ff_renderer_open` and not be closed twice.
#[no_mangle]
pub unsafe extern "C" fn ff_renderer_close(handle: *mut FfRenderer) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Number of views in the scene behind a renderer.
///
/// # Safety
/// `handle` must be a live renderer handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ff_renderer_view_count(handle: *const FfRenderer, out: *mut u32) -> FfStatus {
    guard(|| {
        if handle.is_null() || out.is_null() {
            return Err(invalid("null pointer"));
        }
        *out = (*handle).scene.views.len() as u32;
        Ok(())
    })
}

/// Width/height of a view.
///
/// # Safety
/// `handle` live; `w`/`h` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ff_renderer_image_size(
    handle: *const FfRenderer,
    view_id: u32,
    w: *mut u32,
    h: *mut u32,
) -> FfStatus {
    guard(|| {
        if handle.is_null() || w.is_null() || h.is_null() {
            return Err(invalid("null pointer"));
        }
        let r = &*handle;
        let v = r
            .scene
            .views
            .get(view_id as usize)
            .ok_or_else(|| fail(Error::UnknownView(view_id as usize)))?;
        *w = v.width as u32;
        *h = v.height as u32;
        Ok(())
    })
}

fn rgb_to_bytes(rgb: &frustumfield::Tensor<f32>, out: &mut [u8]) {
    let sh = rgb.shape().to_vec();
    let (h, w) = (sh[1], sh[2]);
    let data = rgb.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = data[(c * h + y) * w + x].clamp(0.0, 1.0);
                out[(y * w + x) * 3 + c] = (v * 255.0 + 0.5).floor() as u8;
            }
        }
    }
}

/// Render a scene view into a caller buffer of 3*w*h interleaved RGB bytes
/// (row-major, top-left origin). `patches` > 1 uses patch-based decoding
/// with the given overlap (in volume cells).
///
/// # Safety
/// `handle` live; `rgb_out` must point to at least `rgb_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn ff_renderer_render_view(
    handle: *mut FfRenderer,
    view_id: u32,
    patches: u32,
    overlap: u32,
    rgb_out: *mut u8,
    rgb_len: size_t,
) -> FfStatus {
    guard(|| {
        if handle.is_null() || rgb_out.is_null() {
            return Err(invalid("null pointer"));
        }
        let r = &*handle;
        let id = view_id as usize;
        if id >= r.scene.views.len() {
            return Err(fail(Error::UnknownView(id)));
        }
        let target0 = &r.scene.views[id];
        let need = 3 * target0.width * target0.height;
        if rgb_len < need {
            return Err(invalid(&format!("rgb buffer too small: {rgb_len} < {need}")));
        }
        let mut target = target0.clone();
        target.image = None;
        let pool: Vec<usize> = (0..r.scene.views.len()).filter(|&i| i != id).collect();
        let k = r.input_views.min(pool.len());
        let idx = train::nearest_views(&r.scene.views, &target, k, &pool);
        let inputs: Vec<CameraView<f32>> = idx.iter().map(|&i| r.scene.views[i].clone()).collect();
        let rendered = no_grad(|| {
            if patches > 1 {
                render::render_patched(&r.model, &inputs, &target, patches as usize, overlap as usize)
            } else {
                render::render(&r.model, &inputs, &target, false, None)
                    .map(|res| res.fine.unwrap_or(res.coarse))
            }
        })
        .map_err(fail)?;
        let out = std::slice::from_raw_parts_mut(rgb_out, need);
        rgb_to_bytes(&rendered.rgb, out);
        Ok(())
    })
}

/// Render a view and score it against its ground-truth image.
///
/// # Safety
/// `handle` live; `psnr`/`ssim` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ff_renderer_eval_view(
    handle: *mut FfRenderer,
    view_id: u32,
    psnr: *mut c_double,
    ssim: *mut c_double,
) -> FfStatus {
    guard(|| {
        if handle.is_null() || psnr.is_null() || ssim.is_null() {
            return Err(invalid("null pointer"));
        }
        let r = &*handle;
        let rep = train::evaluate(&r.model, &r.scene, &[view_id as usize], r.input_views, None, None)
            .map_err(fail)?;
        *psnr = rep.entries[0].metrics.psnr;
        *ssim = rep.entries[0].metrics.ssim;
        Ok(())
    })
}

/// PSNR between two interleaved RGB byte buffers of the same size.
///
/// # Safety
/// Both buffers must hold `3*w*h` bytes; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ff_psnr_rgb8(
    a: *const u8,
    b: *const u8,
    w: u32,
    h: u32,
    out: *mut c_double,
) -> FfStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return Err(invalid("null pointer"));
        }
        let n = 3 * (w as usize) * (h as usize);
        let av = std::slice::from_raw_parts(a, n);
        let bv = std::slice::from_raw_parts(b, n);
        let mse: f64 = av
            .iter()
            .zip(bv)
            .map(|(&x, &y)| {
                let d = (x as f64 - y as f64) / 255.0;
                d * d
            })
            .sum::<f64>()
            / n as f64;
        *out = if mse < 1e-10 { 99.0 } else { 10.0 * (1.0 / mse).log10() };
        Ok(())
    })
}
