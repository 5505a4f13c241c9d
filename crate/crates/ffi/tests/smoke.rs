//! Exercise the C ABI end to end through the Rust declarations: synth a
//! scene, train a tiny model via a config file, open a renderer handle,
//! render into a byte buffer and evaluate.

use frustumfield_ffi::*;
use std::ffi::CString;
use std::io::Write;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe {
        std::ffi::CStr::from_ptr(ff_last_error())
            .to_string_lossy()
            .into_owned()
    }
}

#[test]
fn abi_version_is_one() {
    assert_eq!(ff_abi_version(), 1);
}

#[test]
fn full_roundtrip_through_the_abi() {
    let dir = tempfile::tempdir().unwrap();
    let scene_dir = dir.path().join("scene");
    let scene_c = c(scene_dir.to_str().unwrap());

    // synth
    let status = unsafe {
        ff_synth_scene(
            c("two-spheres").as_ptr(),
            4,
            12.0,
            16,
            16,
            0,
            scene_c.as_ptr(),
        )
    };
    assert_eq!(status, FfStatus::FfStatusOk, "{}", last_error());

    // train a few steps through a config file
    let cfg_path = dir.path().join("cfg.txt");
    let mut f = std::fs::File::create(&cfg_path).unwrap();
    writeln!(f, "steps = 3").unwrap();
    writeln!(f, "crop = 16").unwrap();
    writeln!(f, "input_views = 3").unwrap();
    writeln!(f, "c2 = 4\nc4 = 4\nc8 = 8").unwrap();
    writeln!(f, "transformer_blocks = 1\nheads = 2\ngroups = 2").unwrap();
    writeln!(f, "volume_channels = 8\ndecoder_blocks = 1\nupsample_channels = 2").unwrap();
    writeln!(f, "d_coarse = 4\nwindow = 3\nlambda_ssim = 0.5").unwrap();
    drop(f);
    let ckpt = dir.path().join("m.ckpt");
    let status = unsafe {
        ff_train(
            scene_c.as_ptr(),
            c(cfg_path.to_str().unwrap()).as_ptr(),
            std::ptr::null(),
            c(ckpt.to_str().unwrap()).as_ptr(),
        )
    };
    assert_eq!(status, FfStatus::FfStatusOk, "{}", last_error());

    // open a renderer handle
    let mut handle: *mut FfRenderer = std::ptr::null_mut();
    let status = unsafe {
        ff_renderer_open(
            scene_c.as_ptr(),
            c(ckpt.to_str().unwrap()).as_ptr(),
            3,
            &mut handle,
        )
    };
    assert_eq!(status, FfStatus::FfStatusOk, "{}", last_error());
    assert!(!handle.is_null());

    unsafe {
        let mut count = 0u32;
        assert_eq!(ff_renderer_view_count(handle, &mut count), FfStatus::FfStatusOk);
        assert_eq!(count, 4);

        let (mut w, mut h) = (0u32, 0u32);
        assert_eq!(
            ff_renderer_image_size(handle, 1, &mut w, &mut h),
            FfStatus::FfStatusOk
        );
        assert_eq!((w, h), (16, 16));

        // render into a caller buffer
        let mut rgb = vec![0u8; (3 * w * h) as usize];
        let status = ff_renderer_render_view(handle, 1, 1, 0, rgb.as_mut_ptr(), rgb.len());
        assert_eq!(status, FfStatus::FfStatusOk, "{}", last_error());

        // a too-small buffer is rejected with a message
        let status = ff_renderer_render_view(handle, 1, 1, 0, rgb.as_mut_ptr(), 7);
        assert_eq!(status, FfStatus::FfStatusInvalidArgument);
        assert!(last_error().contains("too small"));

        // unknown view id maps to a contract error
        let status = ff_renderer_render_view(handle, 99, 1, 0, rgb.as_mut_ptr(), rgb.len());
        assert_eq!(status, FfStatus::FfStatusContract);

        // eval view reports finite metrics
        let (mut psnr, mut ssim) = (0.0f64, 0.0f64);
        let status = ff_renderer_eval_view(handle, 1, &mut psnr, &mut ssim);
        assert_eq!(status, FfStatus::FfStatusOk, "{}", last_error());
        assert!(psnr.is_finite() && ssim.is_finite());

        // byte-buffer psnr helper: identical buffers cap at 99
        let mut out = 0.0f64;
        assert_eq!(
            ff_psnr_rgb8(rgb.as_ptr(), rgb.as_ptr(), w, h, &mut out),
            FfStatus::FfStatusOk
        );
        assert_eq!(out, 99.0);

        ff_renderer_close(handle);
    }
}

#[test]
fn missing_scene_is_io_error() {
    let mut handle: *mut FfRenderer = std::ptr::null_mut();
    let status = unsafe {
        ff_renderer_open(
            c("/nonexistent/scene").as_ptr(),
            c("/nonexistent/ckpt").as_ptr(),
            2,
            &mut handle,
        )
    };
    assert_eq!(status, FfStatus::FfStatusIo);
    assert!(!last_error().is_empty());
}

#[test]
fn null_arguments_rejected() {
    let status = unsafe {
        ff_synth_scene(std::ptr::null(), 3, 10.0, 8, 8, 0, c("/tmp/x").as_ptr())
    };
    assert_eq!(status, FfStatus::FfStatusInvalidArgument);
}

#[test]
fn generated_header_exists_with_symbols() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("include")
        .join("frustumfield.h");
    let text = std::fs::read_to_string(&header).expect("header generated at build time");
    for sym in [
        "ff_renderer_open",
        "ff_renderer_render_view",
        "ff_synth_scene",
        "ff_train",
        "ff_last_error",
        "FF_STATUS_OK",
        "typedef struct FfRenderer FfRenderer",
    ] {
        assert!(text.contains(sym), "header missing `{sym}`");
    }
}
