use std::ffi::{c_int, c_void, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use dyncloud::neural::{build_unet, save_checkpoint, Role, UNetConfig};
use dyncloud_ffi::*;

fn last_error() -> String {
    let p = dc_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn image(size: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> *mut DcImage {
    let mut rgb = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            rgb.extend_from_slice(&f(x, y));
        }
    }
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { dc_image_new(size, rgb.as_ptr(), rgb.len(), &mut out) }, DcStatus::Ok);
    out
}

fn texture(x: usize, y: usize) -> [f32; 3] {
    [0.5 + 0.3 * (x as f32 * 0.4).sin(), 0.4 + 0.2 * (y as f32 * 0.3).cos(), 0.7]
}

#[test]
fn image_round_trip_and_errors() {
    let img = image(16, texture);
    assert_eq!(unsafe { dc_image_size(img) }, 16);
    let mut buf = vec![0.0f32; 16 * 16 * 3];
    assert_eq!(unsafe { dc_image_read(img, buf.as_mut_ptr(), buf.len()) }, DcStatus::Ok);
    // center pixel lies inside the disc
    let i = (8 * 16 + 8) * 3;
    assert_eq!(&buf[i..i + 3], &texture(8, 8));
    assert_eq!(&buf[..3], &[0.0; 3]);

    let mut small = [0.0f32; 4];
    assert_eq!(unsafe { dc_image_read(img, small.as_mut_ptr(), 4) }, DcStatus::BufferTooSmall);
    assert!(last_error().contains("need"));

    let mut out = ptr::null_mut();
    assert_eq!(unsafe { dc_image_new(4, ptr::null(), 48, &mut out) }, DcStatus::NullArgument);
    assert_eq!(unsafe { dc_image_new(4, buf.as_ptr(), 5, &mut out) }, DcStatus::InvalidArgument);
    assert!(out.is_null());

    let mut mask = vec![0u8; 256];
    assert_eq!(unsafe { dc_cloud_mask(img, 0.46, mask.as_mut_ptr(), mask.len()) }, DcStatus::Ok);
    assert!(mask.iter().all(|&m| m <= 1));
    unsafe {
        dc_image_free(img);
        dc_image_free(ptr::null_mut());
    }
}

#[test]
fn advect_interpolate_and_metrics() {
    let n = 32;
    let a = image(n, texture);
    let b = image(n, |x, y| texture(y, x));
    let zero = vec![0.0f32; n * n * 2];
    let mut flow = ptr::null_mut();
    assert_eq!(unsafe { dc_flow_new(n, zero.as_ptr(), zero.len(), &mut flow) }, DcStatus::Ok);

    let mut moved = ptr::null_mut();
    assert_eq!(unsafe { dc_advect(a, flow, 0.5, &mut moved) }, DcStatus::Ok);
    let mut v = 1.0;
    assert_eq!(unsafe { dc_mse(a, moved, &mut v) }, DcStatus::Ok);
    assert_eq!(v, 0.0);
    assert_eq!(unsafe { dc_psnr(a, moved, 1.0, &mut v) }, DcStatus::Ok);
    assert!(v.is_infinite());
    assert_eq!(unsafe { dc_ssim(a, moved, 1.0, &mut v) }, DcStatus::Ok);
    assert_eq!(v, 1.0);

    let mut mid = ptr::null_mut();
    assert_eq!(unsafe { dc_interpolate_frame(a, b, flow, 5.0, 10.0, &mut mid) }, DcStatus::Ok);
    let mut out = ptr::null_mut();
    assert_eq!(
        unsafe { dc_interpolate_frame(a, b, flow, 10.0, 10.0, &mut out) },
        DcStatus::TimeOutOfRange
    );
    assert!(last_error().contains("outside"));

    let other = image(16, texture);
    assert_eq!(unsafe { dc_mse(a, other, &mut v) }, DcStatus::DimensionMismatch);

    let mut est = ptr::null_mut();
    assert_eq!(unsafe { dc_flow_estimate(a, a, &mut est) }, DcStatus::Ok);
    let mut uv = vec![1.0f32; n * n * 2];
    assert_eq!(unsafe { dc_flow_read(est, uv.as_mut_ptr(), uv.len()) }, DcStatus::Ok);
    assert!(uv.iter().all(|c| c.abs() < 1e-3));
    unsafe {
        for img in [a, b, moved, mid, other] {
            dc_image_free(img);
        }
        dc_flow_free(flow);
        dc_flow_free(est);
    }
}

struct Collected {
    frames: Vec<(usize, f64, DcFrameKind)>,
    stop_at: Option<usize>,
}

unsafe extern "C" fn collect(user: *mut c_void, index: usize, time: f64, kind: DcFrameKind, frame: *const DcImage) -> c_int {
    let c = &mut *(user as *mut Collected);
    assert_eq!(dc_image_size(frame), 16);
    c.frames.push((index, time, kind));
    c_int::from(c.stop_at == Some(index))
}

fn save_models(dir: &Path) -> (CString, CString) {
    let widths = [4, 8, 8];
    let f = build_unet(UNetConfig::flownet(16).with_widths(&widths), Role::FlowNet, 1).unwrap();
    let c = build_unet(UNetConfig::cloudnet(16).with_widths(&widths), Role::CloudNet, 2).unwrap();
    let (fp, cp) = (dir.join("flownet.ckpt"), dir.join("cloudnet.ckpt"));
    save_checkpoint(&f, &fp).unwrap();
    save_checkpoint(&c, &cp).unwrap();
    let s = |p: &Path| CString::new(p.to_str().unwrap()).unwrap();
    (s(&fp), s(&cp))
}

#[test]
fn synthesize_through_callback() {
    let dir = tempfile::tempdir().unwrap();
    let (fp, cp) = save_models(dir.path());
    let (mut f, mut c) = (ptr::null_mut(), ptr::null_mut());
    unsafe {
        assert_eq!(dc_model_load(fp.as_ptr(), &mut f), DcStatus::Ok);
        assert_eq!(dc_model_load(cp.as_ptr(), &mut c), DcStatus::Ok);
        assert_eq!((dc_model_role(f), dc_model_role(c), dc_model_resolution(f)), (1, 2, 16));
    }
    let input = image(16, texture);

    let mut next = ptr::null_mut();
    assert_eq!(unsafe { dc_predict_next(f, c, input, &mut next) }, DcStatus::Ok);
    assert_eq!(unsafe { dc_predict_next(c, f, input, &mut ptr::null_mut()) }, DcStatus::Precondition);

    let mut sink = Collected {
        frames: Vec::new(),
        stop_at: None,
    };
    let user = &mut sink as *mut Collected as *mut c_void;
    let status = unsafe { dc_synthesize(input, f, c, 2, 3, 10.0, Some(collect), user) };
    assert_eq!(status, DcStatus::Ok);
    let idx: Vec<usize> = sink.frames.iter().map(|f| f.0).collect();
    assert_eq!(idx, (0..7).collect::<Vec<_>>());
    assert_eq!(sink.frames[3].2, DcFrameKind::Keyframe);
    assert_eq!(sink.frames[1].2, DcFrameKind::Anchor);
    assert!((sink.frames[6].1 - 20.0).abs() < 1e-12);

    sink.frames.clear();
    sink.stop_at = Some(2);
    let user = &mut sink as *mut Collected as *mut c_void;
    assert_eq!(unsafe { dc_synthesize(input, f, c, 2, 3, 10.0, Some(collect), user) }, DcStatus::Aborted);
    assert_eq!(sink.frames.len(), 3);
    assert_eq!(
        unsafe { dc_synthesize(input, f, c, 1, 4, 10.0, Some(collect), user) },
        DcStatus::InvalidArgument
    );

    let missing = CString::new(dir.path().join("none.ckpt").to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { dc_model_load(missing.as_ptr(), &mut m) }, DcStatus::Io);
    unsafe {
        dc_image_free(input);
        dc_image_free(next);
        dc_model_free(f);
        dc_model_free(c);
    }
}

#[test]
fn png_io() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("a.png").to_str().unwrap()).unwrap();
    let img = image(16, texture);
    let mut back = ptr::null_mut();
    unsafe {
        assert_eq!(dc_image_save_png(img, path.as_ptr()), DcStatus::Ok);
        assert_eq!(dc_image_load_png(path.as_ptr(), &mut back), DcStatus::Ok);
        let mut e = 1.0;
        assert_eq!(dc_mse(img, back, &mut e), DcStatus::Ok);
        assert!(e < 1e-4);
        assert_eq!(dc_image_load_png(ptr::null(), &mut back), DcStatus::NullArgument);
        dc_image_free(img);
        dc_image_free(back);
    }
    assert!(!unsafe { CStr::from_ptr(dc_version()) }.to_bytes().is_empty());
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/dyncloud.h");
    assert!(header.is_file());
    let Ok(status) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .status()
    else {
        eprintln!("cc not available; skipping");
        return;
    };
    assert!(status.success());
}
