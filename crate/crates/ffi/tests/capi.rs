use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use depthadapt::net::{encode_net, NetConfig, ToyDepthNet};
use depthadapt_ffi::*;

const K: DaIntrinsics = DaIntrinsics {
    fx: 50.0,
    fy: 50.0,
    cx: 32.0,
    cy: 24.0,
    width: 64,
    height: 48,
};

fn identity() -> DaPose {
    DaPose {
        rotation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        translation: [0.0; 3],
    }
}

fn last_error() -> String {
    let p = da_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn project(p: [f64; 3]) -> (f64, f64) {
    (K.fx * p[0] / p[2] + K.cx, K.fy * p[1] / p[2] + K.cy)
}

#[test]
fn triangulates_exact_point_and_reports_degenerate_rays() {
    let mut t = identity();
    t.translation = [-0.5, 0.0, 0.0];
    let truth = [0.4, -0.3, 6.0];
    let (ub, vb) = project(truth);
    let (ua, va) = project([truth[0] + 0.5, truth[1], truth[2]]);
    let mut out = [0.0; 3];
    let s = unsafe { da_triangulate(&K, &t, ua, va, ub, vb, out.as_mut_ptr()) };
    assert_eq!(s, DaStatus::Ok);
    assert!(da_last_error().is_null());
    for (a, b) in out.iter().zip(truth) {
        assert!((a - b).abs() < 1e-9);
    }
    let s = unsafe { da_triangulate(&K, &t, 30.0, 20.0, 30.0, 20.0, out.as_mut_ptr()) };
    assert_eq!(s, DaStatus::DegenerateGeometry);
    assert!(last_error().contains("parallel"));
}

#[test]
fn null_pointers_are_rejected() {
    let mut out = [0.0; 3];
    let s = unsafe { da_triangulate(ptr::null(), &identity(), 0.0, 0.0, 1.0, 1.0, out.as_mut_ptr()) };
    assert_eq!(s, DaStatus::NullPointer);
    assert_eq!(last_error(), "k is null");
    let s = unsafe { da_net_load_bytes(b"NET1".as_ptr(), 4, ptr::null_mut()) };
    assert_eq!(s, DaStatus::NullPointer);
    unsafe { da_net_free(ptr::null_mut()) };
}

#[test]
fn solves_pose_from_identity() {
    let angle: f64 = 0.2;
    let truth = DaPose {
        rotation: [angle.cos(), 0.0, angle.sin(), 0.0, 1.0, 0.0, -angle.sin(), 0.0, angle.cos()],
        translation: [0.3, -0.1, 0.5],
    };
    let mut points = Vec::new();
    let mut pixels = Vec::new();
    for i in 0..40 {
        let p = [(i % 8) as f64 - 3.5, (i / 8) as f64 - 2.0, 8.0 + (i % 3) as f64];
        let r = &truth.rotation;
        let c = [
            r[0] * p[0] + r[1] * p[1] + r[2] * p[2] + truth.translation[0],
            r[3] * p[0] + r[4] * p[1] + r[5] * p[2] + truth.translation[1],
            r[6] * p[0] + r[7] * p[1] + r[8] * p[2] + truth.translation[2],
        ];
        let (u, v) = project(c);
        points.extend_from_slice(&p);
        pixels.extend_from_slice(&[u, v]);
    }
    let mut est = identity();
    let s = unsafe { da_solve_pose(&K, points.as_ptr(), pixels.as_ptr(), 40, ptr::null(), &mut est) };
    assert_eq!(s, DaStatus::Ok, "{}", last_error());
    for (a, b) in est.rotation.iter().zip(truth.rotation) {
        assert!((a - b).abs() < 1e-8);
    }
    for (a, b) in est.translation.iter().zip(truth.translation) {
        assert!((a - b).abs() < 1e-8);
    }
}

#[test]
fn densify_fills_every_labeled_pixel() {
    let (w, h) = (8usize, 6usize);
    let labels = vec![3u16; w * h];
    let samples = [1.0, 1.0, 2.0, 6.0, 4.0, 4.0];
    let mut out = vec![0.0; w * h];
    let s = unsafe { da_densify(samples.as_ptr(), 2, labels.as_ptr(), w, h, 2, out.as_mut_ptr()) };
    assert_eq!(s, DaStatus::Ok, "{}", last_error());
    assert_eq!(out[0], 2.0);
    assert_eq!(out[w * h - 1], 4.0);
    assert!(out.iter().all(|&d| d > 0.0));
    let s = unsafe { da_densify(samples.as_ptr(), 2, labels.as_ptr(), w, h, 0, out.as_mut_ptr()) };
    assert_eq!(s, DaStatus::InvalidArgument);
    assert!(last_error().contains("grid"));
}

#[test]
fn metrics_of_doubled_prediction() {
    let gt: Vec<f64> = (1..=12).map(f64::from).collect();
    let pred: Vec<f64> = gt.iter().map(|d| 2.0 * d).collect();
    let mut m = DaDepthMetrics::default();
    let s = unsafe { da_depth_metrics(pred.as_ptr(), gt.as_ptr(), 4, 3, 80.0, &mut m) };
    assert_eq!(s, DaStatus::Ok);
    assert_eq!(m.abs_rel, 1.0);
    assert_eq!(m.delta1, 0.0);
    assert_eq!(m.count, 12);
    let s = unsafe { da_depth_metrics(pred.as_ptr(), gt.as_ptr(), 0, 3, 80.0, &mut m) };
    assert_eq!(s, DaStatus::InvalidArgument);
}

#[test]
fn net_handle_predicts_like_the_library() {
    let mut net = ToyDepthNet::random(&NetConfig {
        hidden: vec![8, 8],
        rank: 1,
        seed: 2,
    });
    net.freeze();
    let bytes = encode_net(&net);
    let mut handle: *mut DaNet = ptr::null_mut();
    assert_eq!(unsafe { da_net_load_bytes(bytes.as_ptr(), bytes.len(), &mut handle) }, DaStatus::Ok);
    assert!(!handle.is_null());
    let (w, h) = (16usize, 12usize);
    let image: Vec<f64> = (0..w * h).map(|i| ((i * 37) % 100) as f64 / 100.0).collect();
    let mut depth = vec![0.0; w * h];
    assert_eq!(unsafe { da_net_predict(handle, image.as_ptr(), w, h, depth.as_mut_ptr()) }, DaStatus::Ok);
    let img = depthadapt::raster::Image::new(w, h, image.clone()).unwrap();
    assert_eq!(depth, depthadapt::net::predict_depth(&img, &net).values());
    let bad = vec![f64::NAN; w * h];
    assert_eq!(unsafe { da_net_predict(handle, bad.as_ptr(), w, h, depth.as_mut_ptr()) }, DaStatus::InvalidArgument);
    unsafe { da_net_free(handle) };

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.bin");
    std::fs::write(&path, &bytes).unwrap();
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle: *mut DaNet = ptr::null_mut();
    assert_eq!(unsafe { da_net_load(c_path.as_ptr(), &mut handle) }, DaStatus::Ok);
    unsafe { da_net_free(handle) };
    std::fs::write(&path, &bytes[..10]).unwrap();
    assert_eq!(unsafe { da_net_load(c_path.as_ptr(), &mut handle) }, DaStatus::Format);
    assert!(last_error().contains("byte offset"));
    let missing = CString::new(dir.path().join("nope.bin").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { da_net_load(missing.as_ptr(), &mut handle) }, DaStatus::Io);
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(da_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/depthadapt.h");
    let text = std::fs::read_to_string(header).unwrap();
    for name in ["da_net_load", "da_net_predict", "da_net_free", "da_triangulate", "da_solve_pose", "da_densify", "da_depth_metrics", "da_last_error"] {
        assert!(text.contains(&format!("{name}(")), "{name} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"depthadapt.h\"\nint main(void) {\n  DaIntrinsics k = {50, 50, 32, 24, 64, 48};\n  DaPose t = {{1,0,0,0,1,0,0,0,1}, {-0.5,0,0}};\n  double p[3];\n  DaStatus s = da_triangulate(&k, &t, 1.0, 2.0, 3.0, 4.0, p);\n  DaNet *net = NULL;\n  da_net_free(net);\n  return s == DA_STATUS_OK ? 0 : 1;\n}\n",
    )
    .unwrap();
    let Ok(out) = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I", concat!(env!("CARGO_MANIFEST_DIR"), "/include")])
        .arg(&src)
        .output()
    else {
        eprintln!("no C compiler found, header only checked textually");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
