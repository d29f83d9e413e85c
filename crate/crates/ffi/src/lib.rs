//! C ABI for the depth adaptation library.
//!
//! Every fallible function returns a [`DaStatus`]. On failure the message is
//! available through [`da_last_error`] on the same thread. Buffers are
//! row-major and owned by the caller unless stated otherwise.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use depthadapt::geom::{CameraIntrinsics, Pixel, Pose};
use depthadapt::metrics::depth_metrics;
use depthadapt::net::{decode_net, predict_depth, ToyDepthNet};
use depthadapt::posesolver::{solve_pose, MapPoint, SolverConfig};
use depthadapt::raster::{DepthMap, Image, SegMap};
use depthadapt::sdd::{densify, GridSpec};
use depthadapt::sparse::{triangulate_two_view, Match, SparseDepth, SparseSample};
use depthadapt::Error;
use nalgebra::{Matrix3, Vector3};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Format = 3,
    Io = 4,
    DegenerateGeometry = 5,
    Cheirality = 6,
    EmptyInput = 7,
    Panic = 99,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DaIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

/// Rigid transform `x -> R x + t` with `R` stored row-major.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DaPose {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DaDepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub count: usize,
}

/// Opaque handle to a loaded depth network.
pub struct DaNet {
    net: ToyDepthNet,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> DaStatus {
    match e {
        Error::Format { .. } | Error::Config(_) => DaStatus::Format,
        Error::Io(_) => DaStatus::Io,
        Error::DegenerateGeometry(_) => DaStatus::DegenerateGeometry,
        Error::Cheirality | Error::BehindCamera { .. } => DaStatus::Cheirality,
        Error::EmptyInput(_) | Error::EmptySparseDepth | Error::NoCommonPixels => DaStatus::EmptyInput,
        _ => DaStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (DaStatus, String)>) -> DaStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DaStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DaStatus::Panic
        }
    }
}

fn lib(e: Error) -> (DaStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (DaStatus, String) {
    (DaStatus::NullPointer, format!("{what} is null"))
}

fn arg(msg: impl Into<String>) -> (DaStatus, String) {
    (DaStatus::InvalidArgument, msg.into())
}

unsafe fn read<'a, T>(p: *const T, what: &str) -> Result<&'a T, (DaStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn view<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (DaStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn view_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], (DaStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

fn intrinsics(k: &DaIntrinsics) -> Result<CameraIntrinsics, (DaStatus, String)> {
    CameraIntrinsics::new(k.fx, k.fy, k.cx, k.cy, k.width, k.height).map_err(lib)
}

fn pose_in(p: &DaPose) -> Result<Pose, (DaStatus, String)> {
    Pose::new(Matrix3::from_row_slice(&p.rotation), Vector3::from_row_slice(&p.translation)).map_err(lib)
}

fn pose_to_c(p: &Pose) -> DaPose {
    let r = p.rotation();
    let t = p.translation();
    DaPose {
        rotation: [r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)]],
        translation: [t.x, t.y, t.z],
    }
}

fn pixel_count(width: usize, height: usize) -> Result<usize, (DaStatus, String)> {
    width
        .checked_mul(height)
        .filter(|&n| n > 0)
        .ok_or_else(|| arg(format!("bad image size {width}x{height}")))
}

/// Message of the last failure on this thread, or null if the last call
/// succeeded. The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn da_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

#[no_mangle]
pub extern "C" fn da_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a network from a NET1 file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn da_net_load(path: *const c_char, out: *mut *mut DaNet) -> DaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| arg("path is not UTF-8"))?;
        let bytes = std::fs::read(path).map_err(|e| lib(e.into()))?;
        let net = decode_net(&bytes).map_err(lib)?;
        *out = Box::into_raw(Box::new(DaNet { net }));
        Ok(())
    })
}

/// Loads a network from an in-memory NET1 buffer.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn da_net_load_bytes(data: *const u8, len: usize, out: *mut *mut DaNet) -> DaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let bytes = view(data, len, "data")?;
        let net = decode_net(bytes).map_err(lib)?;
        *out = Box::into_raw(Box::new(DaNet { net }));
        Ok(())
    })
}

/// # Safety
/// `net` must be null or a handle from a `da_net_load*` call not yet freed.
#[no_mangle]
pub unsafe extern "C" fn da_net_free(net: *mut DaNet) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Predicts a depth map for a grayscale image with finite intensities,
/// nominally in `[0, 1]`.
///
/// # Safety
/// `image` and `depth_out` must each hold `width * height` doubles.
#[no_mangle]
pub unsafe extern "C" fn da_net_predict(
    net: *const DaNet,
    image: *const f64,
    width: usize,
    height: usize,
    depth_out: *mut f64,
) -> DaStatus {
    guard(|| {
        let net = read(net, "net")?;
        let n = pixel_count(width, height)?;
        let pixels = view(image, n, "image")?;
        let out = view_mut(depth_out, n, "depth_out")?;
        let img = Image::new(width, height, pixels.to_vec()).map_err(lib)?;
        out.copy_from_slice(predict_depth(&img, &net.net).values());
        Ok(())
    })
}

/// Triangulates one match. `t_ab` maps frame-a coordinates into frame b and
/// the point is written in frame-b coordinates.
///
/// # Safety
/// `k`, `t_ab` and `point_out` (three doubles) must be valid.
#[no_mangle]
pub unsafe extern "C" fn da_triangulate(
    k: *const DaIntrinsics,
    t_ab: *const DaPose,
    u_a: f64,
    v_a: f64,
    u_b: f64,
    v_b: f64,
    point_out: *mut f64,
) -> DaStatus {
    guard(|| {
        let k = intrinsics(read(k, "k")?)?;
        let t = pose_in(read(t_ab, "t_ab")?)?;
        let out = view_mut(point_out, 3, "point_out")?;
        let m = Match::new(Pixel::new(u_a, v_a), Pixel::new(u_b, v_b));
        let p = triangulate_two_view(&m, &t, &k).map_err(lib)?;
        out.copy_from_slice(p.as_slice());
        Ok(())
    })
}

/// Solves the camera pose from `count` world points (xyz triples) and their
/// observed pixels (uv pairs), starting at `init` (identity when null).
///
/// # Safety
/// `points` holds `3 * count` doubles, `pixels` holds `2 * count` doubles.
#[no_mangle]
pub unsafe extern "C" fn da_solve_pose(
    k: *const DaIntrinsics,
    points: *const f64,
    pixels: *const f64,
    count: usize,
    init: *const DaPose,
    pose_out: *mut DaPose,
) -> DaStatus {
    guard(|| {
        let k = intrinsics(read(k, "k")?)?;
        if pose_out.is_null() {
            return Err(null("pose_out"));
        }
        let xyz = view(points, 3 * count, "points")?;
        let uv = view(pixels, 2 * count, "pixels")?;
        let init = match init.as_ref() {
            Some(p) => pose_in(p)?,
            None => Pose::identity(),
        };
        let map: Vec<MapPoint> = xyz
            .chunks_exact(3)
            .enumerate()
            .map(|(index, p)| MapPoint {
                position: Vector3::new(p[0], p[1], p[2]),
                pixel: Pixel::new(0.0, 0.0),
                frame: 0,
                index,
            })
            .collect();
        let obs: Vec<Pixel> = uv.chunks_exact(2).map(|p| Pixel::new(p[0], p[1])).collect();
        let (pose, _) = solve_pose(&map, &obs, &init, &k, &SolverConfig::default()).map_err(lib)?;
        *pose_out = pose_to_c(&pose);
        Ok(())
    })
}

/// Densifies `count` sparse samples (u, v, depth triples) into a dense map
/// using the segmentation labels and a `divisions x divisions` grid. Label 0
/// marks unlabeled pixels.
///
/// # Safety
/// `samples` holds `3 * count` doubles; `labels` and `depth_out` hold
/// `width * height` elements.
#[no_mangle]
pub unsafe extern "C" fn da_densify(
    samples: *const f64,
    count: usize,
    labels: *const u16,
    width: usize,
    height: usize,
    divisions: usize,
    depth_out: *mut f64,
) -> DaStatus {
    guard(|| {
        let n = pixel_count(width, height)?;
        let raw = view(samples, 3 * count, "samples")?;
        let labels = view(labels, n, "labels")?;
        let out = view_mut(depth_out, n, "depth_out")?;
        let samples = raw
            .chunks_exact(3)
            .map(|s| SparseSample {
                pixel: Pixel::new(s[0], s[1]),
                depth: s[2],
            })
            .collect();
        let sparse = SparseDepth::new(0, samples, width, height).map_err(lib)?;
        let seg = SegMap::new(width, height, labels.to_vec(), None).map_err(lib)?;
        let grid = GridSpec::new(divisions, width, height).map_err(lib)?;
        let dense = densify(&sparse, &seg, &grid, None).map_err(lib)?;
        out.copy_from_slice(dense.values());
        Ok(())
    })
}

/// Depth error metrics over pixels where both maps are positive and the
/// ground truth is at most `max_depth`.
///
/// # Safety
/// `pred` and `gt` hold `width * height` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn da_depth_metrics(
    pred: *const f64,
    gt: *const f64,
    width: usize,
    height: usize,
    max_depth: f64,
    out: *mut DaDepthMetrics,
) -> DaStatus {
    guard(|| {
        let n = pixel_count(width, height)?;
        let pred = view(pred, n, "pred")?;
        let gt = view(gt, n, "gt")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let pred = DepthMap::new(width, height, pred.to_vec()).map_err(lib)?;
        let gt = DepthMap::new(width, height, gt.to_vec()).map_err(lib)?;
        let m = depth_metrics(&pred, &gt, max_depth).map_err(lib)?;
        *out = DaDepthMetrics {
            abs_rel: m.abs_rel,
            sq_rel: m.sq_rel,
            rmse: m.rmse,
            delta1: m.delta1,
            delta2: m.delta2,
            delta3: m.delta3,
            count: m.count,
        };
        Ok(())
    })
}
