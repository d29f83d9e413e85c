//! Two-view triangulation of matched pixels into sparse depth samples.

use std::collections::HashSet;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, Pixel, Pose};

/// Minimum angle between the two rays, in radians.
pub const MIN_RAY_ANGLE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    /// Pixel in the earlier frame (t-1).
    pub a: Pixel,
    /// Pixel in the later frame (t).
    pub b: Pixel,
    pub weight: f64,
}

impl Match {
    pub fn new(a: Pixel, b: Pixel) -> Self {
        Self { a, b, weight: 1.0 }
    }
}

/// Pixel matches between frames `frame_a` (t-1) and `frame_b` (t).
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceSet {
    pub frame_a: u64,
    pub frame_b: u64,
    matches: Vec<Match>,
}

impl CorrespondenceSet {
    pub fn new(frame_a: u64, frame_b: u64, matches: Vec<Match>, k: &CameraIntrinsics) -> Result<Self> {
        let mut seen = HashSet::with_capacity(matches.len());
        for m in &matches {
            for p in [m.a, m.b] {
                if !k.contains(p) {
                    return Err(Error::OutOfBounds { u: p.u, v: p.v });
                }
            }
            if !seen.insert((m.a.u.to_bits(), m.a.v.to_bits())) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate pixel_a entry ({}, {})",
                    m.a.u, m.a.v
                )));
            }
        }
        Ok(Self {
            frame_a,
            frame_b,
            matches,
        })
    }

    pub fn matches(&self) -> &[Match] {
        &self.matches
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparseSample {
    pub pixel: Pixel,
    pub depth: f64,
}

/// Triangulated depth samples for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDepth {
    pub frame: u64,
    samples: Vec<SparseSample>,
}

impl SparseDepth {
    /// Validates positive depths, in-bounds pixels and unique rounded pixels.
    pub fn new(frame: u64, samples: Vec<SparseSample>, width: usize, height: usize) -> Result<Self> {
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            if !(s.depth > 0.0) || !s.depth.is_finite() {
                return Err(Error::InvalidDepth(s.depth));
            }
            let (x, y) = s.pixel.rounded();
            if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
                return Err(Error::OutOfBounds {
                    u: s.pixel.u,
                    v: s.pixel.v,
                });
            }
            if !seen.insert((x, y)) {
                return Err(Error::InvalidArgument(format!("duplicate sample pixel ({x}, {y})")));
            }
        }
        Ok(Self { frame, samples })
    }

    pub fn samples(&self) -> &[SparseSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Midpoint of the common perpendicular between two rays `o + s d`, and the
/// ray parameters `(s1, s2)` of its feet.
pub fn ray_midpoint(
    o1: &Vector3<f64>,
    d1: &Vector3<f64>,
    o2: &Vector3<f64>,
    d2: &Vector3<f64>,
) -> Result<(Vector3<f64>, f64, f64)> {
    let sin = d1.cross(d2).norm() / (d1.norm() * d2.norm());
    if !(sin > MIN_RAY_ANGLE.sin()) {
        return Err(Error::DegenerateGeometry("rays are parallel".into()));
    }
    let n = d1.cross(d2);
    let nn = n.norm_squared();
    let w = o2 - o1;
    let s1 = w.cross(d2).dot(&n) / nn;
    let s2 = w.cross(d1).dot(&n) / nn;
    let p1 = o1 + d1 * s1;
    let p2 = o2 + d2 * s2;
    Ok(((p1 + p2) * 0.5, s1, s2))
}

/// Triangulates a match; `t_ab` maps frame-a coordinates into frame b and the
/// point is returned in frame-b coordinates.
///
/// The point minimizes the summed squared distance to both viewing rays.
pub fn triangulate_two_view(m: &Match, t_ab: &Pose, k: &CameraIntrinsics) -> Result<Vector3<f64>> {
    if t_ab.translation().norm() == 0.0 {
        return Err(Error::DegenerateGeometry("zero baseline".into()));
    }
    let origin_a = *t_ab.translation();
    let dir_a = t_ab.rotation() * k.ray(m.a);
    let dir_b = k.ray(m.b);
    let (x, s_a, s_b) = ray_midpoint(&origin_a, &dir_a, &Vector3::zeros(), &dir_b)?;
    if !(s_a > 0.0 && s_b > 0.0) {
        return Err(Error::Cheirality);
    }
    let in_a = t_ab.inverse().transform(&x);
    if !(x.z > 0.0 && in_a.z > 0.0) {
        return Err(Error::Cheirality);
    }
    Ok(x)
}

/// Sparse depth for frame b plus the number of matches that were dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseBuild {
    pub sparse: SparseDepth,
    pub dropped: usize,
}

pub fn build_sparse_depth(matches: &CorrespondenceSet, t_ab: &Pose, k: &CameraIntrinsics) -> Result<SparseBuild> {
    if matches.is_empty() {
        return Err(Error::EmptyInput("correspondence set"));
    }
    let mut samples = Vec::with_capacity(matches.len());
    let mut seen = HashSet::with_capacity(matches.len());
    let mut dropped = 0;
    for m in matches.matches() {
        match triangulate_two_view(m, t_ab, k) {
            Ok(p) if seen.insert(m.b.rounded()) => samples.push(SparseSample {
                pixel: m.b,
                depth: p.z,
            }),
            _ => dropped += 1,
        }
    }
    if samples.is_empty() {
        return Err(Error::EmptySparseDepth);
    }
    Ok(SparseBuild {
        sparse: SparseDepth {
            frame: matches.frame_b,
            samples,
        },
        dropped,
    })
}
