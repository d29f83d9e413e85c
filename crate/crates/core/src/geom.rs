//! Pinhole camera model, rigid transforms and the warping primitives every
//! other module builds on.
//!
//! Pixel coordinates are continuous with pixel centers at integer
//! coordinates. Poses map points between camera frames: `p_dst = R p_src + t`.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORTHO_TOL: f64 = 1e-9;

/// A continuous pixel coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    /// Nearest integer pixel, used for label and mask lookups.
    pub fn rounded(self) -> (i64, i64) {
        (self.u.round() as i64, self.v.round() as i64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|x| x.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive and finite (fx = {}, fy = {})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidIntrinsics("empty image size".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Bearing with unit z for a pixel: `K^-1 [u, v, 1]`.
    pub fn ray(&self, p: Pixel) -> Vector3<f64> {
        Vector3::new((p.u - self.cx) / self.fx, (p.v - self.cy) / self.fy, 1.0)
    }

    /// True if the pixel lies within `[0, w-1] x [0, h-1]`.
    pub fn contains(&self, p: Pixel) -> bool {
        p.u >= 0.0 && p.v >= 0.0 && p.u <= (self.width - 1) as f64 && p.v <= (self.height - 1) as f64
    }
}

/// Rigid transform with an orthonormal rotation matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|x| x.is_finite()) {
            return Err(Error::InvalidPose("non-finite entries".into()));
        }
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if err > ORTHO_TOL {
            return Err(Error::InvalidPose(format!("rotation not orthonormal (error {err:e})")));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::InvalidPose(format!("rotation determinant {det}")));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub(crate) fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Same pose with the rotation projected back onto SO(3).
    pub fn renormalized(&self) -> Pose {
        Pose {
            rotation: *UnitQuaternion::from_matrix(&self.rotation).to_rotation_matrix().matrix(),
            translation: self.translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation from an axis-angle vector, then translation.
    pub fn from_axis_angle(omega: Vector3<f64>, t: Vector3<f64>) -> Self {
        Self {
            rotation: *Rotation3::new(omega).matrix(),
            translation: t,
        }
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>, t: Vector3<f64>) -> Self {
        Self {
            rotation: *q.to_rotation_matrix().matrix(),
            translation: t,
        }
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Same rotation, translation multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Pose {
        Pose {
            rotation: self.rotation,
            translation: self.translation * s,
        }
    }

    /// SE(3) exponential of a tangent vector `[omega; rho]`.
    pub fn exp(xi: &Vector6<f64>) -> Pose {
        let omega = Vector3::new(xi[0], xi[1], xi[2]);
        let rho = Vector3::new(xi[3], xi[4], xi[5]);
        let theta2 = omega.norm_squared();
        let theta = theta2.sqrt();
        let w = skew(&omega);
        let v = if theta < 1e-8 {
            Matrix3::identity() + w * 0.5 + w * w / 6.0
        } else {
            Matrix3::identity()
                + w * ((1.0 - theta.cos()) / theta2)
                + w * w * ((theta - theta.sin()) / (theta2 * theta))
        };
        Pose {
            rotation: *Rotation3::new(omega).matrix(),
            translation: v * rho,
        }
    }

    /// Rotation angle in radians.
    pub fn rotation_angle(&self) -> f64 {
        let r = &self.rotation;
        let c = (r.trace() - 1.0) * 0.5;
        let s = 0.5 * Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm();
        s.atan2(c)
    }

    /// Camera center for a world-to-camera pose.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }
}

pub(crate) fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Pinhole projection of a camera-frame point.
pub fn project(p_cam: &Vector3<f64>, k: &CameraIntrinsics) -> Result<Pixel> {
    if !(p_cam.z > 0.0) {
        return Err(Error::BehindCamera { z: p_cam.z });
    }
    Ok(Pixel::new(
        k.fx * p_cam.x / p_cam.z + k.cx,
        k.fy * p_cam.y / p_cam.z + k.cy,
    ))
}

pub fn backproject(p: Pixel, depth: f64, k: &CameraIntrinsics) -> Result<Vector3<f64>> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::InvalidDepth(depth));
    }
    Ok(k.ray(p) * depth)
}

/// Result of warping a pixel into another view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Warped {
    pub pixel: Pixel,
    pub depth: f64,
    /// Whether `pixel` falls inside the target image. Out-of-bounds pixels are
    /// reported unclamped.
    pub in_bounds: bool,
}

/// Moves `pixel` observed at `depth` through `t` and reprojects it.
pub fn warp_pixel(pixel: Pixel, depth: f64, t: &Pose, k: &CameraIntrinsics) -> Result<Warped> {
    let p = t.transform(&backproject(pixel, depth, k)?);
    let q = project(&p, k)?;
    Ok(Warped {
        pixel: q,
        depth: p.z,
        in_bounds: k.contains(q),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k100() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 101, 101).unwrap()
    }

    #[test]
    fn project_examples() {
        let k = k100();
        assert_eq!(project(&Vector3::new(0.0, 0.0, 2.0), &k).unwrap(), Pixel::new(50.0, 50.0));
        assert_eq!(project(&Vector3::new(1.0, 0.0, 2.0), &k).unwrap(), Pixel::new(100.0, 50.0));
        assert_eq!(project(&Vector3::new(0.0, -1.0, 2.0), &k).unwrap(), Pixel::new(50.0, 0.0));
        assert!(matches!(
            project(&Vector3::new(0.0, 0.0, 0.0), &k),
            Err(Error::BehindCamera { .. })
        ));
    }

    #[test]
    fn backproject_examples() {
        let k = k100();
        assert_eq!(backproject(Pixel::new(50.0, 50.0), 2.0, &k).unwrap(), Vector3::new(0.0, 0.0, 2.0));
        assert_eq!(backproject(Pixel::new(100.0, 50.0), 2.0, &k).unwrap(), Vector3::new(1.0, 0.0, 2.0));
        assert!(matches!(backproject(Pixel::new(1.0, 1.0), 0.0, &k), Err(Error::InvalidDepth(_))));
        assert!(backproject(Pixel::new(1.0, 1.0), f64::NAN, &k).is_err());
        assert!(backproject(Pixel::new(1.0, 1.0), f64::INFINITY, &k).is_err());
    }

    #[test]
    fn warp_examples() {
        let k = k100();
        let p = Pixel::new(37.25, 61.5);
        let w = warp_pixel(p, 3.5, &Pose::identity(), &k).unwrap();
        assert_eq!((w.pixel, w.depth), (p, 3.5));

        let t = Pose::from_translation(Vector3::new(0.0, 0.0, -1.0));
        let w = warp_pixel(Pixel::new(50.0, 50.0), 2.0, &t, &k).unwrap();
        assert_eq!((w.pixel, w.depth), (Pixel::new(50.0, 50.0), 1.0));

        let t = Pose::from_translation(Vector3::new(0.0, 0.0, -3.0));
        let w = warp_pixel(Pixel::new(50.0, 50.0), 2.0, &t, &k);
        assert!(matches!(w, Err(Error::BehindCamera { .. })));

        let t = Pose::from_translation(Vector3::new(-10.0, 0.0, 0.0));
        let w = warp_pixel(Pixel::new(50.0, 50.0), 2.0, &t, &k).unwrap();
        assert!(!w.in_bounds);
        assert_eq!(w.pixel.u, -450.0);
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 0.0, 3.9, 4, 4).is_ok());
    }

    #[test]
    fn pose_rejects_non_rotation() {
        let mut r = Matrix3::identity();
        r[(0, 0)] = -1.0;
        assert!(Pose::new(r, Vector3::zeros()).is_err());
        assert!(Pose::new(Matrix3::identity() * 1.01, Vector3::zeros()).is_err());
    }

    #[test]
    fn exp_of_pure_rotation_matches_rodrigues() {
        let xi = Vector6::new(0.1, -0.2, 0.3, 0.0, 0.0, 0.0);
        let p = Pose::exp(&xi);
        let r = Rotation3::new(Vector3::new(0.1, -0.2, 0.3));
        assert!((p.rotation() - r.matrix()).abs().max() < 1e-15);
        let small = Pose::exp(&Vector6::new(1e-10, 0.0, 0.0, 1.0, 2.0, 3.0));
        assert!((small.translation() - Vector3::new(1.0, 2.0, 3.0)).norm() < 1e-9);
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (prop::array::uniform3(-3.0..3.0f64), prop::array::uniform3(-5.0..5.0f64))
            .prop_map(|(w, t)| Pose::from_axis_angle(Vector3::from(w), Vector3::from(t)))
    }

    proptest! {
        #[test]
        fn compose_with_inverse_is_identity(p in arb_pose()) {
            let id = p.compose(&p.inverse());
            prop_assert!((id.rotation() - Matrix3::identity()).abs().max() < 1e-9);
            prop_assert!(id.translation().norm() < 1e-9);
            prop_assert!(Pose::new(*id.rotation(), *id.translation()).is_ok());
        }

        #[test]
        fn compose_is_associative(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!((l.rotation() - r.rotation()).abs().max() < 1e-9);
            prop_assert!((l.translation() - r.translation()).norm() < 1e-9);
        }

        #[test]
        fn backproject_project_roundtrip(u in 0.0..100.0f64, v in 0.0..100.0f64, d in 0.01..100.0f64) {
            let k = k100();
            let q = project(&backproject(Pixel::new(u, v), d, &k).unwrap(), &k).unwrap();
            prop_assert!((q.u - u).abs() < 1e-9 && (q.v - v).abs() < 1e-9);
            prop_assert_eq!(backproject(Pixel::new(u, v), d, &k).unwrap().z, d);
        }

        #[test]
        fn identity_warp_is_identity(u in 0.0..100.0f64, v in 0.0..100.0f64, d in 0.01..100.0f64) {
            let k = k100();
            let w = warp_pixel(Pixel::new(u, v), d, &Pose::identity(), &k).unwrap();
            prop_assert!((w.pixel.u - u).abs() < 1e-9 && (w.pixel.v - v).abs() < 1e-9);
            prop_assert!((w.depth - d).abs() < 1e-12);
        }
    }
}
