//! Motion-only camera pose estimation from map points built on pseudo depth.
//!
//! Poses handled here map world coordinates into the camera (`T_cw`).

use nalgebra::{Matrix2x3, Matrix3x6, Matrix6, SymmetricEigen, Vector2, Vector3, Vector6};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{backproject, skew, CameraIntrinsics, Pixel, Pose};
use crate::raster::{DepthMap, MaskMap};

pub const MIN_CORRESPONDENCES: usize = 6;
pub const DEFAULT_HUBER_DELTA: f64 = 1.0;
pub const DEFAULT_MAX_ITERATIONS: usize = 50;
pub const DEFAULT_STEP_TOLERANCE: f64 = 1e-10;
const MAX_HALVINGS: usize = 30;
const SINGULAR_RATIO: f64 = 1e-10;
/// Below this relative model decrease, cost comparisons are dominated by
/// rounding and the Gauss-Newton step is taken as is.
const ROUNDING_DECREASE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapPoint {
    pub position: Vector3<f64>,
    pub pixel: Pixel,
    pub frame: u64,
    /// Position of the source pixel in the list passed to [`init_map_points`].
    pub index: usize,
}

/// Lifts pixels with valid depth into world points: `P_w = T_cw^-1 backproject(p)`.
/// Pixels where `mask` is zero are skipped.
pub fn init_map_points(
    depth: &DepthMap,
    pixels: &[Pixel],
    t_cam_world: &Pose,
    k: &CameraIntrinsics,
    mask: Option<&MaskMap>,
    frame: u64,
) -> Result<Vec<MapPoint>> {
    let t_world_cam = t_cam_world.inverse();
    let mut out = Vec::with_capacity(pixels.len());
    for (index, &pixel) in pixels.iter().enumerate() {
        if mask.is_some_and(|m| m.at(pixel) == Some(0.0)) {
            continue;
        }
        let (x, y) = pixel.rounded();
        if x < 0 || y < 0 || x as usize >= depth.width() || y as usize >= depth.height() {
            continue;
        }
        let d = depth.get(x as usize, y as usize);
        let Ok(p_cam) = backproject(pixel, d, k) else {
            continue;
        };
        out.push(MapPoint {
            position: t_world_cam.transform(&p_cam),
            pixel,
            frame,
            index,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("map points"));
    }
    Ok(out)
}

/// `e = p_uv - pi(T P_w)`.
pub fn residual_e(point: &MapPoint, observation: Pixel, t: &Pose, k: &CameraIntrinsics) -> Result<Vector2<f64>> {
    let y = t.transform(&point.position);
    if !(y.z > 0.0) {
        return Err(Error::BehindCamera { z: y.z });
    }
    Ok(Vector2::new(
        observation.u - (k.fx * y.x / y.z + k.cx),
        observation.v - (k.fy * y.y / y.z + k.cy),
    ))
}

/// Stereo-style residual whose third row depends on the depth scale `s`.
pub fn residual_es(
    point: &MapPoint,
    observation: Pixel,
    u_right: f64,
    t: &Pose,
    k: &CameraIntrinsics,
    baseline: f64,
    scale: f64,
) -> Result<Vector3<f64>> {
    let y = t.transform(&point.position);
    if !(y.z > 0.0) {
        return Err(Error::BehindCamera { z: y.z });
    }
    Ok(Vector3::new(
        observation.u - (k.fx * y.x / y.z + k.cx),
        observation.v - (k.fy * y.y / y.z + k.cy),
        u_right - (k.fx * (scale * y.x - baseline) / (scale * y.z) + k.cx),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub huber_delta: f64,
    pub max_iterations: usize,
    pub step_tolerance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            huber_delta: DEFAULT_HUBER_DELTA,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            step_tolerance: DEFAULT_STEP_TOLERANCE,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
    /// Points in front of the camera at the initial pose.
    pub points_used: usize,
    /// Cost after every accepted iteration, starting with the initial cost.
    pub costs: Vec<f64>,
}

fn huber(r2: f64, delta: f64) -> f64 {
    let r = r2.sqrt();
    if r <= delta {
        0.5 * r2
    } else {
        delta * (r - 0.5 * delta)
    }
}

fn huber_weight(r2: f64, delta: f64) -> f64 {
    let r = r2.sqrt();
    if r <= delta {
        1.0
    } else {
        delta / r
    }
}

/// Robust cost over the active pairs, `None` if any active point falls
/// behind the camera.
fn cost(points: &[MapPoint], obs: &[Pixel], active: &[bool], t: &Pose, k: &CameraIntrinsics, delta: f64) -> Option<f64> {
    let terms: Vec<Option<f64>> = points
        .par_iter()
        .zip(obs.par_iter())
        .zip(active.par_iter())
        .map(|((p, &o), &a)| {
            if !a {
                return Some(0.0);
            }
            residual_e(p, o, t, k).ok().map(|e| huber(e.norm_squared(), delta))
        })
        .collect();
    terms.into_iter().sum()
}

fn jacobian(y: &Vector3<f64>, k: &CameraIntrinsics) -> nalgebra::Matrix2x6<f64> {
    let iz = 1.0 / y.z;
    let dpi = Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * y.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * y.y * iz * iz,
    );
    let mut dy = Matrix3x6::zeros();
    dy.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(y)));
    dy.fixed_view_mut::<3, 3>(0, 3).copy_from(&nalgebra::Matrix3::identity());
    -(dpi * dy)
}

fn normal_equations(
    points: &[MapPoint],
    obs: &[Pixel],
    active: &[bool],
    t: &Pose,
    k: &CameraIntrinsics,
    delta: f64,
) -> (Matrix6<f64>, Vector6<f64>) {
    let parts: Vec<(Matrix6<f64>, Vector6<f64>)> = points
        .par_iter()
        .zip(obs.par_iter())
        .zip(active.par_iter())
        .map(|((p, &o), &a)| {
            if !a {
                return (Matrix6::zeros(), Vector6::zeros());
            }
            let y = t.transform(&p.position);
            let e = Vector2::new(o.u - (k.fx * y.x / y.z + k.cx), o.v - (k.fy * y.y / y.z + k.cy));
            let w = huber_weight(e.norm_squared(), delta);
            let j = jacobian(&y, k);
            (j.transpose() * j * w, j.transpose() * e * w)
        })
        .collect();
    parts
        .into_iter()
        .fold((Matrix6::zeros(), Vector6::zeros()), |(h, g), (hi, gi)| (h + hi, g + gi))
}

/// Gauss-Newton on SE(3) with left-multiplicative updates and a Huber kernel.
/// A step that raises the cost is halved until it does not.
pub fn solve_pose(
    points: &[MapPoint],
    observations: &[Pixel],
    t_init: &Pose,
    k: &CameraIntrinsics,
    cfg: &SolverConfig,
) -> Result<(Pose, SolveReport)> {
    if points.len() != observations.len() {
        return Err(Error::DimensionMismatch {
            expected: (points.len(), 1),
            found: (observations.len(), 1),
        });
    }
    let active: Vec<bool> = points.iter().map(|p| t_init.transform(&p.position).z > 0.0).collect();
    let n_active = active.iter().filter(|a| **a).count();
    if n_active < MIN_CORRESPONDENCES {
        return Err(Error::InsufficientCorrespondences {
            requested: MIN_CORRESPONDENCES,
            available: n_active,
        });
    }
    let delta = cfg.huber_delta;
    let mut t = *t_init;
    let initial_cost = cost(points, observations, &active, &t, k, delta).expect("active points are in front");
    let mut current = initial_cost;
    let mut costs = vec![initial_cost];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iterations {
        let (h, g) = normal_equations(points, observations, &active, &t, k, delta);
        let eig = SymmetricEigen::new(h).eigenvalues;
        let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v.abs())));
        if !(hi > 0.0) || lo <= SINGULAR_RATIO * hi {
            return Err(Error::DegenerateGeometry("singular normal equations".into()));
        }
        let step = match h.cholesky() {
            Some(c) => -c.solve(&g),
            None => return Err(Error::DegenerateGeometry("normal equations not positive definite".into())),
        };
        if step.norm() < cfg.step_tolerance {
            converged = true;
            break;
        }
        iterations += 1;
        let predicted_decrease = -0.5 * g.dot(&step);
        if predicted_decrease <= ROUNDING_DECREASE * current {
            let cand = Pose::exp(&step).compose(&t);
            if let Some(c) = cost(points, observations, &active, &cand, k, delta) {
                t = cand;
                current = c;
                costs.push(c);
                continue;
            }
        }
        let mut scaled = step;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand = Pose::exp(&scaled).compose(&t);
            if let Some(c) = cost(points, observations, &active, &cand, k, delta) {
                if c <= current {
                    accepted = Some((cand, c));
                    break;
                }
            }
            scaled *= 0.5;
            if scaled.norm() < cfg.step_tolerance {
                break;
            }
        }
        match accepted {
            Some((cand, c)) => {
                t = cand;
                current = c;
                costs.push(c);
            }
            None => {
                converged = true;
                break;
            }
        }
    }
    Ok((
        t,
        SolveReport {
            iterations,
            initial_cost,
            final_cost: current,
            converged,
            points_used: n_active,
            costs,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k100() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 101, 101).unwrap()
    }

    fn point(p: Vector3<f64>) -> MapPoint {
        MapPoint {
            position: p,
            pixel: Pixel::new(0.0, 0.0),
            frame: 0,
            index: 0,
        }
    }

    fn observe(points: &[MapPoint], t: &Pose, k: &CameraIntrinsics) -> Vec<Pixel> {
        points
            .iter()
            .map(|p| crate::geom::project(&t.transform(&p.position), k).unwrap())
            .collect()
    }

    fn cloud(seed: u64, n: usize) -> Vec<MapPoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                point(Vector3::new(
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(4.0..12.0),
                ))
            })
            .collect()
    }

    #[test]
    fn init_examples() {
        let k = k100();
        let d = DepthMap::constant(101, 101, 2.0);
        let px = [Pixel::new(50.0, 50.0), Pixel::new(60.0, 50.0)];
        let pts = init_map_points(&d, &px, &Pose::identity(), &k, None, 3).unwrap();
        assert_eq!(pts[0].position, Vector3::new(0.0, 0.0, 2.0));
        assert_eq!(pts[0].frame, 3);
        let mut m = vec![1.0; 101 * 101];
        m[50 * 101 + 50] = 0.0;
        let mask = MaskMap::new(101, 101, m).unwrap();
        let pts = init_map_points(&d, &px, &Pose::identity(), &k, Some(&mask), 0).unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0].index, 1);
        let t = Pose::from_axis_angle(Vector3::new(0.1, -0.2, 0.05), Vector3::new(0.3, 0.1, -0.4));
        let pts = init_map_points(&d, &px, &t, &k, None, 0).unwrap();
        let back = t.transform(&pts[1].position);
        assert!((back - Vector3::new(0.2, 0.0, 2.0)).norm() < 1e-12);
        assert!(init_map_points(&DepthMap::invalid(101, 101), &px, &t, &k, None, 0).is_err());
    }

    #[test]
    fn residual_examples() {
        let k = k100();
        let p = point(Vector3::new(0.5, -0.25, 3.0));
        let t = Pose::from_axis_angle(Vector3::new(0.02, 0.01, 0.0), Vector3::new(0.1, 0.0, 0.2));
        let obs = crate::geom::project(&t.transform(&p.position), &k).unwrap();
        assert_eq!(residual_e(&p, obs, &t, &k).unwrap(), Vector2::zeros());
        let moved = Pixel::new(obs.u + 1.0, obs.v);
        assert!((residual_e(&p, moved, &t, &k).unwrap().norm() - 1.0).abs() < 1e-12);
        let behind = point(Vector3::new(0.0, 0.0, -1.0));
        assert!(matches!(residual_e(&behind, obs, &Pose::identity(), &k), Err(Error::BehindCamera { .. })));
    }

    #[test]
    fn residual_scale_invariance_is_exact() {
        let k = k100();
        let t = Pose::from_axis_angle(Vector3::new(0.1, 0.05, -0.02), Vector3::new(0.25, -0.5, 0.75));
        let p = point(Vector3::new(0.5, -0.25, 3.0));
        let obs = Pixel::new(61.0, 40.5);
        let s = 4.0;
        let ps = point(p.position * s);
        let ts = t.scaled(s);
        assert_eq!(residual_e(&p, obs, &t, &k).unwrap(), residual_e(&ps, obs, &ts, &k).unwrap());
    }

    #[test]
    fn stereo_residual_examples() {
        let k = k100();
        let t = Pose::identity();
        let p = point(Vector3::new(0.4, 0.2, 2.0));
        let obs = Pixel::new(70.0, 60.0);
        let r = residual_es(&p, obs, 70.0, &t, &k, 0.0, 1.0).unwrap();
        assert_eq!(r.z, r.x);
        let (b, s) = (0.5, 1.0);
        let u_r = k.fx * (s * 0.4 - b) / (s * 2.0) + k.cx;
        let r = residual_es(&p, obs, u_r, &t, &k, b, s).unwrap();
        assert_eq!(r, Vector3::new(0.0, 0.0, 0.0));
        // fx (5x - b) / (5z): 100 (2 - 0.5) / 10 + 50 = 65 versus 45 at s = 1.
        let r5 = residual_es(&p, obs, u_r, &t, &k, b, 5.0).unwrap();
        assert_eq!((r5.x, r5.y), (r.x, r.y));
        assert!((r5.z - (u_r - 65.0)).abs() < 1e-12);
        assert!((u_r - 45.0).abs() < 1e-12);
    }

    #[test]
    fn recovers_ground_truth_from_identity() {
        let k = k100();
        let pts = cloud(1, 60);
        let truth = Pose::from_axis_angle(Vector3::new(0.3, -0.25, 0.2), Vector3::new(1.2, -0.6, 1.0));
        assert!(truth.rotation_angle() <= 0.5);
        let obs = observe(&pts, &truth, &k);
        let (est, report) = solve_pose(&pts, &obs, &Pose::identity(), &k, &SolverConfig::default()).unwrap();
        assert!(report.converged);
        assert!(est.inverse().compose(&truth).rotation_angle() < 1e-6);
        assert!((est.translation() - truth.translation()).norm() < 1e-6);
        assert!(report.final_cost <= report.initial_cost);
        assert_eq!(report.costs.len(), report.iterations + 1);
    }

    #[test]
    fn cost_never_increases() {
        let k = k100();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
            let pts = cloud(seed, 30);
            let truth = Pose::from_axis_angle(Vector3::new(0.4, -0.3, 0.1), Vector3::new(1.5, 0.5, -1.0));
            let obs: Vec<Pixel> = observe(&pts, &truth, &k)
                .into_iter()
                .map(|p| Pixel::new(p.u + rng.random_range(-3.0..3.0), p.v + rng.random_range(-3.0..3.0)))
                .collect();
            let Ok((_, report)) = solve_pose(&pts, &obs, &Pose::identity(), &k, &SolverConfig::default()) else {
                continue;
            };
            for w in report.costs.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn consistent_start_returns_input() {
        let k = k100();
        let pts = cloud(2, 20);
        let t = Pose::from_axis_angle(Vector3::new(0.0, 0.1, 0.0), Vector3::new(0.1, 0.0, 0.0));
        let obs = observe(&pts, &t, &k);
        let (est, report) = solve_pose(&pts, &obs, &t, &k, &SolverConfig::default()).unwrap();
        assert_eq!(report.iterations, 0);
        assert!(report.converged);
        assert_eq!(est, t);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let k = k100();
        let line: Vec<MapPoint> = (0..10).map(|i| point(Vector3::new(0.2 * i as f64, 0.1 * i as f64, 5.0 + 0.5 * i as f64))).collect();
        let obs = observe(&line, &Pose::identity(), &k);
        let shifted: Vec<Pixel> = obs.iter().map(|p| Pixel::new(p.u + 1.0, p.v)).collect();
        assert!(matches!(
            solve_pose(&line, &shifted, &Pose::identity(), &k, &SolverConfig::default()),
            Err(Error::DegenerateGeometry(_))
        ));
        let few = cloud(3, 5);
        let obs = observe(&few, &Pose::identity(), &k);
        assert!(matches!(
            solve_pose(&few, &obs, &Pose::identity(), &k, &SolverConfig::default()),
            Err(Error::InsufficientCorrespondences { .. })
        ));
    }

    #[test]
    fn outliers_are_tolerated() {
        let k = k100();
        let pts = cloud(4, 80);
        let truth = Pose::from_axis_angle(Vector3::new(0.05, 0.1, -0.05), Vector3::new(0.3, 0.1, 0.2));
        let mut obs = observe(&pts, &truth, &k);
        for o in obs.iter_mut().step_by(10) {
            o.u += 25.0;
        }
        let (est, _) = solve_pose(&pts, &obs, &Pose::identity(), &k, &SolverConfig::default()).unwrap();
        assert!((est.translation() - truth.translation()).norm() < 0.05);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn scale_covariance(seed in 0u64..10_000, s in 0.2..8.0f64) {
            let k = k100();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = cloud(seed, 40);
            let truth = Pose::from_axis_angle(
                Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)),
                Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5), rng.random_range(-1.0..1.0)),
            );
            let obs: Vec<Pixel> = observe(&pts, &truth, &k)
                .into_iter()
                .map(|p| Pixel::new(p.u + rng.random_range(-0.5..0.5), p.v + rng.random_range(-0.5..0.5)))
                .collect();
            let scaled: Vec<MapPoint> = pts.iter().map(|p| point(p.position * s)).collect();
            let cfg = SolverConfig::default();
            let (a, _) = solve_pose(&pts, &obs, &Pose::identity(), &k, &cfg).unwrap();
            let (b, _) = solve_pose(&scaled, &obs, &Pose::identity(), &k, &cfg).unwrap();
            prop_assert!((a.rotation() - b.rotation()).abs().max() < 1e-9);
            let rel = (b.translation() - a.translation() * s).norm() / (a.translation() * s).norm().max(1e-12);
            prop_assert!(rel < 1e-9, "relative translation error {}", rel);
        }
    }
}
