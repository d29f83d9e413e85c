//! Depth accuracy and trajectory drift metrics.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geom::Pose;
use crate::raster::{ensure_same_size, DepthMap};

pub const DEFAULT_MAX_DEPTH: f64 = 80.0;
pub const DEFAULT_SEGMENT_LENGTHS: [f64; 4] = [2.0, 4.0, 6.0, 8.0];
const STAMP_TOLERANCE: f64 = 1e-6;

fn gt_valid(g: f64, max_depth: f64) -> bool {
    g > 0.0 && g <= max_depth
}

fn common_pixels<'a>(pred: &'a DepthMap, gt: &'a DepthMap, max_depth: f64) -> impl Iterator<Item = (f64, f64)> + 'a {
    pred.values()
        .iter()
        .zip(gt.values())
        .filter(move |(&p, &g)| p > 0.0 && gt_valid(g, max_depth))
        .map(|(&p, &g)| (p, g))
}

/// Mean-ratio scale `mean(gt) / mean(pred)` over pixels valid in both maps.
pub fn align_scale(pred: &DepthMap, gt: &DepthMap, max_depth: f64) -> Result<f64> {
    ensure_same_size(gt.dims(), pred.dims())?;
    let mut sp = 0.0;
    let mut sg = 0.0;
    let mut n = 0usize;
    for (p, g) in common_pixels(pred, gt, max_depth) {
        sp += p;
        sg += g;
        n += 1;
    }
    if n == 0 {
        return Err(Error::NoCommonPixels);
    }
    Ok(sg / sp)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub count: usize,
}

impl DepthMetrics {
    pub const CSV_HEADER: &'static str = "abs_rel,sq_rel,rmse,delta1,delta2,delta3,count";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{}",
            self.abs_rel, self.sq_rel, self.rmse, self.delta1, self.delta2, self.delta3, self.count
        )
    }

    pub fn report(&self) -> String {
        format!(
            "abs_rel = {:.8e}\nsq_rel = {:.8e}\nrmse = {:.8e}\ndelta1 = {:.8e}\ndelta2 = {:.8e}\ndelta3 = {:.8e}\ncount = {}\n",
            self.abs_rel, self.sq_rel, self.rmse, self.delta1, self.delta2, self.delta3, self.count
        )
    }
}

/// Standard error measures over pixels valid in both maps; `pred` is used as
/// given (align first when needed).
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, max_depth: f64) -> Result<DepthMetrics> {
    ensure_same_size(gt.dims(), pred.dims())?;
    let mut abs_rel = 0.0;
    let mut sq_rel = 0.0;
    let mut sq = 0.0;
    let mut hits = [0usize; 3];
    let mut n = 0usize;
    for (p, g) in common_pixels(pred, gt, max_depth) {
        let d = p - g;
        abs_rel += d.abs() / g;
        sq_rel += d * d / g;
        sq += d * d;
        let ratio = (p / g).max(g / p);
        let mut thr = 1.0;
        for h in hits.iter_mut() {
            thr *= 1.25;
            if ratio < thr {
                *h += 1;
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::NoCommonPixels);
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (sq / nf).sqrt(),
        delta1: hits[0] as f64 / nf,
        delta2: hits[1] as f64 / nf,
        delta3: hits[2] as f64 / nf,
        count: n,
    })
}

/// Scale-aligns `pred` to `gt` and evaluates it; returns the scale used.
pub fn evaluate_depth(pred: &DepthMap, gt: &DepthMap, max_depth: f64) -> Result<(DepthMetrics, f64)> {
    let s = align_scale(pred, gt, max_depth)?;
    let aligned = pred.map(|d| d * s);
    Ok((depth_metrics(&aligned, gt, max_depth)?, s))
}

/// Time-stamped camera-to-world poses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub stamps: Vec<f64>,
    pub poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new(stamps: Vec<f64>, poses: Vec<Pose>) -> Result<Self> {
        if stamps.len() != poses.len() {
            return Err(Error::DimensionMismatch {
                expected: (stamps.len(), 1),
                found: (poses.len(), 1),
            });
        }
        Ok(Self { stamps, poses })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| *p.translation()).collect()
    }
}

/// Similarity transform `y = s R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x * self.scale + self.translation
    }

    /// Applies the transform to a camera-to-world pose.
    pub fn apply_pose(&self, p: &Pose) -> Pose {
        Pose::from_parts(self.rotation * p.rotation(), self.apply(p.translation()))
    }
}

/// Least-squares similarity mapping `src` onto `dst` (Umeyama).
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Similarity> {
    if src.len() != dst.len() {
        return Err(Error::DimensionMismatch {
            expected: (dst.len(), 3),
            found: (src.len(), 3),
        });
    }
    if src.len() < 2 {
        return Err(Error::InsufficientCorrespondences {
            requested: 2,
            available: src.len(),
        });
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let xs = s - mu_s;
        cov += (d - mu_d) * xs.transpose();
        var_s += xs.norm_squared();
    }
    cov /= n;
    var_s /= n;
    if !(var_s > 0.0) {
        return Err(Error::DegenerateGeometry("source positions coincide".into()));
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sgn = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        sgn[(2, 2)] = -1.0;
    }
    let rotation = u * sgn * vt;
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * sgn[(i, i)]).sum();
    let scale = trace / var_s;
    let translation = mu_d - rotation * mu_s * scale;
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

fn check_matched(est: &Trajectory, gt: &Trajectory) -> Result<()> {
    if est.len() != gt.len() {
        return Err(Error::DimensionMismatch {
            expected: (gt.len(), 1),
            found: (est.len(), 1),
        });
    }
    for (a, b) in est.stamps.iter().zip(&gt.stamps) {
        if (a - b).abs() > STAMP_TOLERANCE {
            return Err(Error::InvalidArgument(format!("unmatched timestamps {a} and {b}")));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryMetrics {
    pub ate_rmse: f64,
    /// Mean translational drift in percent.
    pub t_rel: f64,
    /// Mean rotational drift in degrees per 100 m.
    pub r_rel: f64,
    pub scale: f64,
    pub segments: usize,
}

impl TrajectoryMetrics {
    pub const CSV_HEADER: &'static str = "ate_rmse,t_rel,r_rel,scale,segments";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.8e},{:.8e},{:.8e},{:.8e},{}",
            self.ate_rmse, self.t_rel, self.r_rel, self.scale, self.segments
        )
    }

    pub fn report(&self) -> String {
        format!(
            "ate_rmse = {:.8e}\nt_rel = {:.8e}\nr_rel = {:.8e}\nscale = {:.8e}\nsegments = {}\n",
            self.ate_rmse, self.t_rel, self.r_rel, self.scale, self.segments
        )
    }
}

/// RMSE of position errors after aligning `est` onto `gt` with a similarity.
pub fn ate_rmse(est: &Trajectory, gt: &Trajectory) -> Result<(f64, Similarity)> {
    check_matched(est, gt)?;
    let (src, dst) = (est.positions(), gt.positions());
    let sim = umeyama(&src, &dst)?;
    let sq: f64 = src.iter().zip(&dst).map(|(s, d)| (sim.apply(s) - d).norm_squared()).sum();
    Ok(((sq / src.len() as f64).sqrt(), sim))
}

/// Average relative pose error over sub-trajectories of the given path
/// lengths; returns `(t_err per meter, r_err radians per meter, count)`.
fn segment_errors(est: &Trajectory, gt: &Trajectory, lengths: &[f64]) -> (f64, f64, usize) {
    let mut dist = vec![0.0; gt.len()];
    for i in 1..gt.len() {
        dist[i] = dist[i - 1] + (gt.poses[i].translation() - gt.poses[i - 1].translation()).norm();
    }
    let mut t_sum = 0.0;
    let mut r_sum = 0.0;
    let mut count = 0usize;
    for first in 0..gt.len() {
        for &len in lengths {
            let Some(last) = (first..gt.len()).find(|&j| dist[j] >= dist[first] + len) else {
                continue;
            };
            let d_gt = gt.poses[first].inverse().compose(&gt.poses[last]);
            let d_est = est.poses[first].inverse().compose(&est.poses[last]);
            let err = d_gt.inverse().compose(&d_est);
            t_sum += err.translation().norm() / len;
            r_sum += err.rotation_angle() / len;
            count += 1;
        }
    }
    (t_sum, r_sum, count)
}

/// ATE after similarity alignment plus segment drift of the aligned estimate.
pub fn trajectory_metrics(est: &Trajectory, gt: &Trajectory, lengths: &[f64]) -> Result<TrajectoryMetrics> {
    let (ate, sim) = ate_rmse(est, gt)?;
    let aligned = Trajectory {
        stamps: est.stamps.clone(),
        poses: est.poses.iter().map(|p| sim.apply_pose(p)).collect(),
    };
    let (t_sum, r_sum, count) = segment_errors(&aligned, gt, lengths);
    let (t_rel, r_rel) = if count == 0 {
        (0.0, 0.0)
    } else {
        let n = count as f64;
        (100.0 * t_sum / n, (r_sum / n).to_degrees() * 100.0)
    };
    Ok(TrajectoryMetrics {
        ate_rmse: ate,
        t_rel,
        r_rel,
        scale: sim.scale,
        segments: count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(w: usize, h: usize) -> DepthMap {
        DepthMap::new(w, h, (0..w * h).map(|i| 1.0 + 0.1 * i as f64).collect()).unwrap()
    }

    #[test]
    fn scale_examples() {
        let gt = ramp(5, 4);
        assert_eq!(align_scale(&gt, &gt, 80.0).unwrap(), 1.0);
        assert_eq!(align_scale(&gt.map(|d| d / 2.0), &gt, 80.0).unwrap(), 2.0);
        let a = DepthMap::new(2, 1, vec![1.0, 0.0]).unwrap();
        let b = DepthMap::new(2, 1, vec![0.0, 1.0]).unwrap();
        assert!(matches!(align_scale(&a, &b, 80.0), Err(Error::NoCommonPixels)));
    }

    #[test]
    fn depth_metric_examples() {
        let gt = ramp(6, 5);
        let m = depth_metrics(&gt, &gt, 80.0).unwrap();
        assert_eq!((m.abs_rel, m.sq_rel, m.rmse, m.delta1, m.delta2, m.delta3), (0.0, 0.0, 0.0, 1.0, 1.0, 1.0));
        let doubled = gt.map(|d| 2.0 * d);
        let m = depth_metrics(&doubled, &gt, 80.0).unwrap();
        assert!((m.abs_rel - 1.0).abs() < 1e-15);
        assert_eq!(m.delta1, 0.0);
        let (m, s) = evaluate_depth(&doubled, &gt, 80.0).unwrap();
        assert_eq!(s, 0.5);
        assert_eq!(m.abs_rel, 0.0);
        assert_eq!(m.rmse, 0.0);
    }

    #[test]
    fn far_ground_truth_is_excluded() {
        let gt = DepthMap::new(2, 1, vec![10.0, 90.0]).unwrap();
        let pred = DepthMap::new(2, 1, vec![10.0, 1.0]).unwrap();
        let m = depth_metrics(&pred, &gt, DEFAULT_MAX_DEPTH).unwrap();
        assert_eq!((m.count, m.abs_rel), (1, 0.0));
    }

    fn wavy(n: usize) -> Trajectory {
        let poses = (0..n)
            .map(|i| {
                let t = i as f64;
                Pose::from_axis_angle(
                    Vector3::new(0.0, 0.05 * (0.3 * t).sin(), 0.0),
                    Vector3::new(0.4 * t, 0.1 * (0.5 * t).sin(), 0.2 * t),
                )
            })
            .collect();
        Trajectory::new((0..n).map(|i| i as f64 * 0.1).collect(), poses).unwrap()
    }

    #[test]
    fn identical_trajectories_score_zero() {
        let gt = wavy(40);
        let m = trajectory_metrics(&gt, &gt, &DEFAULT_SEGMENT_LENGTHS).unwrap();
        assert!(m.ate_rmse < 1e-9 && m.t_rel < 1e-9 && m.r_rel < 1e-9, "{m:?}");
        assert!(m.segments > 0);
    }

    #[test]
    fn scaled_estimate_aligns_to_zero_ate() {
        let gt = wavy(30);
        let est = Trajectory {
            stamps: gt.stamps.clone(),
            poses: gt.poses.iter().map(|p| p.scaled(5.0)).collect(),
        };
        let m = trajectory_metrics(&est, &gt, &DEFAULT_SEGMENT_LENGTHS).unwrap();
        assert!(m.ate_rmse < 1e-10, "{}", m.ate_rmse);
        assert!((m.scale - 0.2).abs() < 1e-12);
        assert!(m.t_rel < 1e-8);
    }

    #[test]
    fn rotation_drift_closed_form() {
        // Straight path with 0.5 m steps; the estimate's heading drifts by
        // theta per frame while positions stay exact. A segment of length L
        // spans 2L frames, so every segment error is 2L theta / L = 2 theta.
        let theta = 0.003;
        let n = 40;
        let gt = Trajectory::new(
            (0..n).map(|i| i as f64).collect(),
            (0..n).map(|i| Pose::from_translation(Vector3::new(0.0, 0.0, 0.5 * i as f64))).collect(),
        )
        .unwrap();
        let est = Trajectory::new(
            gt.stamps.clone(),
            gt.poses
                .iter()
                .enumerate()
                .map(|(i, p)| Pose::from_axis_angle(Vector3::new(0.0, theta * i as f64, 0.0), *p.translation()))
                .collect(),
        )
        .unwrap();
        let m = trajectory_metrics(&est, &gt, &DEFAULT_SEGMENT_LENGTHS).unwrap();
        let expect = (2.0 * theta).to_degrees() * 100.0;
        assert!((m.r_rel - expect).abs() < 1e-9 * expect, "{} vs {expect}", m.r_rel);
        assert!(m.ate_rmse < 1e-12);
    }

    #[test]
    fn mismatched_stamps_rejected() {
        let gt = wavy(5);
        let mut est = gt.clone();
        est.stamps[2] += 1.0;
        assert!(trajectory_metrics(&est, &gt, &DEFAULT_SEGMENT_LENGTHS).is_err());
    }

    proptest! {
        #[test]
        fn depth_metrics_scale_invariant_after_alignment(seed in 0u64..1000, s in 0.05..20.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = DepthMap::new(8, 6, (0..48).map(|_| rng.random_range(1.0..30.0)).collect()).unwrap();
            let pred = DepthMap::new(8, 6, (0..48).map(|_| rng.random_range(1.0..30.0)).collect()).unwrap();
            let (a, _) = evaluate_depth(&pred, &gt, 80.0).unwrap();
            let (b, _) = evaluate_depth(&pred.map(|d| d * s), &gt, 80.0).unwrap();
            prop_assert!((a.abs_rel - b.abs_rel).abs() < 1e-12);
            prop_assert!((a.rmse - b.rmse).abs() < 1e-10);
            prop_assert_eq!(a.delta1, b.delta1);
        }

        #[test]
        fn ate_invariant_to_similarity_of_estimate(seed in 0u64..1000, s in 0.1..10.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = wavy(25);
            let est = Trajectory {
                stamps: gt.stamps.clone(),
                poses: gt.poses.iter().map(|p| {
                    Pose::new(*p.rotation(), p.translation() + Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1))).unwrap()
                }).collect(),
            };
            let g = Similarity {
                scale: s,
                rotation: *Pose::from_axis_angle(Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.3), Vector3::zeros()).rotation(),
                translation: Vector3::new(3.0, -2.0, 1.0),
            };
            let moved = Trajectory { stamps: est.stamps.clone(), poses: est.poses.iter().map(|p| g.apply_pose(p)).collect() };
            let (a, _) = ate_rmse(&est, &gt).unwrap();
            let (b, _) = ate_rmse(&moved, &gt).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn depth_metrics_permutation_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g: Vec<f64> = (0..30).map(|_| rng.random_range(1.0..30.0)).collect();
            let p: Vec<f64> = (0..30).map(|_| rng.random_range(1.0..30.0)).collect();
            let mut idx: Vec<usize> = (0..30).collect();
            for i in (1..30).rev() {
                idx.swap(i, rng.random_range(0..=i));
            }
            let a = depth_metrics(&DepthMap::new(30, 1, p.clone()).unwrap(), &DepthMap::new(30, 1, g.clone()).unwrap(), 80.0).unwrap();
            let b = depth_metrics(
                &DepthMap::new(30, 1, idx.iter().map(|&i| p[i]).collect()).unwrap(),
                &DepthMap::new(30, 1, idx.iter().map(|&i| g[i]).collect()).unwrap(),
                80.0,
            ).unwrap();
            prop_assert!((a.abs_rel - b.abs_rel).abs() < 1e-12);
            prop_assert_eq!(a.delta2, b.delta2);
        }
    }
}
