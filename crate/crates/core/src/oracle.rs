//! Slow reference implementations used to cross-check densification and
//! triangulation.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::{project, CameraIntrinsics, Pixel, Pose};
use crate::raster::{DepthMap, MaskMap, SegMap};
use crate::sdd::{densify, GridSpec, FILL_NEIGHBORS};
use crate::sparse::{triangulate_two_view, Match, SparseDepth, SparseSample};

struct RefSample {
    u: f64,
    v: f64,
    depth: f64,
    label: u16,
    cell: (usize, usize),
}

/// Densification by exhaustive search: every pixel is resolved on its own,
/// with nearest neighbors found by scanning all samples.
pub fn densify_reference(
    sparse: &SparseDepth,
    seg: &SegMap,
    grid: &GridSpec,
    dynamic: Option<&MaskMap>,
) -> Result<DepthMap> {
    if sparse.is_empty() {
        return Err(Error::EmptySparseDepth);
    }
    let (w, h) = seg.dims();
    let dyn_at = |x: usize, y: usize| dynamic.is_some_and(|m| m.get(x, y) < 0.5);
    let mut samples = Vec::new();
    for s in sparse.samples() {
        let (x, y) = s.pixel.rounded();
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            return Err(Error::OutOfBounds {
                u: s.pixel.u,
                v: s.pixel.v,
            });
        }
        let (x, y) = (x as usize, y as usize);
        let label = seg.label(x, y);
        if label != 0 && !dyn_at(x, y) {
            samples.push(RefSample {
                u: s.pixel.u,
                v: s.pixel.v,
                depth: s.depth,
                label,
                cell: grid.cell(x, y),
            });
        }
    }
    samples.sort_by(|a, b| a.v.total_cmp(&b.v).then(a.u.total_cmp(&b.u)));

    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let label = seg.label(x, y);
            if label == 0 || dyn_at(x, y) || !samples.iter().any(|s| s.label == label) {
                continue;
            }
            let cell = grid.cell(x, y);
            let inside: Vec<f64> = samples
                .iter()
                .filter(|s| s.label == label && s.cell == cell)
                .map(|s| s.depth)
                .collect();
            out[y * w + x] = if inside.is_empty() {
                let (x0, x1, y0, y1) = grid.cell_bounds(cell.0, cell.1);
                let (mut su, mut sv, mut n) = (0.0, 0.0, 0usize);
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        if seg.label(xx, yy) == label && !dyn_at(xx, yy) {
                            su += xx as f64;
                            sv += yy as f64;
                            n += 1;
                        }
                    }
                }
                let (qu, qv) = (su / n as f64, sv / n as f64);
                let mut ranked: Vec<(f64, f64, f64, f64)> = samples
                    .iter()
                    .filter(|s| s.label == label)
                    .map(|s| {
                        let (du, dv) = (s.u - qu, s.v - qv);
                        (du * du + dv * dv, s.v, s.u, s.depth)
                    })
                    .collect();
                ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.total_cmp(&b.2)));
                ranked.truncate(FILL_NEIGHBORS);
                ranked.iter().fold(0.0, |acc, r| acc + r.3) / ranked.len() as f64
            } else {
                inside.iter().fold(0.0, |acc, d| acc + d) / inside.len() as f64
            };
        }
    }
    DepthMap::new(w, h, out)
}

/// Least-squares intersection of the two viewing rays from the normal
/// equations `sum (I - d d^T) x = sum (I - d d^T) o`, in frame-b coordinates.
pub fn triangulate_reference(m: &Match, t_ab: &Pose, k: &CameraIntrinsics) -> Result<Vector3<f64>> {
    let ray = |p: Pixel| Vector3::new((p.u - k.cx) / k.fx, (p.v - k.cy) / k.fy, 1.0).normalize();
    let rays = [
        (*t_ab.translation(), (t_ab.rotation() * ray(m.a)).normalize()),
        (Vector3::zeros(), ray(m.b)),
    ];
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for (o, d) in &rays {
        let p = Matrix3::identity() - d * d.transpose();
        a += p;
        b += p * o;
    }
    a.lu().solve(&b).ok_or_else(|| Error::DegenerateGeometry("singular ray system".into()))
}

/// One randomized densification input at 64x48.
#[derive(Clone, Debug)]
pub struct DensifyCase {
    pub sparse: SparseDepth,
    pub seg: SegMap,
    pub grid: GridSpec,
    pub dynamic: Option<MaskMap>,
}

/// Random blocky segmentation with a sparse category (fewer than five
/// samples), plenty of empty cells and an optional dynamic mask.
pub fn random_densify_case(seed: u64) -> DensifyCase {
    let (w, h) = (64, 48);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = vec![0u16; w * h];
    for _ in 0..rng.random_range(4..10) {
        let label = rng.random_range(0..6u16);
        let (x0, y0) = (rng.random_range(0..w), rng.random_range(0..h));
        let (x1, y1) = ((x0 + rng.random_range(4..40)).min(w), (y0 + rng.random_range(4..30)).min(h));
        for y in y0..y1 {
            for x in x0..x1 {
                labels[y * w + x] = label;
            }
        }
    }
    let sparse_label = rng.random_range(1..6u16);
    let count = rng.random_range(5..250);
    let mut taken = vec![false; w * h];
    let mut per_label = [0usize; 6];
    let mut samples = Vec::new();
    for _ in 0..count * 4 {
        if samples.len() == count {
            break;
        }
        let (x, y) = (rng.random_range(0..w), rng.random_range(0..h));
        let label = labels[y * w + x] as usize;
        if taken[y * w + x] || (label as u16 == sparse_label && per_label[label] >= 3) {
            continue;
        }
        taken[y * w + x] = true;
        per_label[label] += 1;
        let (du, dv) = if rng.random::<f64>() < 0.4 {
            (0.0, 0.0)
        } else {
            (rng.random_range(-0.45..0.45), rng.random_range(-0.45..0.45))
        };
        let u = (x as f64 + du).clamp(0.0, (w - 1) as f64);
        let v = (y as f64 + dv).clamp(0.0, (h - 1) as f64);
        samples.push(SparseSample {
            pixel: Pixel::new(u, v),
            depth: if rng.random::<f64>() < 0.2 { 4.0 } else { rng.random_range(0.5..40.0) },
        });
    }
    let dynamic = (rng.random::<f64>() < 0.5).then(|| {
        let (x0, y0) = (rng.random_range(0..w - 10), rng.random_range(0..h - 10));
        let values = (0..w * h)
            .map(|i| {
                let (x, y) = (i % w, i / w);
                if (x0..x0 + 10).contains(&x) && (y0..y0 + 10).contains(&y) { 0.0 } else { 1.0 }
            })
            .collect();
        MaskMap::new(w, h, values).expect("binary mask")
    });
    DensifyCase {
        sparse: SparseDepth::new(seed, samples, w, h).expect("unique in-bounds samples"),
        seg: SegMap::new(w, h, labels, None).expect("matching size"),
        grid: GridSpec::new(rng.random_range(2..=20), w, h).expect("grid fits"),
        dynamic,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensifyReport {
    pub seed: u64,
    pub samples: usize,
    pub divisions: usize,
    /// Pixels whose value differs in any bit.
    pub mismatches: usize,
}

pub fn check_densify(seed: u64) -> Result<DensifyReport> {
    let c = random_densify_case(seed);
    let fast = densify(&c.sparse, &c.seg, &c.grid, c.dynamic.as_ref())?;
    let slow = densify_reference(&c.sparse, &c.seg, &c.grid, c.dynamic.as_ref())?;
    let mismatches = fast
        .values()
        .iter()
        .zip(slow.values())
        .filter(|(a, b)| a.to_bits() != b.to_bits())
        .count();
    Ok(DensifyReport {
        seed,
        samples: c.sparse.len(),
        divisions: c.grid.divisions(),
        mismatches,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TriangulationReport {
    pub seed: u64,
    pub points: usize,
    /// Largest distance to the true point over noiseless matches.
    pub max_truth_error: f64,
    /// Largest distance between the two implementations on noisy matches,
    /// relative to the point's range.
    pub max_relative_disagreement: f64,
}

/// Random pose with a baseline of at least 0.2 m and points 2 to 30 m ahead.
pub fn check_triangulation(seed: u64, points: usize) -> Result<TriangulationReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = CameraIntrinsics::new(50.0, 50.0, 32.0, 24.0, 64, 48)?;
    let omega = Vector3::from_fn(|_, _| rng.random_range(-0.1..0.1));
    let mut t = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    if t.norm() < 0.2 {
        t = t.normalize() * 0.2 + Vector3::new(0.2, 0.0, 0.0);
    }
    let t_ab = Pose::from_axis_angle(omega, t);
    let t_ba = t_ab.inverse();
    let mut report = TriangulationReport {
        seed,
        points: 0,
        max_truth_error: 0.0,
        max_relative_disagreement: 0.0,
    };
    let mut attempts = 0;
    while report.points < points && attempts < points * 20 {
        attempts += 1;
        let z = rng.random_range(2.0..30.0);
        let p_b = Vector3::new(rng.random_range(-0.6..0.6) * z, rng.random_range(-0.45..0.45) * z, z);
        let p_a = t_ba.transform(&p_b);
        if p_a.z <= 0.5 {
            continue;
        }
        let (Ok(a), Ok(b)) = (project(&p_a, &k), project(&p_b, &k)) else {
            continue;
        };
        let exact = Match::new(a, b);
        let Ok(x) = triangulate_two_view(&exact, &t_ab, &k) else {
            continue;
        };
        report.max_truth_error = report.max_truth_error.max((x - p_b).norm());
        let noisy = Match::new(
            Pixel::new(a.u + rng.random_range(-0.5..0.5), a.v + rng.random_range(-0.5..0.5)),
            Pixel::new(b.u + rng.random_range(-0.5..0.5), b.v + rng.random_range(-0.5..0.5)),
        );
        if let (Ok(fast), Ok(slow)) = (triangulate_two_view(&noisy, &t_ab, &k), triangulate_reference(&noisy, &t_ab, &k)) {
            let rel = (fast - slow).norm() / slow.norm().max(1.0);
            report.max_relative_disagreement = report.max_relative_disagreement.max(rel);
        }
        report.points += 1;
    }
    Ok(report)
}

pub fn run_densify_suite(seed: u64, count: usize) -> Result<Vec<DensifyReport>> {
    (0..count as u64).map(|i| check_densify(seed.wrapping_add(i))).collect()
}

pub fn run_triangulation_suite(seed: u64, count: usize) -> Result<Vec<TriangulationReport>> {
    (0..count as u64).map(|i| check_triangulation(seed.wrapping_add(i), 100)).collect()
}
