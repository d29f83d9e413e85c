//! Deterministic ray-cast scenes of planes and axis-aligned boxes with exact
//! depth, labels, flow and correspondences, plus source-domain pre-training.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Vector3};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{adam_step, AdamState};
use crate::error::{Error, Result};
use crate::formats::{quantize8, CameraFile, Sequence, StoredFrame};
use crate::geom::{project, CameraIntrinsics, Pixel, Pose};
use crate::metrics::{evaluate_depth, DEFAULT_MAX_DEPTH};
use crate::net::{backprop_base, flatten_base_grads, patch_features, predict_depth, NetConfig, ToyDepthNet};
use crate::raster::{DepthMap, Image, SegMap};
use crate::sparse::{CorrespondenceSet, Match};

pub const CATEGORY_GROUND: u16 = 1;
pub const CATEGORY_WALL: u16 = 2;
pub const CATEGORY_BOX: u16 = 3;
pub const CATEGORY_VEHICLE: u16 = 4;

const HIT_EPSILON: f64 = 1e-9;
const VISIBILITY_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Plane { point: [f64; 3], normal: [f64; 3] },
    Box { min: [f64; 3], max: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub category: u16,
    pub instance: u16,
    /// Rigid translation per frame, meters.
    #[serde(default)]
    pub velocity: [f64; 3],
    #[serde(default = "default_albedo")]
    pub albedo: f64,
}

fn default_albedo() -> f64 {
    0.3
}

impl ObjectSpec {
    pub fn is_moving(&self) -> bool {
        self.velocity.iter().any(|v| *v != 0.0)
    }
}

/// Band-limited sum of oriented sinusoids.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextureSpec {
    /// Mean angular frequency, radians per meter of surface.
    pub frequency: f64,
    /// Relative albedo modulation.
    pub amplitude: f64,
    pub components: usize,
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self {
            frequency: 8.0,
            amplitude: 0.08,
            components: 6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainShift {
    /// Display gamma: rendered intensities become `I^(1/gamma)`.
    pub gamma: f64,
    /// Uniform scale of all geometry, camera translation and motion.
    pub depth_scale: f64,
    /// Mirrors every texture pattern about its albedo.
    pub palette_swap: bool,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self::none()
    }
}

impl DomainShift {
    pub fn none() -> Self {
        Self {
            gamma: 1.0,
            depth_scale: 1.0,
            palette_swap: false,
        }
    }

    /// Gamma 2 and geometry scaled by 1.5.
    pub fn standard() -> Self {
        Self {
            gamma: 2.0,
            depth_scale: 1.5,
            palette_swap: false,
        }
    }
}

/// Smooth parametric camera motion; all amplitudes in meters or radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraPath {
    pub start: [f64; 3],
    pub velocity: [f64; 3],
    pub sway_amplitude: f64,
    pub sway_period: f64,
    pub surge_amplitude: f64,
    pub surge_period: f64,
    pub yaw_amplitude: f64,
    pub yaw_period: f64,
}

impl Default for CameraPath {
    fn default() -> Self {
        Self {
            start: [0.0; 3],
            velocity: [0.0; 3],
            sway_amplitude: 0.0,
            sway_period: 1.0,
            surge_amplitude: 0.0,
            surge_period: 1.0,
            yaw_amplitude: 0.0,
            yaw_period: 1.0,
        }
    }
}

impl CameraPath {
    /// Camera-to-world pose at frame `f`.
    pub fn pose(&self, f: usize) -> Pose {
        let t = f as f64;
        let wave = |amp: f64, period: f64| amp * (2.0 * PI * t / period).sin();
        let c = Vector3::from(self.start)
            + Vector3::from(self.velocity) * t
            + Vector3::new(wave(self.sway_amplitude, self.sway_period), 0.0, wave(self.surge_amplitude, self.surge_period));
        let yaw = wave(self.yaw_amplitude, self.yaw_period);
        Pose::from_axis_angle(Vector3::new(0.0, yaw, 0.0), c)
    }
}

/// Explicit camera-to-world pose: translation and axis-angle rotation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSpec {
    pub translation: [f64; 3],
    #[serde(default)]
    pub rotation: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    /// Rays travelling further than this hit nothing.
    #[serde(default = "default_extent")]
    pub extent: f64,
    pub frames: usize,
    #[serde(default = "default_interval")]
    pub frame_interval: f64,
    pub intrinsics: CameraIntrinsics,
    /// Explicit trajectory; overrides `path` and `frames` when non-empty.
    #[serde(default)]
    pub poses: Vec<PoseSpec>,
    #[serde(default)]
    pub path: CameraPath,
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub texture: TextureSpec,
    /// Fog attenuation length in meters; 0 disables fog.
    #[serde(default)]
    pub fog_distance: f64,
    #[serde(default = "default_fog_level")]
    pub fog_level: f64,
    #[serde(default)]
    pub shift: DomainShift,
}

fn default_extent() -> f64 {
    200.0
}

fn default_interval() -> f64 {
    0.1
}

fn default_fog_level() -> f64 {
    0.95
}

pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(50.0, 50.0, 32.0, 24.0, 64, 48).expect("valid intrinsics")
}

impl SceneSpec {
    /// Ground plane, a far facade and a few random static boxes, seen from a
    /// camera that sways, surges and yaws.
    pub fn street(seed: u64, frames: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_57EE7);
        let mut objects = vec![
            ObjectSpec {
                shape: Shape::Plane {
                    point: [0.0, 1.5, 0.0],
                    normal: [0.0, -1.0, 0.0],
                },
                category: CATEGORY_GROUND,
                instance: 1,
                velocity: [0.0; 3],
                albedo: default_albedo(),
            },
            ObjectSpec {
                shape: Shape::Plane {
                    point: [0.0, 0.0, 12.0],
                    normal: [0.0, 0.0, -1.0],
                },
                category: CATEGORY_WALL,
                instance: 2,
                velocity: [0.0; 3],
                albedo: default_albedo(),
            },
        ];
        let slots = [-4.5, -1.5, 1.5, 4.5];
        for (i, &x) in slots.iter().enumerate() {
            let cx = x + rng.random_range(-0.8..0.8);
            let half = rng.random_range(0.5..0.9);
            let z0 = rng.random_range(4.5..8.5);
            let depth = rng.random_range(0.8..1.6);
            let height = rng.random_range(1.0..2.6);
            objects.push(ObjectSpec {
                shape: Shape::Box {
                    min: [cx - half, 1.5 - height, z0],
                    max: [cx + half, 1.5, z0 + depth],
                },
                category: CATEGORY_BOX,
                instance: 3 + i as u16,
                velocity: [0.0; 3],
                albedo: default_albedo(),
            });
        }
        let phase = rng.random_range(0.0..1.0);
        Self {
            seed,
            extent: default_extent(),
            frames,
            frame_interval: default_interval(),
            intrinsics: default_intrinsics(),
            poses: Vec::new(),
            path: CameraPath {
                start: [rng.random_range(-0.5..0.5), 0.0, 0.0],
                velocity: [0.0; 3],
                sway_amplitude: 1.5,
                sway_period: 80.0 + 20.0 * phase,
                surge_amplitude: 1.0,
                surge_period: 110.0,
                yaw_amplitude: 0.06,
                yaw_period: 90.0,
            },
            objects,
            texture: TextureSpec::default(),
            fog_distance: 10.0,
            fog_level: default_fog_level(),
            shift: DomainShift::none(),
        }
    }

    /// Static camera facing a wall with one wide box that slides sideways while
    /// approaching.
    pub fn moving_box(seed: u64, frames: usize) -> Self {
        let mut spec = Self::street(seed, frames);
        spec.objects.remove(0);
        spec.objects.truncate(1);
        spec.path = CameraPath::default();
        spec.objects.push(ObjectSpec {
            shape: Shape::Box {
                min: [-3.0, -1.2, 6.0],
                max: [1.3, 1.2, 7.0],
            },
            category: CATEGORY_VEHICLE,
            instance: 3,
            velocity: [0.4, 0.0, -0.3],
            albedo: default_albedo(),
        });
        spec
    }

    /// One fronto-parallel plane at depth `z` and an explicit trajectory.
    pub fn fronto_plane(z: f64, poses: Vec<PoseSpec>) -> Self {
        Self {
            seed: 0,
            extent: default_extent(),
            frames: poses.len(),
            frame_interval: default_interval(),
            intrinsics: default_intrinsics(),
            poses,
            path: CameraPath::default(),
            objects: vec![ObjectSpec {
                shape: Shape::Plane {
                    point: [0.0, 0.0, z],
                    normal: [0.0, 0.0, -1.0],
                },
                category: CATEGORY_WALL,
                instance: 1,
                velocity: [0.0; 3],
                albedo: default_albedo(),
            }],
            texture: TextureSpec::default(),
            fog_distance: 0.0,
            fog_level: default_fog_level(),
            shift: DomainShift::none(),
        }
    }

    pub fn with_shift(mut self, shift: DomainShift) -> Self {
        self.shift = shift;
        self
    }

    pub fn frame_count(&self) -> usize {
        if self.poses.is_empty() {
            self.frames
        } else {
            self.poses.len()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug)]
struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
}

#[derive(Clone, Debug)]
struct Object {
    spec: ObjectSpec,
    velocity: Vector3<f64>,
    waves: Vec<Wave>,
    gain: f64,
}

#[derive(Clone, Copy, Debug)]
struct Hit {
    s: f64,
    object: usize,
    coords: (f64, f64),
}

/// A compiled scene: geometry with the domain shift applied and per-object
/// texture waves drawn from the seed.
#[derive(Clone, Debug)]
pub struct Scene {
    spec: SceneSpec,
    objects: Vec<Object>,
    /// Camera-to-world poses.
    poses: Vec<Pose>,
}

/// Ground truth for one rendered frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTruth {
    pub index: usize,
    pub image: Image,
    pub depth: DepthMap,
    pub seg: SegMap,
    /// Camera-to-world pose.
    pub pose: Pose,
    /// Where each pixel's surface point appears in the previous frame, when
    /// it is visible there.
    pub flow_prev: Vec<Option<Pixel>>,
    /// Pixels on moving objects.
    pub dynamic: Vec<bool>,
}

impl FrameTruth {
    pub fn t_cw(&self) -> Pose {
        self.pose.inverse()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    StaticOnly,
    #[default]
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchSampling {
    pub count: usize,
    pub mode: MatchMode,
    /// Standard deviation of Gaussian noise added to the frame-b pixel.
    pub noise_sigma: f64,
}

impl Default for MatchSampling {
    fn default() -> Self {
        Self {
            count: 300,
            mode: MatchMode::All,
            noise_sigma: 0.0,
        }
    }
}

fn scale3(a: [f64; 3], s: f64) -> Vector3<f64> {
    Vector3::from(a) * s
}

fn tangent_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let axis = if n.x.abs() <= n.y.abs() && n.x.abs() <= n.z.abs() {
        Vector3::x()
    } else if n.y.abs() <= n.z.abs() {
        Vector3::y()
    } else {
        Vector3::z()
    };
    let t1 = n.cross(&axis).normalize();
    (t1, n.cross(&t1))
}

impl Scene {
    pub fn new(spec: &SceneSpec) -> Result<Self> {
        spec.intrinsics.validate()?;
        let sh = spec.shift;
        if !(sh.gamma > 0.0 && sh.depth_scale > 0.0) {
            return Err(Error::Config("domain shift gamma and depth scale must be positive".into()));
        }
        if spec.objects.is_empty() {
            return Err(Error::Config("scene has no objects".into()));
        }
        if spec.frame_count() == 0 {
            return Err(Error::Config("scene has no frames".into()));
        }
        let s = sh.depth_scale;
        let mut objects = Vec::with_capacity(spec.objects.len());
        for (i, o) in spec.objects.iter().enumerate() {
            let mut o = o.clone();
            match &mut o.shape {
                Shape::Plane { point, normal } => {
                    let n = Vector3::from(*normal);
                    if n.norm() == 0.0 {
                        return Err(Error::Config(format!("object {i} has a zero normal")));
                    }
                    *point = scale3(*point, s).into();
                    *normal = n.normalize().into();
                }
                Shape::Box { min, max } => {
                    if (0..3).any(|j| min[j] >= max[j]) {
                        return Err(Error::Config(format!("object {i} has an empty box")));
                    }
                    *min = scale3(*min, s).into();
                    *max = scale3(*max, s).into();
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64));
            let waves = (0..spec.texture.components)
                .map(|_| {
                    let theta: f64 = rng.random_range(0.0..PI);
                    let w = spec.texture.frequency * rng.random_range(0.6..1.4);
                    Wave {
                        kx: w * theta.cos(),
                        ky: w * theta.sin(),
                        phase: rng.random_range(0.0..2.0 * PI),
                    }
                })
                .collect::<Vec<_>>();
            let gain = if waves.is_empty() {
                0.0
            } else {
                (2.0 / waves.len() as f64).sqrt()
            };
            objects.push(Object {
                velocity: scale3(o.velocity, s),
                spec: o,
                waves,
                gain,
            });
        }
        let poses: Vec<Pose> = if spec.poses.is_empty() {
            (0..spec.frames).map(|f| spec.path.pose(f)).collect()
        } else {
            spec.poses
                .iter()
                .map(|p| Pose::from_axis_angle(Vector3::from(p.rotation), Vector3::from(p.translation)))
                .collect()
        };
        let poses = poses.into_iter().map(|p| p.scaled(s)).collect();
        Ok(Self {
            spec: spec.clone(),
            objects,
            poses,
        })
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.spec.intrinsics
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Camera-to-world pose of frame `f`.
    pub fn pose(&self, f: usize) -> &Pose {
        &self.poses[f]
    }

    fn displacement(&self, object: usize, frame: usize) -> Vector3<f64> {
        self.objects[object].velocity * frame as f64
    }

    fn intersect(&self, object: usize, origin: &Vector3<f64>, dir: &Vector3<f64>, frame: usize) -> Option<Hit> {
        let disp = self.displacement(object, frame);
        let inv = 1.0 / self.spec.shift.depth_scale;
        match &self.objects[object].spec.shape {
            Shape::Plane { point, normal } => {
                let n = Vector3::from(*normal);
                let p0 = Vector3::from(*point) + disp;
                let denom = n.dot(dir);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let s = n.dot(&(p0 - origin)) / denom;
                if s <= HIT_EPSILON {
                    return None;
                }
                let q = origin + dir * s - p0;
                let (t1, t2) = tangent_basis(&n);
                Some(Hit {
                    s,
                    object,
                    coords: (t1.dot(&q) * inv, t2.dot(&q) * inv),
                })
            }
            Shape::Box { min, max } => {
                let lo = Vector3::from(*min) + disp;
                let hi = Vector3::from(*max) + disp;
                let mut near = f64::NEG_INFINITY;
                let mut far = f64::INFINITY;
                let mut face = 0;
                for j in 0..3 {
                    if dir[j].abs() < 1e-15 {
                        if origin[j] < lo[j] || origin[j] > hi[j] {
                            return None;
                        }
                        continue;
                    }
                    let a = (lo[j] - origin[j]) / dir[j];
                    let b = (hi[j] - origin[j]) / dir[j];
                    let (a, b) = if a < b { (a, b) } else { (b, a) };
                    if a > near {
                        near = a;
                        face = j;
                    }
                    far = far.min(b);
                }
                if near > far || near <= HIT_EPSILON {
                    return None;
                }
                let q = origin + dir * near - lo;
                let (c0, c1) = match face {
                    0 => (q.y, q.z),
                    1 => (q.x, q.z),
                    _ => (q.x, q.y),
                };
                let offset = 7.3 * face as f64;
                Some(Hit {
                    s: near,
                    object,
                    coords: (c0 * inv + offset, c1 * inv - offset),
                })
            }
        }
    }

    /// Nearest surface along the ray through `pixel` in frame `frame`. The
    /// returned `s` is the z-depth of the hit.
    fn cast(&self, pixel: Pixel, frame: usize) -> Option<Hit> {
        let pose = &self.poses[frame];
        let origin = *pose.translation();
        let dir = pose.rotation() * self.spec.intrinsics.ray(pixel);
        let limit = self.spec.extent * self.spec.shift.depth_scale;
        (0..self.objects.len())
            .filter_map(|o| self.intersect(o, &origin, &dir, frame))
            .filter(|h| h.s * dir.norm() <= limit)
            .min_by(|a, b| a.s.total_cmp(&b.s).then(a.object.cmp(&b.object)))
    }

    fn shade(&self, hit: &Hit, distance: f64) -> f64 {
        let o = &self.objects[hit.object];
        let (x, y) = hit.coords;
        let mut noise = o.gain * o.waves.iter().map(|w| (w.kx * x + w.ky * y + w.phase).sin()).sum::<f64>();
        if self.spec.shift.palette_swap {
            noise = -noise;
        }
        let albedo = (o.spec.albedo * (1.0 + self.spec.texture.amplitude * noise)).max(0.0);
        let tau = if self.spec.fog_distance > 0.0 {
            (-distance / self.spec.fog_distance).exp()
        } else {
            1.0
        };
        let i = (albedo * tau + self.spec.fog_level * (1.0 - tau)).clamp(0.0, 1.0);
        let i = i.powf(1.0 / self.spec.shift.gamma);
        quantize8(i) as f64 / 255.0
    }

    /// Where the surface point seen at `pixel` in `from` appears in `to`,
    /// when it is in view and unoccluded there.
    pub fn transfer(&self, pixel: Pixel, from: usize, to: usize) -> Option<Pixel> {
        let hit = self.cast(pixel, from)?;
        self.transfer_hit(&hit, pixel, from, to)
    }

    fn transfer_hit(&self, hit: &Hit, pixel: Pixel, from: usize, to: usize) -> Option<Pixel> {
        let k = &self.spec.intrinsics;
        let p_cam = k.ray(pixel) * hit.s;
        let world = self.poses[from].transform(&p_cam) - self.displacement(hit.object, from)
            + self.displacement(hit.object, to);
        let p_to = self.poses[to].inverse().transform(&world);
        let q = project(&p_to, k).ok()?;
        if !k.contains(q) {
            return None;
        }
        let back = self.cast(q, to)?;
        let tol = VISIBILITY_TOLERANCE * p_to.z.max(1.0);
        (back.object == hit.object && (back.s - p_to.z).abs() <= tol).then_some(q)
    }

    pub fn render(&self, frame: usize) -> FrameTruth {
        let k = &self.spec.intrinsics;
        let (w, h) = (k.width, k.height);
        let pose = &self.poses[frame];
        let px: Vec<_> = (0..w * h)
            .into_par_iter()
            .map(|i| {
                let p = Pixel::new((i % w) as f64, (i / w) as f64);
                match self.cast(p, frame) {
                    None => (self.spec.fog_level.powf(1.0 / self.spec.shift.gamma), 0.0, 0u16, 0u16, None, false),
                    Some(hit) => {
                        let o = &self.objects[hit.object].spec;
                        let distance = hit.s * k.ray(p).norm();
                        let flow = if frame > 0 {
                            self.transfer_hit(&hit, p, frame, frame - 1)
                        } else {
                            None
                        };
                        (self.shade(&hit, distance), hit.s, o.category, o.instance, flow, o.is_moving())
                    }
                }
            })
            .collect();
        let image = Image::new(w, h, px.iter().map(|p| p.0).collect()).expect("sized");
        let depth = DepthMap::new(w, h, px.iter().map(|p| p.1).collect()).expect("sized");
        let seg = SegMap::new(
            w,
            h,
            px.iter().map(|p| p.2).collect(),
            Some(px.iter().map(|p| p.3).collect()),
        )
        .expect("sized");
        FrameTruth {
            index: frame,
            image,
            depth,
            seg,
            pose: *pose,
            flow_prev: px.iter().map(|p| p.4).collect(),
            dynamic: px.iter().map(|p| p.5).collect(),
        }
    }

    pub fn render_all(&self) -> Vec<FrameTruth> {
        (0..self.len()).map(|f| self.render(f)).collect()
    }

    /// `count` matches from integer pixels of frame `a` to their exact
    /// positions in frame `b`, optionally perturbed in `b`.
    pub fn sample_correspondences(
        &self,
        a: &FrameTruth,
        b: &FrameTruth,
        sampling: &MatchSampling,
        seed: u64,
    ) -> Result<CorrespondenceSet> {
        let k = &self.spec.intrinsics;
        let w = k.width;
        let candidates: Vec<(Pixel, Pixel)> = (0..k.width * k.height)
            .into_par_iter()
            .filter(|&i| sampling.mode == MatchMode::All || !a.dynamic[i])
            .filter_map(|i| {
                let p = Pixel::new((i % w) as f64, (i / w) as f64);
                self.transfer(p, a.index, b.index).map(|q| (p, q))
            })
            .collect();
        if sampling.count > candidates.len() {
            return Err(Error::InsufficientCorrespondences {
                requested: sampling.count,
                available: candidates.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chosen: Vec<(Pixel, Pixel)> = candidates.choose_multiple(&mut rng, sampling.count).copied().collect();
        chosen.sort_by(|x, y| x.0.v.total_cmp(&y.0.v).then(x.0.u.total_cmp(&y.0.u)));
        let noise = if sampling.noise_sigma > 0.0 {
            Some(Normal::new(0.0, sampling.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?)
        } else {
            None
        };
        let (umax, vmax) = ((k.width - 1) as f64, (k.height - 1) as f64);
        let matches = chosen
            .into_iter()
            .map(|(pa, mut pb)| {
                if let Some(n) = &noise {
                    pb.u = (pb.u + n.sample(&mut rng)).clamp(0.0, umax);
                    pb.v = (pb.v + n.sample(&mut rng)).clamp(0.0, vmax);
                }
                Match::new(pa, pb)
            })
            .collect();
        CorrespondenceSet::new(a.index as u64, b.index as u64, matches, k)
    }

    /// Frames as an on-disk sequence; frame `f > 0` carries matches from `f-1`.
    pub fn to_sequence(&self, frames: &[FrameTruth], sampling: Option<&MatchSampling>, seed: u64) -> Result<Sequence> {
        let mut stored = Vec::with_capacity(frames.len());
        for (i, f) in frames.iter().enumerate() {
            let matches = match (sampling, i) {
                (Some(s), i) if i > 0 => Some(self.sample_correspondences(&frames[i - 1], f, s, seed.wrapping_add(i as u64))?),
                _ => None,
            };
            stored.push(StoredFrame {
                image: f.image.clone(),
                seg: f.seg.clone(),
                depth: Some(f.depth.clone()),
                matches,
            });
        }
        Ok(Sequence {
            camera: CameraFile {
                intrinsics: self.spec.intrinsics,
                frame_interval: self.spec.frame_interval,
            },
            frames: stored,
            poses: Some(frames.iter().map(|f| f.pose).collect()),
        })
    }
}

pub fn generate(spec: &SceneSpec) -> Result<Vec<FrameTruth>> {
    Ok(Scene::new(spec)?.render_all())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub hidden: Vec<usize>,
    pub rank: usize,
    pub seed: u64,
    pub epochs: usize,
    /// Minibatch updates per epoch.
    pub steps_per_epoch: usize,
    pub batch: usize,
    pub learning_rate: f64,
    /// Learning rate is multiplied by this after every epoch.
    pub decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        Self {
            hidden: net.hidden,
            rank: net.rank,
            seed: 7,
            epochs: 16,
            steps_per_epoch: 250,
            batch: 1024,
            learning_rate: 3e-3,
            decay: 0.85,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub net: ToyDepthNet,
    /// Mean squared log-depth error per epoch.
    pub loss_curve: Vec<f64>,
}

/// Direct log-depth regression of the base weights on rendered frames. The
/// returned net is frozen with fresh zero-output refiners.
pub fn pretrain_toy_net(frames: &[FrameTruth], cfg: &PretrainConfig) -> Result<Pretrained> {
    pretrain_on(frames.iter().map(|f| (&f.image, &f.depth)), cfg)
}

/// Pre-trains on arbitrary image and ground-truth depth pairs.
pub fn pretrain_on<'a>(
    frames: impl IntoIterator<Item = (&'a Image, &'a DepthMap)>,
    cfg: &PretrainConfig,
) -> Result<Pretrained> {
    let mut net = ToyDepthNet::random(&NetConfig {
        hidden: cfg.hidden.clone(),
        rank: cfg.rank,
        seed: cfg.seed,
    });
    let mut feats = Vec::new();
    let mut targets = Vec::new();
    for (image, depth) in frames {
        let x = patch_features(image);
        for (i, &d) in depth.values().iter().enumerate() {
            if d > 0.0 && d <= DEFAULT_MAX_DEPTH {
                feats.extend_from_slice(x.column(i).as_slice());
                targets.push(d.ln());
            }
        }
    }
    if targets.is_empty() && cfg.epochs > 0 {
        return Err(Error::EmptyInput("pre-training pixels"));
    }
    let dim = crate::net::FEATURE_DIM;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = net.base_params();
    let mut adam = AdamState::new(params.len());
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut lr = cfg.learning_rate;
    let batch = cfg.batch.min(targets.len()).max(1);
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..targets.len())).collect();
            let mut x = DMatrix::zeros(dim, batch);
            for (c, &j) in idx.iter().enumerate() {
                x.column_mut(c).copy_from_slice(&feats[j * dim..(j + 1) * dim]);
            }
            let (depth, mut tape) = net.forward_features(x);
            let mut loss = 0.0;
            let seeds: Vec<f64> = depth
                .iter()
                .zip(&idx)
                .map(|(&d, &j)| {
                    let r = d.ln() - targets[j];
                    loss += r * r;
                    2.0 * r / (d * batch as f64)
                })
                .collect();
            total += loss / batch as f64;
            let grads = flatten_base_grads(&backprop_base(&mut tape, &net, &seeds)?);
            adam_step(&mut params, &grads, &mut adam, lr)?;
            net.set_base_params(&params)?;
        }
        curve.push(total / cfg.steps_per_epoch.max(1) as f64);
        lr *= cfg.decay;
    }
    net.freeze();
    net.reset_refiners(cfg.rank, cfg.seed.wrapping_add(1));
    Ok(Pretrained { net, loss_curve: curve })
}

/// Mean per-frame AbsRel of `net` after mean-ratio alignment.
pub fn mean_abs_rel(net: &ToyDepthNet, frames: &[FrameTruth]) -> Result<f64> {
    mean_abs_rel_on(net, frames.iter().map(|f| (&f.image, &f.depth)))
}

pub fn mean_abs_rel_on<'a>(
    net: &ToyDepthNet,
    frames: impl IntoIterator<Item = (&'a Image, &'a DepthMap)>,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (image, depth) in frames {
        let pred = predict_depth(image, net);
        sum += evaluate_depth(&pred, depth, DEFAULT_MAX_DEPTH)?.0.abs_rel;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyInput("frames"));
    }
    Ok(sum / n as f64)
}

/// Source scenes used to pre-train the shared fixture net.
pub fn source_scenes(count: usize, frames: usize) -> Vec<SceneSpec> {
    (0..count as u64).map(|s| SceneSpec::street(100 + s, frames)).collect()
}

/// The source-domain net shared by the adaptation fixtures: default
/// pre-training on every sixth frame of six 120-frame source scenes.
pub fn fixture_net() -> Result<ToyDepthNet> {
    let frames = render_scenes(&source_scenes(6, 120), 6)?;
    Ok(pretrain_toy_net(&frames, &PretrainConfig::default())?.net)
}

/// Renders every `stride`-th frame of each scene.
pub fn render_scenes(specs: &[SceneSpec], stride: usize) -> Result<Vec<FrameTruth>> {
    let mut out = Vec::new();
    for spec in specs {
        let scene = Scene::new(spec)?;
        out.extend((0..scene.len()).step_by(stride.max(1)).map(|f| scene.render(f)));
    }
    Ok(out)
}
