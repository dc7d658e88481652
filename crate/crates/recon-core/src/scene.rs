//! Procedural scenes with analytic signed distance functions.
//!
//! These scenes supply exact ground truth everywhere: the true TSDF via
//! [`sdf_eval`], depth maps via sphere-traced ray casting, and the noisy
//! depth oracle that stands in for a multi-view stereo predictor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{project_point, GridSpec, Intrinsics, Mat3, Pose, Vec3};
use crate::scalar::Scalar;

/// Sphere-tracing step safety factor; min-union SDFs are lower bounds, so
/// stepping by `0.99 * sdf` is convergent.
const TRACE_SAFETY: f64 = 0.99;
const TRACE_MAX_STEPS: usize = 256;
/// A ray is a hit once |sdf| drops below this (meters).
const TRACE_HIT_EPS: f64 = 1e-5;
/// Default maximum trace distance (meters). Real sensors would discard
/// far-range depth; the synthetic oracle only needs a bound.
pub const DEFAULT_MAX_DEPTH: f64 = 10.0;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("orbit radius {radius} must exceed the scene bounding radius {bounding}")]
    OrbitRadiusTooSmall { radius: f64, bounding: f64 },
    #[error("scene config parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// A single signed-distance primitive. Distances are exact per primitive.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    /// Axis-aligned box rotated by `yaw` radians about the world z axis.
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
        yaw: f64,
    },
    /// Halfspace `n . p < offset` is solid; `normal` need not be unit length
    /// on input and is normalized on construction.
    Plane {
        normal: [f64; 3],
        offset: f64,
    },
}

impl Primitive {
    fn sdf<T: Scalar>(&self, p: Vec3<T>) -> T {
        match *self {
            Primitive::Sphere { center, radius } => {
                let c = Vec3::from_f64(center[0], center[1], center[2]);
                (p - c).norm() - T::lit(radius)
            }
            Primitive::Box {
                center,
                half_extents,
                yaw,
            } => {
                let c = Vec3::from_f64(center[0], center[1], center[2]);
                let local = Mat3::rotation_z(T::lit(-yaw)).mul_vec(p - c);
                let he = Vec3::from_f64(half_extents[0], half_extents[1], half_extents[2]);
                let q = local.abs() - he;
                let outside = q.max_scalar(T::zero()).norm();
                let inside = q.x.max(q.y).max(q.z).min(T::zero());
                outside + inside
            }
            Primitive::Plane { normal, offset } => {
                let n = Vec3::from_f64(normal[0], normal[1], normal[2]).normalized();
                p.dot(n) - T::lit(offset)
            }
        }
    }

    /// Center and enclosing radius for bounded primitives; planes are
    /// unbounded and return `None`.
    fn bounding(&self) -> Option<([f64; 3], f64)> {
        match *self {
            Primitive::Sphere { center, radius } => Some((center, radius)),
            Primitive::Box {
                center,
                half_extents,
                ..
            } => {
                let r = (half_extents[0] * half_extents[0]
                    + half_extents[1] * half_extents[1]
                    + half_extents[2] * half_extents[2])
                    .sqrt();
                Some((center, r))
            }
            Primitive::Plane { .. } => None,
        }
    }
}

/// Min-union of SDF primitives.
///
/// The min-union is the exact signed distance for single primitives and a
/// lower bound for composites; it is exact outside overlap regions, and test
/// scenes keep primitive overlaps away from evaluated surfaces.
#[derive(Clone, Debug, PartialEq)]
pub struct SdfScene {
    pub primitives: Vec<Primitive>,
}

impl SdfScene {
    pub fn new(primitives: Vec<Primitive>) -> Self {
        assert!(!primitives.is_empty(), "scene needs at least one primitive");
        Self { primitives }
    }

    /// Mean center of the bounded primitives (origin if none).
    pub fn centroid(&self) -> [f64; 3] {
        let mut acc = [0.0; 3];
        let mut n = 0usize;
        for prim in &self.primitives {
            if let Some((c, _)) = prim.bounding() {
                acc[0] += c[0];
                acc[1] += c[1];
                acc[2] += c[2];
                n += 1;
            }
        }
        if n > 0 {
            [acc[0] / n as f64, acc[1] / n as f64, acc[2] / n as f64]
        } else {
            acc
        }
    }

    /// Radius of a sphere around the centroid enclosing all bounded
    /// primitives.
    pub fn bounding_radius(&self) -> f64 {
        let c = self.centroid();
        let mut r: f64 = 0.0;
        for prim in &self.primitives {
            if let Some((pc, pr)) = prim.bounding() {
                let d = ((pc[0] - c[0]).powi(2) + (pc[1] - c[1]).powi(2) + (pc[2] - c[2]).powi(2))
                    .sqrt();
                r = r.max(d + pr);
            }
        }
        r
    }

    /// Axis-aligned bounds of the bounded primitives, `margin` added on every
    /// side. Plane surfaces are clipped by these bounds wherever a grid is
    /// fitted around the scene.
    pub fn bounds(&self, margin: f64) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for prim in &self.primitives {
            if let Some((c, r)) = prim.bounding() {
                for a in 0..3 {
                    lo[a] = lo[a].min(c[a] - r);
                    hi[a] = hi[a].max(c[a] + r);
                }
            }
        }
        if lo[0] > hi[0] {
            (lo, hi) = ([-0.5; 3], [0.5; 3]);
        }
        for a in 0..3 {
            lo[a] -= margin;
            hi[a] += margin;
        }
        (lo, hi)
    }

    /// Plain-text scene description: one primitive per line.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        for prim in &self.primitives {
            match prim {
                Primitive::Sphere { center, radius } => {
                    out.push_str(&format!(
                        "sphere {} {} {} {}\n",
                        center[0], center[1], center[2], radius
                    ));
                }
                Primitive::Box {
                    center,
                    half_extents,
                    yaw,
                } => {
                    out.push_str(&format!(
                        "box {} {} {} {} {} {} {}\n",
                        center[0],
                        center[1],
                        center[2],
                        half_extents[0],
                        half_extents[1],
                        half_extents[2],
                        yaw
                    ));
                }
                Primitive::Plane { normal, offset } => {
                    out.push_str(&format!(
                        "plane {} {} {} {}\n",
                        normal[0], normal[1], normal[2], offset
                    ));
                }
            }
        }
        out
    }

    pub fn from_config_string(text: &str) -> Result<Self, SceneError> {
        let mut primitives = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let kind = it.next().unwrap();
            let nums: Result<Vec<f64>, _> = it.map(|t| t.parse::<f64>()).collect();
            let nums = nums.map_err(|e| SceneError::Parse {
                line: lineno + 1,
                message: format!("bad number: {e}"),
            })?;
            let fail = |message: String| SceneError::Parse {
                line: lineno + 1,
                message,
            };
            let prim = match kind {
                "sphere" => {
                    if nums.len() != 4 {
                        return Err(fail(format!("sphere expects 4 fields, got {}", nums.len())));
                    }
                    Primitive::Sphere {
                        center: [nums[0], nums[1], nums[2]],
                        radius: nums[3],
                    }
                }
                "box" => {
                    if nums.len() != 7 {
                        return Err(fail(format!("box expects 7 fields, got {}", nums.len())));
                    }
                    Primitive::Box {
                        center: [nums[0], nums[1], nums[2]],
                        half_extents: [nums[3], nums[4], nums[5]],
                        yaw: nums[6],
                    }
                }
                "plane" => {
                    if nums.len() != 4 {
                        return Err(fail(format!("plane expects 4 fields, got {}", nums.len())));
                    }
                    Primitive::Plane {
                        normal: [nums[0], nums[1], nums[2]],
                        offset: nums[3],
                    }
                }
                other => return Err(fail(format!("unknown primitive '{other}'"))),
            };
            primitives.push(prim);
        }
        if primitives.is_empty() {
            return Err(SceneError::Parse {
                line: 0,
                message: "scene config lists no primitives".to_string(),
            });
        }
        Ok(Self::new(primitives))
    }
}

/// Signed distance of the scene at `p` (meters), or the normalized TSDF in
/// [-1, 1] when `truncation` is given.
pub fn sdf_eval<T: Scalar>(scene: &SdfScene, p: Vec3<T>, truncation: Option<T>) -> T {
    let mut d = T::infinity();
    for prim in &scene.primitives {
        d = d.min(prim.sdf(p));
    }
    match truncation {
        Some(tau) => (d / tau).max(-T::one()).min(T::one()),
        None => d,
    }
}

/// Central-difference SDF gradient; used for shading synthetic views.
pub fn sdf_gradient<T: Scalar>(scene: &SdfScene, p: Vec3<T>, eps: T) -> Vec3<T> {
    let dx = Vec3::new(eps, T::zero(), T::zero());
    let dy = Vec3::new(T::zero(), eps, T::zero());
    let dz = Vec3::new(T::zero(), T::zero(), eps);
    let two = T::lit(2.0) * eps;
    Vec3::new(
        (sdf_eval(scene, p + dx, None) - sdf_eval(scene, p - dx, None)) / two,
        (sdf_eval(scene, p + dy, None) - sdf_eval(scene, p - dy, None)) / two,
        (sdf_eval(scene, p + dz, None) - sdf_eval(scene, p - dz, None)) / two,
    )
}

/// Per-view depth image in meters; 0 marks invalid pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap<T> {
    pub width: usize,
    pub height: usize,
    /// Row-major (v-major) depth values.
    pub values: Vec<T>,
}

impl<T: Scalar> DepthMap<T> {
    pub fn new_invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![T::zero(); width * height],
        }
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> T {
        self.values[v * self.width + u]
    }

    #[inline]
    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.at(u, v) > T::zero()
    }

    /// Depth at the nearest pixel to continuous coordinates, `None` when the
    /// pixel is invalid or rounds outside the image.
    pub fn at_nearest(&self, u: T, v: T) -> Option<T> {
        let ui = u.round().to_isize()?;
        let vi = v.round().to_isize()?;
        if ui < 0 || vi < 0 || ui as usize >= self.width || vi as usize >= self.height {
            return None;
        }
        let d = self.at(ui as usize, vi as usize);
        (d > T::zero()).then_some(d)
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&d| d > T::zero()).count()
    }
}

/// Noise model for the synthetic depth oracle: multiplicative Gaussian noise
/// plus sparse gross outliers, mimicking MVS error structure.
#[derive(Clone, Debug)]
pub struct NoiseConfig {
    pub multiplicative_sigma: f64,
    pub outlier_rate: f64,
    pub outlier_scale_range: (f64, f64),
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            multiplicative_sigma: 0.02,
            outlier_rate: 0.01,
            outlier_scale_range: (0.7, 1.3),
            seed: 0,
        }
    }
}

/// Sphere-traces every pixel ray and records z-depth at the first surface
/// hit. Misses (no surface within `max_depth`) stay invalid.
///
/// The caller is responsible for placing the camera outside all solids.
pub fn raycast_depth<T: Scalar>(
    scene: &SdfScene,
    intr: &Intrinsics<T>,
    pose: &Pose<T>,
    max_depth: f64,
) -> DepthMap<T> {
    let width = intr.width;
    let height = intr.height;
    let origin = pose.center();
    let values: Vec<T> = (0..width * height)
        .into_par_iter()
        .map(|pix| {
            let u = T::from_usize(pix % width).unwrap();
            let v = T::from_usize(pix / width).unwrap();
            let dir_cam = Vec3::new((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, T::one());
            let inv_norm = T::one() / dir_cam.norm();
            let dir = pose.rotation.mul_vec(dir_cam).normalized();
            let mut t = T::zero();
            let max_t = T::lit(max_depth) / (dir_cam.z * inv_norm);
            for _ in 0..TRACE_MAX_STEPS {
                let p = origin + dir * t;
                let d = sdf_eval(scene, p, None);
                if d.abs() < T::lit(TRACE_HIT_EPS) {
                    // Ray length to z-depth: cos of the angle to the optical
                    // axis is dir_cam.z / |dir_cam|.
                    return t * dir_cam.z * inv_norm;
                }
                t = t + d * T::lit(TRACE_SAFETY);
                if t > max_t {
                    break;
                }
            }
            T::zero()
        })
        .collect();
    DepthMap {
        width,
        height,
        values,
    }
}

/// Places `n_views` cameras evenly on a circle of `radius` around the scene
/// centroid, lifted by `height`, each looking at the centroid.
pub fn orbit_trajectory<T: Scalar>(
    scene: &SdfScene,
    n_views: usize,
    radius: f64,
    height: f64,
) -> Result<Vec<Pose<T>>, SceneError> {
    assert!(n_views >= 2, "an orbit needs at least 2 views");
    let bounding = scene.bounding_radius();
    if radius <= bounding {
        return Err(SceneError::OrbitRadiusTooSmall { radius, bounding });
    }
    let c = scene.centroid();
    let centroid = Vec3::from_f64(c[0], c[1], c[2]);
    let mut poses = Vec::with_capacity(n_views);
    for view in 0..n_views {
        let angle = 2.0 * std::f64::consts::PI * view as f64 / n_views as f64;
        let position = centroid + Vec3::from_f64(radius * angle.cos(), radius * angle.sin(), height);
        poses.push(look_at(position, centroid));
    }
    Ok(poses)
}

/// World-from-camera pose at `position` with the optical axis through
/// `target`; camera convention x-right, y-down, z-forward.
pub fn look_at<T: Scalar>(position: Vec3<T>, target: Vec3<T>) -> Pose<T> {
    let forward = (target - position).normalized();
    let up_hint = if forward.z.abs() > T::lit(0.999) {
        Vec3::new(T::one(), T::zero(), T::zero())
    } else {
        Vec3::new(T::zero(), T::zero(), T::one())
    };
    let right = forward.cross(up_hint).normalized();
    // right x down = forward holds by construction, so det = +1.
    let down = forward.cross(right).normalized();
    Pose::new(Mat3::from_cols(right, down, forward), position)
}

/// Multiplies each valid depth by a `N(1, sigma^2)` sample, plus a uniform
/// outlier scale for a random `outlier_rate` fraction of pixels.
/// Deterministic for a fixed config.
pub fn perturb_depth<T: Scalar>(depth: &DepthMap<T>, cfg: &NoiseConfig) -> DepthMap<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = depth.clone();
    for value in out.values.iter_mut() {
        if *value <= T::zero() {
            continue;
        }
        let z: f64 = rng.sample(StandardNormal);
        let mut d = value.as_f64() * (1.0 + cfg.multiplicative_sigma * z);
        let roll: f64 = rng.random();
        if roll < cfg.outlier_rate {
            let (lo, hi) = cfg.outlier_scale_range;
            d *= rng.random_range(lo..hi);
        }
        *value = T::lit(d.max(1e-4));
    }
    out
}

/// The supervision set: grid node positions with exact normalized TSDF
/// values. Exact at every point by construction, whatever the grid
/// resolution.
pub fn sample_ground_truth<T: Scalar>(
    scene: &SdfScene,
    region: &GridSpec<T>,
    tau: T,
) -> Vec<(Vec3<T>, T)> {
    assert!(tau > T::zero());
    let mut out = Vec::with_capacity(region.len());
    for i in 0..region.dims[0] {
        for j in 0..region.dims[1] {
            for k in 0..region.dims[2] {
                let p = region.center(i, j, k);
                out.push((p, sdf_eval(scene, p, Some(tau))));
            }
        }
    }
    out
}

/// Fits a voxel grid around the scene's bounded primitives with `margin`
/// meters of padding on every side.
pub fn fit_grid<T: Scalar>(scene: &SdfScene, voxel_size: f64, margin: f64) -> GridSpec<T> {
    let (lo, hi) = scene.bounds(margin);
    let dims = [
        ((hi[0] - lo[0]) / voxel_size).ceil() as usize + 1,
        ((hi[1] - lo[1]) / voxel_size).ceil() as usize + 1,
        ((hi[2] - lo[2]) / voxel_size).ceil() as usize + 1,
    ];
    GridSpec::new(
        Vec3::from_f64(lo[0], lo[1], lo[2]),
        T::lit(voxel_size),
        dims,
    )
}

/// Named benchmark scenes. Seeds jitter positions and sizes a little so a
/// preset yields a scene family rather than a single fixture.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScenePreset {
    /// One free-floating sphere.
    Sphere,
    /// A yawed box resting on a floor plane; sharp corners everywhere.
    BoxCorner,
    /// A thin upright slab on a floor plane; sub-voxel thickness at 4 cm.
    Thin,
    /// A floor with several objects and plenty of empty space.
    Room,
}

impl ScenePreset {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "sphere" => Some(Self::Sphere),
            "box-corner" | "box_corner" => Some(Self::BoxCorner),
            "thin" => Some(Self::Thin),
            "room" => Some(Self::Room),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Sphere => "sphere",
            Self::BoxCorner => "box-corner",
            Self::Thin => "thin",
            Self::Room => "room",
        }
    }

    pub fn build(&self, seed: u64) -> SdfScene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(7));
        let mut jitter = |scale: f64| rng.random_range(-scale..scale);
        match self {
            Self::Sphere => SdfScene::new(vec![Primitive::Sphere {
                center: [jitter(0.05), jitter(0.05), jitter(0.05)],
                radius: 0.5 + jitter(0.04),
            }]),
            Self::BoxCorner => {
                let hx = 0.34 + jitter(0.05);
                let hy = 0.26 + jitter(0.05);
                let hz = 0.22 + jitter(0.04);
                SdfScene::new(vec![
                    Primitive::Box {
                        center: [jitter(0.08), jitter(0.08), hz],
                        half_extents: [hx, hy, hz],
                        yaw: 0.35 + jitter(0.25),
                    },
                    Primitive::Plane {
                        normal: [0.0, 0.0, 1.0],
                        offset: 0.0,
                    },
                ])
            }
            Self::Thin => {
                let half_th = 0.012 + jitter(0.003);
                let hh = 0.2 + jitter(0.03);
                SdfScene::new(vec![
                    Primitive::Box {
                        center: [jitter(0.05), jitter(0.05), hh],
                        half_extents: [0.3 + jitter(0.04), half_th, hh],
                        yaw: 0.2 + jitter(0.2),
                    },
                    Primitive::Box {
                        center: [jitter(0.05), 0.38 + jitter(0.04), 0.1],
                        half_extents: [0.16, 0.12, 0.1],
                        yaw: -0.3 + jitter(0.2),
                    },
                    Primitive::Plane {
                        normal: [0.0, 0.0, 1.0],
                        offset: 0.0,
                    },
                ])
            }
            Self::Room => {
                let mut prims = vec![Primitive::Plane {
                    normal: [0.0, 0.0, 1.0],
                    offset: 0.0,
                }];
                prims.push(Primitive::Box {
                    center: [-0.55 + jitter(0.1), -0.5 + jitter(0.1), 0.18],
                    half_extents: [0.22, 0.16, 0.18],
                    yaw: jitter(0.4),
                });
                prims.push(Primitive::Box {
                    center: [0.6 + jitter(0.1), 0.1 + jitter(0.1), 0.12],
                    half_extents: [0.14, 0.2, 0.12],
                    yaw: 0.7 + jitter(0.4),
                });
                prims.push(Primitive::Sphere {
                    center: [0.0 + jitter(0.15), 0.62 + jitter(0.1), 0.16],
                    radius: 0.16 + jitter(0.03),
                });
                SdfScene::new(prims)
            }
        }
    }
}

/// Checks that the scene centroid projects onto the principal point; used by
/// trajectory tests and the CLI's camera sanity pass.
pub fn centroid_projection_error<T: Scalar>(
    scene: &SdfScene,
    intr: &Intrinsics<T>,
    pose: &Pose<T>,
) -> T {
    let c = scene.centroid();
    let pr = project_point(Vec3::from_f64(c[0], c[1], c[2]), intr, pose);
    let du = pr.u - intr.cx;
    let dv = pr.v - intr.cy;
    (du * du + dv * dv).sqrt()
}
