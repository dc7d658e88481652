//! Reconstruction metrics: 3D mesh metrics with observability trimming and
//! 2D rendered-depth metrics.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{project_point, GridSpec, Intrinsics, Pose, Vec3, Z_MIN};
use crate::mesh::TriangleMesh;
use crate::scalar::Scalar;
use crate::scene::DepthMap;

/// Distance threshold (meters) for precision/recall.
pub const DEFAULT_DISTANCE_THRESHOLD: f64 = 0.05;
/// Mesh sampling density: one point per cm^2.
pub const DEFAULT_SAMPLES_PER_M2: f64 = 1.0e4;
/// Fixed sampling seed; metric variance across seeds is well under the
/// reporting precision at this density.
pub const DEFAULT_SAMPLING_SEED: u64 = 0x5eed;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("3D mesh metrics are undefined for an empty {0} mesh")]
    EmptyMesh(&'static str),
    #[error("got {rendered} rendered frames but {gt} ground-truth frames")]
    MismatchedFrames { rendered: usize, gt: usize },
}

/// 3D mesh metrics; distances in cm, rates in percent.
#[derive(Clone, Copy, Debug)]
pub struct Metrics3D {
    pub acc: f64,
    pub comp: f64,
    pub chamfer: f64,
    pub prec: f64,
    pub rec: f64,
    pub f1: f64,
    pub threshold: f64,
}

/// Rendered-depth metrics; `l1` in cm, deltas and completeness in percent.
/// Ratio metrics are NaN when no frame has overlapping valid pixels.
#[derive(Clone, Copy, Debug)]
pub struct Metrics2D {
    pub l1: f64,
    pub absrel: f64,
    pub sqrel: f64,
    pub delta_105: f64,
    pub delta_125: f64,
    pub completeness: f64,
}

/// Per-voxel flag: observed by at least one ground-truth depth frame
/// (projects in-image with z < D(u) + tau).
#[derive(Clone, Debug)]
pub struct VisibilityVolume<T> {
    pub spec: GridSpec<T>,
    pub observed: Vec<bool>,
}

impl<T: Scalar> VisibilityVolume<T> {
    /// Marks every voxel observed; for synthetic full-coverage tests.
    pub fn full(spec: GridSpec<T>) -> Self {
        let n = spec.len();
        Self {
            spec,
            observed: vec![true; n],
        }
    }

    /// Builds visibility from ground-truth depth frames. Invalid depth
    /// pixels observe free space out to `miss_depth` meters (a synthetic
    /// miss means the ray saw nothing within range).
    pub fn from_depths(
        spec: GridSpec<T>,
        depths: &[DepthMap<T>],
        cameras: &[(Intrinsics<T>, Pose<T>)],
        tau: T,
        miss_depth: f64,
    ) -> Self {
        let n = spec.len();
        let observed: Vec<bool> = (0..n)
            .into_par_iter()
            .map(|idx| {
                let [i, j, k] = spec.unflat(idx);
                let p = spec.center(i, j, k);
                depths.iter().zip(cameras.iter()).any(|(d, (intr, pose))| {
                    let pr = project_point(p, intr, pose);
                    if !pr.valid {
                        return false;
                    }
                    let depth = d.at_nearest(pr.u, pr.v).unwrap_or(T::lit(miss_depth));
                    pr.z < depth + tau
                })
            })
            .collect();
        Self { spec, observed }
    }

    pub fn is_observed(&self, p: Vec3<T>) -> bool {
        let g = self.spec.world_to_grid(p);
        let idx = |c: T, d: usize| -> Option<usize> {
            let r = c.round().to_isize()?;
            (r >= 0 && (r as usize) < d).then_some(r as usize)
        };
        match (
            idx(g.x, self.spec.dims[0]),
            idx(g.y, self.spec.dims[1]),
            idx(g.z, self.spec.dims[2]),
        ) {
            (Some(i), Some(j), Some(k)) => self.observed[self.spec.flat(i, j, k)],
            _ => false,
        }
    }
}

/// Area-weighted surface samples, one point per cm^2 by default.
///
/// Each triangle is sampled independently (count = area x density with
/// stochastic rounding from a per-triangle stream), so appending triangles
/// to a mesh never perturbs the samples of existing ones.
pub fn sample_mesh_points<T: Scalar>(
    mesh: &TriangleMesh<T>,
    samples_per_m2: f64,
    seed: u64,
) -> Vec<Vec3<T>> {
    let mut out = Vec::new();
    for t in 0..mesh.triangles.len() {
        let [a, b, c] = mesh.triangle_vertices(t);
        let area = mesh.triangle_area(t).as_f64();
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (t as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let expect = area * samples_per_m2;
        let count = expect.floor() as usize
            + if rng.random::<f64>() < expect.fract() {
                1
            } else {
                0
            };
        for _ in 0..count {
            let mut u: f64 = rng.random();
            let mut v: f64 = rng.random();
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            out.push(a + (b - a) * T::lit(u) + (c - a) * T::lit(v));
        }
    }
    out
}

/// Uniform-grid exact nearest-neighbor index over a point set.
pub struct PointGrid<T> {
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<u32>>,
    points: Vec<Vec3<T>>,
}

impl<T: Scalar> PointGrid<T> {
    pub fn build(points: Vec<Vec3<T>>, cell: f64) -> Self {
        let mut cells: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(*p, cell)).or_default().push(i as u32);
        }
        Self { cell, cells, points }
    }

    fn key(p: Vec3<T>, cell: f64) -> (i64, i64, i64) {
        (
            (p.x.as_f64() / cell).floor() as i64,
            (p.y.as_f64() / cell).floor() as i64,
            (p.z.as_f64() / cell).floor() as i64,
        )
    }

    /// Exact nearest distance via expanding Chebyshev shells: once the best
    /// candidate is closer than anything an unscanned shell could hold, it
    /// is the answer.
    pub fn nearest_distance(&self, p: Vec3<T>) -> f64 {
        assert!(!self.points.is_empty());
        let (cx, cy, cz) = Self::key(p, self.cell);
        let mut best = f64::INFINITY;
        let mut radius: i64 = 0;
        loop {
            for dx in -radius..=radius {
                for dy in -radius..=radius {
                    for dz in -radius..=radius {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != radius {
                            continue;
                        }
                        if let Some(bucket) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                            for &i in bucket {
                                let d = (self.points[i as usize] - p).norm().as_f64();
                                best = best.min(d);
                            }
                        }
                    }
                }
            }
            // Unscanned cells differ by more than `radius` in some axis, so
            // their points are at least radius * cell away.
            if best <= radius as f64 * self.cell || radius > 4_000 {
                return best;
            }
            radius += 1;
        }
    }
}

/// 3D mesh metrics with trimming: predicted samples inside never-observed
/// voxels are excluded from accuracy/precision (in-painting is not
/// penalized) while completeness/recall always use the full prediction.
pub fn metrics_3d<T: Scalar>(
    pred: &TriangleMesh<T>,
    gt: &TriangleMesh<T>,
    vis: &VisibilityVolume<T>,
    threshold: f64,
) -> Result<Metrics3D, EvalError> {
    if pred.is_empty() {
        return Err(EvalError::EmptyMesh("predicted"));
    }
    if gt.is_empty() {
        return Err(EvalError::EmptyMesh("ground-truth"));
    }
    let pred_pts = sample_mesh_points(pred, DEFAULT_SAMPLES_PER_M2, DEFAULT_SAMPLING_SEED);
    let gt_pts = sample_mesh_points(gt, DEFAULT_SAMPLES_PER_M2, DEFAULT_SAMPLING_SEED);
    let trimmed: Vec<Vec3<T>> = pred_pts
        .iter()
        .copied()
        .filter(|&p| vis.is_observed(p))
        .collect();
    let gt_index = PointGrid::build(gt_pts.clone(), threshold);
    let pred_index = PointGrid::build(pred_pts, threshold);

    let pred_to_gt: Vec<f64> = trimmed
        .par_iter()
        .map(|&p| gt_index.nearest_distance(p))
        .collect();
    let gt_to_pred: Vec<f64> = gt_pts
        .par_iter()
        .map(|&p| pred_index.nearest_distance(p))
        .collect();

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let within = |v: &[f64]| 100.0 * v.iter().filter(|&&d| d < threshold).count() as f64 / v.len() as f64;
    let (acc_m, prec) = if pred_to_gt.is_empty() {
        (f64::NAN, 0.0)
    } else {
        (mean(&pred_to_gt), within(&pred_to_gt))
    };
    let comp_m = mean(&gt_to_pred);
    let rec = within(&gt_to_pred);
    let f1 = if prec + rec > 0.0 {
        2.0 * prec * rec / (prec + rec)
    } else {
        0.0
    };
    Ok(Metrics3D {
        acc: 100.0 * acc_m,
        comp: 100.0 * comp_m,
        chamfer: 100.0 * 0.5 * (acc_m + comp_m),
        prec,
        rec,
        f1,
        threshold,
    })
}

/// Renders a z-depth map of the mesh by nearest ray-triangle intersection.
pub fn render_depth<T: Scalar>(
    mesh: &TriangleMesh<T>,
    intr: &Intrinsics<T>,
    pose: &Pose<T>,
) -> DepthMap<T> {
    let (width, height) = (intr.width, intr.height);
    let mut map = DepthMap::new_invalid(width, height);
    if mesh.is_empty() {
        return map;
    }
    // Camera-frame triangles, binned by conservative pixel bounding box.
    let cam_tris: Vec<[Vec3<T>; 3]> = (0..mesh.triangles.len())
        .map(|t| mesh.triangle_vertices(t).map(|v| pose.inverse_transform(v)))
        .collect();
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); width * height];
    let mut global: Vec<u32> = Vec::new();
    for (t, tri) in cam_tris.iter().enumerate() {
        if tri.iter().all(|v| v.z <= T::lit(Z_MIN)) {
            continue;
        }
        if tri.iter().any(|v| v.z <= T::lit(Z_MIN)) {
            // Straddles the near plane; test it everywhere.
            global.push(t as u32);
            continue;
        }
        let mut u_lo = f64::INFINITY;
        let mut u_hi = f64::NEG_INFINITY;
        let mut v_lo = f64::INFINITY;
        let mut v_hi = f64::NEG_INFINITY;
        for v in tri {
            let u = (intr.fx * v.x / v.z + intr.cx).as_f64();
            let w = (intr.fy * v.y / v.z + intr.cy).as_f64();
            u_lo = u_lo.min(u);
            u_hi = u_hi.max(u);
            v_lo = v_lo.min(w);
            v_hi = v_hi.max(w);
        }
        let u0 = (u_lo.floor().max(0.0)) as usize;
        let v0 = (v_lo.floor().max(0.0)) as usize;
        if u_lo > (width - 1) as f64 || v_lo > (height - 1) as f64 || u_hi < 0.0 || v_hi < 0.0 {
            continue;
        }
        let u1 = (u_hi.ceil().min((width - 1) as f64)) as usize;
        let v1 = (v_hi.ceil().min((height - 1) as f64)) as usize;
        for vv in v0..=v1 {
            for uu in u0..=u1 {
                bins[vv * width + uu].push(t as u32);
            }
        }
    }
    map.values = (0..width * height)
        .into_par_iter()
        .map(|pix| {
            let u = T::from_usize(pix % width).unwrap();
            let v = T::from_usize(pix / width).unwrap();
            let dir = Vec3::new((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, T::one());
            let mut best = T::infinity();
            for &t in bins[pix].iter().chain(global.iter()) {
                if let Some(z) = ray_triangle_z(dir, &cam_tris[t as usize]) {
                    best = best.min(z);
                }
            }
            if best.is_finite() {
                best
            } else {
                T::zero()
            }
        })
        .collect();
    map
}

/// Möller–Trumbore against a camera-frame triangle for a ray from the
/// origin along `dir` (with `dir.z = 1`, the ray parameter is z-depth).
fn ray_triangle_z<T: Scalar>(dir: Vec3<T>, tri: &[Vec3<T>; 3]) -> Option<T> {
    let [a, b, c] = *tri;
    let e1 = b - a;
    let e2 = c - a;
    let pvec = dir.cross(e2);
    let det = e1.dot(pvec);
    if det.abs() < T::lit(1e-14) {
        return None;
    }
    let inv = T::one() / det;
    let tvec = -a;
    let u = tvec.dot(pvec) * inv;
    if u < -T::lit(1e-12) || u > T::one() + T::lit(1e-12) {
        return None;
    }
    let qvec = tvec.cross(e1);
    let v = dir.dot(qvec) * inv;
    if v < -T::lit(1e-12) || u + v > T::one() + T::lit(1e-12) {
        return None;
    }
    let z = e2.dot(qvec) * inv;
    (z > T::lit(Z_MIN)).then_some(z)
}

/// Per-frame threshold accuracy: percent of overlapping pixels with
/// `max(d/d_hat, d_hat/d) < t`.
pub fn delta_percent<T: Scalar>(rendered: &DepthMap<T>, gt: &DepthMap<T>, t: f64) -> f64 {
    let mut total = 0usize;
    let mut good = 0usize;
    for (r, g) in rendered.values.iter().zip(gt.values.iter()) {
        if *r > T::zero() && *g > T::zero() {
            total += 1;
            let ratio = (*g / *r).max(*r / *g).as_f64();
            if ratio < t {
                good += 1;
            }
        }
    }
    if total == 0 {
        f64::NAN
    } else {
        100.0 * good as f64 / total as f64
    }
}

/// Rendered-depth metrics over matched frame lists, averaged per frame.
/// Frames without overlapping valid pixels contribute only to completeness.
pub fn metrics_2d<T: Scalar>(
    rendered: &[DepthMap<T>],
    gt: &[DepthMap<T>],
) -> Result<Metrics2D, EvalError> {
    if rendered.len() != gt.len() {
        return Err(EvalError::MismatchedFrames {
            rendered: rendered.len(),
            gt: gt.len(),
        });
    }
    let mut l1 = Vec::new();
    let mut absrel = Vec::new();
    let mut sqrel = Vec::new();
    let mut d105 = Vec::new();
    let mut d125 = Vec::new();
    let mut completeness = Vec::new();
    for (r, g) in rendered.iter().zip(gt.iter()) {
        let mut n = 0usize;
        let mut gt_valid = 0usize;
        let mut s_l1 = 0.0;
        let mut s_abs = 0.0;
        let mut s_sq = 0.0;
        for (rv, gv) in r.values.iter().zip(g.values.iter()) {
            if *gv > T::zero() {
                gt_valid += 1;
                if *rv > T::zero() {
                    n += 1;
                    let d = gv.as_f64();
                    let dh = rv.as_f64();
                    s_l1 += (d - dh).abs();
                    s_abs += (d - dh).abs() / d;
                    s_sq += (d - dh) * (d - dh) / d;
                }
            }
        }
        if gt_valid > 0 {
            completeness.push(100.0 * n as f64 / gt_valid as f64);
        }
        if n > 0 {
            l1.push(100.0 * s_l1 / n as f64);
            absrel.push(s_abs / n as f64);
            sqrel.push(s_sq / n as f64);
            d105.push(delta_percent(r, g, 1.05));
            d125.push(delta_percent(r, g, 1.25));
        }
    }
    let mean = |v: &Vec<f64>| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(Metrics2D {
        l1: mean(&l1),
        absrel: mean(&absrel),
        sqrel: mean(&sqrel),
        delta_105: mean(&d105),
        delta_125: mean(&d125),
        completeness: mean(&completeness),
    })
}
