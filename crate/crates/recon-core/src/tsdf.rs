//! Curless–Levoy TSDF fusion and near-surface occupancy.
//!
//! Fusion uses unit per-view weights so the stored value is the plain mean
//! of the per-view truncated distances, which keeps the brute-force point
//! oracle exactly equal to the gridded fusion.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{project_point, trilinear_sample_scalar, GridSpec, Intrinsics, Pose, Vec3};
use crate::scalar::Scalar;
use crate::scene::DepthMap;

/// Default truncation distance as a multiple of the voxel size.
pub const DEFAULT_TRUNCATION_VOXELS: f64 = 3.0;

#[derive(Debug, Error)]
pub enum FuseError {
    #[error("fusion needs at least one view")]
    NoViews,
    #[error("got {depths} depth maps but {cameras} cameras")]
    MismatchedViews { depths: usize, cameras: usize },
}

#[derive(Debug, Error)]
pub enum VolumeIoError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad volume file: {0}")]
    Format(String),
}

/// Voxel grid of normalized truncated signed distances plus observation
/// weights.
///
/// Invariants: values lie in [-1, 1]; a voxel has weight 0 iff it was never
/// observed, and unobserved voxels hold the free-space sentinel +1.
#[derive(Clone, Debug, PartialEq)]
pub struct TsdfVolume<T> {
    pub spec: GridSpec<T>,
    pub values: Vec<T>,
    pub weights: Vec<T>,
    /// Truncation distance in meters.
    pub truncation: T,
}

impl<T: Scalar> TsdfVolume<T> {
    /// An unobserved volume: all values +1, all weights 0.
    pub fn new_unobserved(spec: GridSpec<T>, truncation: T) -> Self {
        let n = spec.len();
        Self {
            spec,
            values: vec![T::one(); n],
            weights: vec![T::zero(); n],
            truncation,
        }
    }

    pub fn from_fn(spec: GridSpec<T>, truncation: T, mut f: impl FnMut(Vec3<T>) -> T) -> Self {
        let mut values = Vec::with_capacity(spec.len());
        for i in 0..spec.dims[0] {
            for j in 0..spec.dims[1] {
                for k in 0..spec.dims[2] {
                    values.push(f(spec.center(i, j, k)));
                }
            }
        }
        Self {
            weights: vec![T::one(); values.len()],
            spec,
            values,
            truncation,
        }
    }

    /// Trilinear sample of the stored values at a world point; the flag
    /// reports border clamping.
    pub fn sample(&self, p: Vec3<T>) -> (T, bool) {
        trilinear_sample_scalar(&self.spec, &self.values, p)
    }

    pub fn observed_fraction(&self) -> f64 {
        let n = self.weights.iter().filter(|&&w| w > T::zero()).count();
        n as f64 / self.weights.len().max(1) as f64
    }

    /// Writes `header (dims, voxel_size, origin, truncation) + f32 values +
    /// f32 weights`, everything little-endian, values in flat index order.
    pub fn write(&self, path: &Path) -> Result<(), VolumeIoError> {
        let mut w = BufWriter::new(File::create(path)?);
        for d in self.spec.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&(self.spec.voxel_size.as_f64() as f32).to_le_bytes())?;
        for c in [self.spec.origin.x, self.spec.origin.y, self.spec.origin.z] {
            w.write_all(&(c.as_f64() as f32).to_le_bytes())?;
        }
        w.write_all(&(self.truncation.as_f64() as f32).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
        for v in &self.weights {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, VolumeIoError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut u32buf = [0u8; 4];
        let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32, VolumeIoError> {
            r.read_exact(&mut u32buf)?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let dims = [
            read_u32(&mut r)? as usize,
            read_u32(&mut r)? as usize,
            read_u32(&mut r)? as usize,
        ];
        if dims.iter().any(|&d| d == 0 || d > 1 << 14) {
            return Err(VolumeIoError::Format(format!("implausible dims {dims:?}")));
        }
        let mut f32buf = [0u8; 4];
        let mut read_f32 = |r: &mut BufReader<File>| -> Result<f32, VolumeIoError> {
            r.read_exact(&mut f32buf)?;
            Ok(f32::from_le_bytes(f32buf))
        };
        let voxel_size = read_f32(&mut r)?;
        let ox = read_f32(&mut r)?;
        let oy = read_f32(&mut r)?;
        let oz = read_f32(&mut r)?;
        let truncation = read_f32(&mut r)?;
        let n = dims[0] * dims[1] * dims[2];
        let read_block = |r: &mut BufReader<File>, what: &str| -> Result<Vec<T>, VolumeIoError> {
            let mut out = Vec::with_capacity(n);
            let mut buf = [0u8; 4];
            for i in 0..n {
                r.read_exact(&mut buf).map_err(|_| {
                    VolumeIoError::Format(format!("{what} truncated: expected {n} entries, got {i}"))
                })?;
                out.push(T::lit(f32::from_le_bytes(buf) as f64));
            }
            Ok(out)
        };
        let values = read_block(&mut r, "values")?;
        let weights = read_block(&mut r, "weights")?;
        Ok(Self {
            spec: GridSpec::new(
                Vec3::from_f64(ox as f64, oy as f64, oz as f64),
                T::lit(voxel_size as f64),
                dims,
            ),
            values,
            weights,
            truncation: T::lit(truncation as f64),
        })
    }
}

/// Per-voxel near-surface occupancy flags; dims match the paired volume.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid<T> {
    pub spec: GridSpec<T>,
    pub flags: Vec<bool>,
}

impl<T: Scalar> OccupancyGrid<T> {
    pub fn occupied_fraction(&self) -> f64 {
        let n = self.flags.iter().filter(|&&f| f).count();
        n as f64 / self.flags.len().max(1) as f64
    }
}

/// One fused sample: truncated distance at a point from one view.
///
/// The carving guard skips samples at `sdf <= -truncation` (the boundary
/// itself is skipped) so far-behind-surface voxels stay unobserved.
#[inline]
fn view_contribution<T: Scalar>(
    p: Vec3<T>,
    depth: &DepthMap<T>,
    intr: &Intrinsics<T>,
    pose: &Pose<T>,
    truncation: T,
) -> Option<T> {
    let pr = project_point(p, intr, pose);
    if !pr.valid {
        return None;
    }
    let d = depth.at_nearest(pr.u, pr.v)?;
    let sdf = d - pr.z;
    if sdf <= -truncation {
        return None;
    }
    Some((sdf / truncation).max(-T::one()).min(T::one()))
}

/// Brute-force single-point fusion; the independent oracle for
/// [`fuse_depths`] and the continuous-space fusion used off-lattice.
/// Returns `(value, observed)`; unobserved points report `(+1, false)`.
pub fn tsdf_point_oracle<T: Scalar>(
    p: Vec3<T>,
    depths: &[DepthMap<T>],
    cameras: &[(Intrinsics<T>, Pose<T>)],
    truncation: T,
) -> (T, bool) {
    let mut sum = T::zero();
    let mut count = 0usize;
    for (depth, (intr, pose)) in depths.iter().zip(cameras.iter()) {
        if let Some(c) = view_contribution(p, depth, intr, pose, truncation) {
            sum += c;
            count += 1;
        }
    }
    if count == 0 {
        (T::one(), false)
    } else {
        (sum / T::from_usize(count).unwrap(), true)
    }
}

/// Fuses depth maps into a TSDF volume on `spec`.
///
/// Per voxel center and view with a valid projection and valid depth pixel:
/// `sdf = D(u, v) - z`; samples behind the carving guard are skipped, the
/// rest contribute `clamp(sdf / truncation, -1, 1)` with unit weight. The
/// stored value is the mean contribution and the weight the contribution
/// count.
pub fn fuse_depths<T: Scalar>(
    depths: &[DepthMap<T>],
    cameras: &[(Intrinsics<T>, Pose<T>)],
    spec: &GridSpec<T>,
    truncation: T,
) -> Result<TsdfVolume<T>, FuseError> {
    if depths.is_empty() {
        return Err(FuseError::NoViews);
    }
    if depths.len() != cameras.len() {
        return Err(FuseError::MismatchedViews {
            depths: depths.len(),
            cameras: cameras.len(),
        });
    }
    let n = spec.len();
    let cells: Vec<(T, T)> = (0..n)
        .into_par_iter()
        .map(|idx| {
            let [i, j, k] = spec.unflat(idx);
            let p = spec.center(i, j, k);
            let (value, observed) = tsdf_point_oracle(p, depths, cameras, truncation);
            if observed {
                let mut count = T::zero();
                for (depth, (intr, pose)) in depths.iter().zip(cameras.iter()) {
                    if view_contribution(p, depth, intr, pose, truncation).is_some() {
                        count += T::one();
                    }
                }
                (value, count)
            } else {
                (T::one(), T::zero())
            }
        })
        .collect();
    let mut values = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for (v, w) in cells {
        values.push(v);
        weights.push(w);
    }
    Ok(TsdfVolume {
        spec: *spec,
        values,
        weights,
        truncation,
    })
}

/// Ground-truth occupancy: a voxel is near-surface iff |value| < 1, then the
/// mask is dilated with a full 3x3x3 structuring element (clipped at the
/// borders).
pub fn occupancy_ground_truth<T: Scalar>(volume: &TsdfVolume<T>) -> OccupancyGrid<T> {
    let spec = volume.spec;
    let near: Vec<bool> = volume.values.iter().map(|v| v.abs() < T::one()).collect();
    let flags = dilate3(&near, spec.dims);
    OccupancyGrid { spec, flags }
}

/// 3x3x3 boolean dilation with clipped borders.
pub fn dilate3(flags: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [nx, ny, nz] = dims;
    let flat = |i: usize, j: usize, k: usize| (i * ny + j) * nz + k;
    let mut out = vec![false; flags.len()];
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                if !flags[flat(i, j, k)] {
                    continue;
                }
                for di in i.saturating_sub(1)..=(i + 1).min(nx - 1) {
                    for dj in j.saturating_sub(1)..=(j + 1).min(ny - 1) {
                        for dk in k.saturating_sub(1)..=(k + 1).min(nz - 1) {
                            out[flat(di, dj, dk)] = true;
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Mat3;
    use crate::scene::{
        orbit_trajectory, raycast_depth, sample_ground_truth, sdf_eval, Primitive, SdfScene,
        DEFAULT_MAX_DEPTH,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constant_depth_view(depth: f64) -> (DepthMap<f64>, (Intrinsics<f64>, Pose<f64>)) {
        let intr = Intrinsics::new(100.0, 100.0, 32.0, 24.0, 65, 49);
        let mut map = DepthMap::new_invalid(65, 49);
        map.values.fill(depth);
        (map, (intr, Pose::identity()))
    }

    #[test]
    fn fusion_matches_hand_computed_value() {
        let (map, cam) = constant_depth_view(2.0);
        let spec = GridSpec::new(Vec3::from_f64(0.0, 0.0, 1.9), 0.1, [1, 1, 1]);
        let vol = fuse_depths(&[map], &[cam], &spec, 0.12).unwrap();
        // sdf = 2.0 - 1.9 = 0.1; clamp(0.1 / 0.12) = 0.8333...
        assert!((vol.values[0] - 0.1 / 0.12).abs() < 1e-12);
        assert_eq!(vol.weights[0], 1.0);
    }

    #[test]
    fn voxel_at_surface_is_zero() {
        let (map, cam) = constant_depth_view(2.0);
        let spec = GridSpec::new(Vec3::from_f64(0.0, 0.0, 2.0), 0.1, [1, 1, 1]);
        let vol = fuse_depths(&[map], &[cam], &spec, 0.12).unwrap();
        assert_eq!(vol.values[0], 0.0);
    }

    #[test]
    fn unseen_voxel_is_unobserved_plus_one() {
        let (map, cam) = constant_depth_view(2.0);
        // Behind the camera.
        let spec = GridSpec::new(Vec3::from_f64(0.0, 0.0, -1.0), 0.1, [1, 1, 1]);
        let vol = fuse_depths(&[map], &[cam], &spec, 0.12).unwrap();
        assert_eq!(vol.values[0], 1.0);
        assert_eq!(vol.weights[0], 0.0);
    }

    #[test]
    fn carving_guard_boundary_is_skipped() {
        let (map, cam) = constant_depth_view(2.0);
        // Exactly truncation behind the surface: sdf = -tau, skipped.
        let p = Vec3::from_f64(0.0, 0.0, 2.12);
        let (v, observed) = tsdf_point_oracle(p, &[map], &[cam], 0.12);
        assert!(!observed);
        assert_eq!(v, 1.0);
    }

    #[test]
    fn symmetric_contributions_average_to_zero() {
        let (map_a, cam_a) = constant_depth_view(2.06); // sdf +0.06 -> +0.5
        let (map_b, cam_b) = constant_depth_view(1.94); // sdf -0.06 -> -0.5
        let p = Vec3::from_f64(0.0, 0.0, 2.0);
        let (v, observed) = tsdf_point_oracle(p, &[map_a, map_b], &[cam_a, cam_b], 0.12);
        assert!(observed);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn point_oracle_equals_fusion_at_voxel_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..5 {
            let scene = SdfScene::new(vec![Primitive::Sphere {
                center: [
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                ],
                radius: rng.random_range(0.3..0.6),
            }]);
            let intr = Intrinsics::new(60.0, 60.0, 24.0, 18.0, 49, 37);
            let poses: Vec<Pose<f64>> = orbit_trajectory(&scene, 3, 2.0, 0.7).unwrap();
            let cameras: Vec<_> = poses.iter().map(|p| (intr, *p)).collect();
            let depths: Vec<_> = poses
                .iter()
                .map(|p| raycast_depth(&scene, &intr, p, DEFAULT_MAX_DEPTH))
                .collect();
            let spec = GridSpec::new(Vec3::from_f64(-0.6, -0.6, -0.6), 0.15, [8, 8, 8]);
            let vol = fuse_depths(&depths, &cameras, &spec, 0.12).unwrap();
            for idx in 0..spec.len() {
                let [i, j, k] = spec.unflat(idx);
                let (v, _) = tsdf_point_oracle(spec.center(i, j, k), &depths, &cameras, 0.12);
                assert!((v - vol.values[idx]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn fusion_is_view_order_invariant() {
        let scene = SdfScene::new(vec![Primitive::Sphere {
            center: [0.0, 0.0, 0.0],
            radius: 0.5,
        }]);
        let intr = Intrinsics::new(60.0, 60.0, 24.0, 18.0, 49, 37);
        let poses: Vec<Pose<f64>> = orbit_trajectory(&scene, 4, 2.0, 0.5).unwrap();
        let depths: Vec<_> = poses
            .iter()
            .map(|p| raycast_depth(&scene, &intr, p, DEFAULT_MAX_DEPTH))
            .collect();
        let cameras: Vec<_> = poses.iter().map(|p| (intr, *p)).collect();
        let spec = GridSpec::new(Vec3::from_f64(-0.6, -0.6, -0.6), 0.12, [11, 11, 11]);
        let forward = fuse_depths(&depths, &cameras, &spec, 0.12).unwrap();
        let depths_rev: Vec<_> = depths.iter().rev().cloned().collect();
        let cameras_rev: Vec<_> = cameras.iter().rev().cloned().collect();
        let reversed = fuse_depths(&depths_rev, &cameras_rev, &spec, 0.12).unwrap();
        for (a, b) in forward.values.iter().zip(reversed.values.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn sign_convention_free_space_positive() {
        let scene = SdfScene::new(vec![Primitive::Sphere {
            center: [0.0, 0.0, 0.0],
            radius: 0.5,
        }]);
        let intr = Intrinsics::new(80.0, 80.0, 32.0, 24.0, 65, 49);
        let pose = crate::scene::look_at(Vec3::from_f64(0.0, 0.0, -2.0), Vec3::zero());
        let depth = raycast_depth(&scene, &intr, &pose, DEFAULT_MAX_DEPTH);
        let cams = [(intr, pose)];
        // Between camera and surface: positive.
        let (front, _) = tsdf_point_oracle(Vec3::from_f64(0.0, 0.0, -0.56), &[depth.clone()], &cams, 0.12);
        assert!(front > 0.0);
        // Just behind the surface (within truncation): negative.
        let (behind, observed) =
            tsdf_point_oracle(Vec3::from_f64(0.0, 0.0, -0.45), &[depth], &cams, 0.12);
        assert!(observed);
        assert!(behind < 0.0);
    }

    #[test]
    fn fusion_against_analytic_ground_truth() {
        // Noise-free fusion and direct SDF sampling agree inside the
        // truncation band; this ties the two ground-truth paths together.
        let scene = SdfScene::new(vec![Primitive::Sphere {
            center: [0.0, 0.0, 0.0],
            radius: 0.5,
        }]);
        let intr = Intrinsics::new(60.0, 60.0, 32.0, 24.0, 65, 49);
        let poses: Vec<Pose<f64>> = orbit_trajectory(&scene, 12, 2.0, 0.8).unwrap();
        let cameras: Vec<_> = poses.iter().map(|p| (intr, *p)).collect();
        let depths: Vec<_> = poses
            .iter()
            .map(|p| raycast_depth(&scene, &intr, p, DEFAULT_MAX_DEPTH))
            .collect();
        let tau = 0.12;
        let spec = GridSpec::new(Vec3::from_f64(-0.7, -0.7, -0.7), 0.04, [36, 36, 36]);
        let vol = fuse_depths(&depths, &cameras, &spec, tau).unwrap();
        let gt = sample_ground_truth(&scene, &spec, tau);
        let mut err_sum = 0.0;
        let mut n = 0usize;
        for (idx, (_, s)) in gt.iter().enumerate() {
            if s.abs() < 1.0 && vol.weights[idx] > 0.0 {
                err_sum += (vol.values[idx] - s).abs();
                n += 1;
            }
        }
        assert!(n > 500);
        let mae = err_sum / n as f64;
        assert!(mae < 0.2, "band MAE {mae} (normalized units)");
    }

    #[test]
    fn interpolated_ground_truth_flips_sign_near_corners() {
        // A coarse lattice of exact TSDF values, trilinearly interpolated,
        // crosses zero where the true field does not: corners break linear
        // interpolation.
        let yaw = 0.35;
        let scene = SdfScene::new(vec![Primitive::Box {
            center: [0.0, 0.0, 0.0],
            half_extents: [0.3, 0.3, 0.3],
            yaw,
        }]);
        let tau = 0.12;
        let spec = GridSpec::new(Vec3::from_f64(-0.655, -0.655, -0.655), 0.04, [34, 34, 34]);
        let gt = TsdfVolume::from_fn(spec, tau, |p| sdf_eval(&scene, p, Some(tau)));
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let rot = Mat3::rotation_z(yaw);
        let mut found = false;
        for _ in 0..200_000 {
            // Search near box corners and edges, where the distance field has
            // the most curvature.
            let sx = if rng.random::<bool>() { 0.3 } else { -0.3 };
            let sy = if rng.random::<bool>() { 0.3 } else { -0.3 };
            let sz = if rng.random::<bool>() { 0.3 } else { -0.3 };
            let local = Vec3::from_f64(
                sx + rng.random_range(-0.06..0.06),
                sy + rng.random_range(-0.06..0.06),
                sz + rng.random_range(-0.06..0.06),
            );
            let p = rot.mul_vec(local);
            let (interp, oob) = gt.sample(p);
            if oob {
                continue;
            }
            let exact: f64 = sdf_eval(&scene, p, Some(tau));
            if interp.signum() != exact.signum() && exact.abs() > 1e-4 {
                found = true;
                break;
            }
        }
        assert!(found, "no sign disagreement found near the corner");
    }

    #[test]
    fn occupancy_all_saturated_is_empty() {
        let spec = GridSpec::new(Vec3::<f64>::zero(), 0.1, [4, 4, 4]);
        let vol = TsdfVolume::new_unobserved(spec, 0.12);
        let occ = occupancy_ground_truth(&vol);
        assert!(occ.flags.iter().all(|&f| !f));
        assert_eq!(occ.occupied_fraction(), 0.0);
    }

    #[test]
    fn occupancy_dilation_counts() {
        let spec = GridSpec::new(Vec3::<f64>::zero(), 0.1, [5, 5, 5]);
        let mut vol = TsdfVolume::new_unobserved(spec, 0.12);
        // Interior seed -> 27 occupied.
        vol.values[spec.flat(2, 2, 2)] = 0.5;
        let occ = occupancy_ground_truth(&vol);
        assert_eq!(occ.flags.iter().filter(|&&f| f).count(), 27);
        // Corner seed -> 8 occupied (clipped neighborhood).
        let mut vol = TsdfVolume::new_unobserved(spec, 0.12);
        vol.values[spec.flat(0, 0, 0)] = -0.2;
        let occ = occupancy_ground_truth(&vol);
        assert_eq!(occ.flags.iter().filter(|&&f| f).count(), 8);
    }

    #[test]
    fn volume_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.bin");
        let spec = GridSpec::new(Vec3::from_f64(-0.25, 0.5, 1.0), 0.04, [3, 4, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut vol = TsdfVolume::new_unobserved(spec, 0.12);
        for (v, w) in vol.values.iter_mut().zip(vol.weights.iter_mut()) {
            *v = rng.random_range(-1.0..1.0);
            *w = rng.random_range(0.0..4.0f64).floor();
        }
        vol.write(&path).unwrap();
        let back = TsdfVolume::<f64>::read(&path).unwrap();
        assert_eq!(back.spec.dims, spec.dims);
        for (a, b) in vol.values.iter().zip(back.values.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn volume_file_truncation_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.bin");
        let spec = GridSpec::new(Vec3::<f64>::zero(), 0.04, [3, 3, 3]);
        let vol = TsdfVolume::new_unobserved(spec, 0.12);
        vol.write(&path).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() / 2]).unwrap();
        let err = TsdfVolume::<f64>::read(&path).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("truncated"), "unexpected error: {msg}");
    }

    #[test]
    fn rotated_cameras_preserve_fusion_geometry() {
        // Fusing with cameras expressed in a rotated frame reproduces the
        // rotated field: regression guard for the pose conventions used by
        // the training augmentation.
        let scene = SdfScene::new(vec![Primitive::Sphere {
            center: [0.3, 0.0, 0.0],
            radius: 0.4,
        }]);
        let intr = Intrinsics::new(60.0, 60.0, 24.0, 18.0, 49, 37);
        let poses: Vec<Pose<f64>> = orbit_trajectory(&scene, 4, 2.0, 0.6).unwrap();
        let depths: Vec<_> = poses
            .iter()
            .map(|p| raycast_depth(&scene, &intr, p, DEFAULT_MAX_DEPTH))
            .collect();
        let rot = Mat3::rotation_z(std::f64::consts::FRAC_PI_2);
        let rot_poses: Vec<Pose<f64>> = poses
            .iter()
            .map(|p| Pose::new(rot.transpose().mul_mat(p.rotation), rot.transpose().mul_vec(p.translation)))
            .collect();
        let rot_cams: Vec<_> = rot_poses.iter().map(|p| (intr, *p)).collect();
        let cams: Vec<_> = poses.iter().map(|p| (intr, *p)).collect();
        let p = Vec3::from_f64(0.3, 0.0, 0.45);
        let (a, _) = tsdf_point_oracle(p, &depths, &cams, 0.12);
        let (b, _) = tsdf_point_oracle(rot.transpose().mul_vec(p), &depths, &rot_cams, 0.12);
        assert!((a - b).abs() < 1e-12);
    }
}
