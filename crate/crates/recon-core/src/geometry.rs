//! Cameras, rigid transforms, projection, and trilinear sampling.
//!
//! Conventions used everywhere downstream:
//! - poses are world-from-camera (rotation + translation),
//! - camera frame is x-right, y-down, z-forward,
//! - "depth" is the camera-frame z coordinate (z-depth), never ray length,
//! - voxel grids store node values at voxel centers, `origin` being the
//!   world position of node (0,0,0), flat index order x-major/z-fastest.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use crate::scalar::Scalar;

/// Minimum camera-frame depth for a projection to be considered valid.
pub const Z_MIN: f64 = 0.05;

/// 3-component vector (world positions in meters unless stated otherwise).
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Vec3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Scalar> Vec3<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn splat(v: T) -> Self {
        Self::new(v, v, v)
    }

    pub fn from_f64(x: f64, y: f64, z: f64) -> Self {
        Self::new(T::lit(x), T::lit(y), T::lit(z))
    }

    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> T {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Self {
        let n = self.norm();
        Self::new(self.x / n, self.y / n, self.z / n)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn min_component(self) -> T {
        self.x.min(self.y).min(self.z)
    }

    pub fn abs(self) -> Self {
        Self::new(self.x.abs(), self.y.abs(), self.z.abs())
    }

    pub fn max_scalar(self, v: T) -> Self {
        Self::new(self.x.max(v), self.y.max(v), self.z.max(v))
    }
}

impl<T: Scalar> Add for Vec3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Scalar> AddAssign for Vec3<T> {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<T: Scalar> Sub for Vec3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Scalar> Mul<T> for Vec3<T> {
    type Output = Self;
    fn mul(self, k: T) -> Self {
        Self::new(self.x * k, self.y * k, self.z * k)
    }
}

impl<T: Scalar> Div<T> for Vec3<T> {
    type Output = Self;
    fn div(self, k: T) -> Self {
        Self::new(self.x / k, self.y / k, self.z / k)
    }
}

impl<T: Scalar> Neg for Vec3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

/// Row-major 3x3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3<T> {
    pub m: [[T; 3]; 3],
}

impl<T: Scalar> Mat3<T> {
    pub fn identity() -> Self {
        let o = T::one();
        let z = T::zero();
        Self {
            m: [[o, z, z], [z, o, z], [z, z, o]],
        }
    }

    pub fn from_rows(r0: Vec3<T>, r1: Vec3<T>, r2: Vec3<T>) -> Self {
        Self {
            m: [[r0.x, r0.y, r0.z], [r1.x, r1.y, r1.z], [r2.x, r2.y, r2.z]],
        }
    }

    pub fn from_cols(c0: Vec3<T>, c1: Vec3<T>, c2: Vec3<T>) -> Self {
        Self {
            m: [[c0.x, c1.x, c2.x], [c0.y, c1.y, c2.y], [c0.z, c1.z, c2.z]],
        }
    }

    pub fn transpose(self) -> Self {
        let m = self.m;
        Self {
            m: [
                [m[0][0], m[1][0], m[2][0]],
                [m[0][1], m[1][1], m[2][1]],
                [m[0][2], m[1][2], m[2][2]],
            ],
        }
    }

    pub fn mul_vec(self, v: Vec3<T>) -> Vec3<T> {
        let m = self.m;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    pub fn mul_mat(self, o: Self) -> Self {
        let mut out = [[T::zero(); 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                let mut acc = T::zero();
                for k in 0..3 {
                    acc = acc + self.m[i][k] * o.m[k][j];
                }
                *cell = acc;
            }
        }
        Self { m: out }
    }

    pub fn det(self) -> T {
        let m = self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(self) -> Self {
        let m = self.m;
        let det = self.det();
        let inv = |a: T, b: T, c: T, d: T| (a * d - b * c) / det;
        Self {
            m: [
                [
                    inv(m[1][1], m[1][2], m[2][1], m[2][2]),
                    inv(m[0][2], m[0][1], m[2][2], m[2][1]),
                    inv(m[0][1], m[0][2], m[1][1], m[1][2]),
                ],
                [
                    inv(m[1][2], m[1][0], m[2][2], m[2][0]),
                    inv(m[0][0], m[0][2], m[2][0], m[2][2]),
                    inv(m[0][2], m[0][0], m[1][2], m[1][0]),
                ],
                [
                    inv(m[1][0], m[1][1], m[2][0], m[2][1]),
                    inv(m[0][1], m[0][0], m[2][1], m[2][0]),
                    inv(m[0][0], m[0][1], m[1][0], m[1][1]),
                ],
            ],
        }
    }

    /// Rotation by `angle` radians about the world x axis.
    pub fn rotation_x(angle: T) -> Self {
        let (s, c) = (angle.sin(), angle.cos());
        let (o, z) = (T::one(), T::zero());
        Self {
            m: [[o, z, z], [z, c, -s], [z, s, c]],
        }
    }

    /// Rotation by `angle` radians about the world z (gravity) axis.
    pub fn rotation_z(angle: T) -> Self {
        let (s, c) = (angle.sin(), angle.cos());
        let (o, z) = (T::one(), T::zero());
        Self {
            m: [[c, -s, z], [s, c, z], [z, z, o]],
        }
    }

    /// Max abs entry of `self^T self - I`; drift measure for rotations.
    pub fn orthonormality_error(self) -> T {
        let g = self.transpose().mul_mat(self);
        let mut err = T::zero();
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { T::one() } else { T::zero() };
                err = err.max((g.m[i][j] - target).abs());
            }
        }
        err
    }

    /// Nearest rotation matrix via Newton iteration for the polar factor.
    pub fn orthonormalized(self) -> Self {
        let mut x = self;
        for _ in 0..8 {
            if x.orthonormality_error() < T::lit(1e-15) {
                break;
            }
            let xit = x.inverse().transpose();
            let mut next = [[T::zero(); 3]; 3];
            for (i, row) in next.iter_mut().enumerate() {
                for (j, cell) in row.iter_mut().enumerate() {
                    *cell = (x.m[i][j] + xit.m[i][j]) * T::lit(0.5);
                }
            }
            x = Self { m: next };
        }
        x
    }
}

/// Pinhole camera intrinsics; no distortion.
///
/// Pixel centers sit at integer coordinates; the sampleable rectangle is
/// `[0, width-1] x [0, height-1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
}

impl<T: Scalar> Intrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: usize, height: usize) -> Self {
        debug_assert!(fx > T::zero() && fy > T::zero());
        debug_assert!(cx >= T::zero() && cx < T::from_usize(width).unwrap());
        debug_assert!(cy >= T::zero() && cy < T::from_usize(height).unwrap());
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    /// Simple centered camera, handy for tests and synthetic scenes.
    pub fn centered(focal: T, width: usize, height: usize) -> Self {
        Self::new(
            focal,
            focal,
            T::lit(0.5) * T::from_usize(width - 1).unwrap(),
            T::lit(0.5) * T::from_usize(height - 1).unwrap(),
            width,
            height,
        )
    }
}

/// Rigid world-from-camera transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose<T> {
    pub rotation: Mat3<T>,
    pub translation: Vec3<T>,
}

impl<T: Scalar> Pose<T> {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zero(),
        }
    }

    pub fn new(rotation: Mat3<T>, translation: Vec3<T>) -> Self {
        debug_assert!(rotation.orthonormality_error() < T::lit(1e-9));
        debug_assert!((rotation.det() - T::one()).abs() < T::lit(1e-9));
        Self {
            rotation,
            translation,
        }
    }

    /// Camera-to-world: `R p + t`.
    pub fn transform(&self, p: Vec3<T>) -> Vec3<T> {
        self.rotation.mul_vec(p) + self.translation
    }

    /// World-to-camera: `R^T (p - t)`.
    pub fn inverse_transform(&self, p: Vec3<T>) -> Vec3<T> {
        self.rotation.transpose().mul_vec(p - self.translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -rt.mul_vec(self.translation),
        }
    }

    /// `self ∘ other` (apply `other` first). Re-orthonormalizes the rotation
    /// so long augmentation chains do not drift.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation.mul_mat(other.rotation).orthonormalized(),
            translation: self.rotation.mul_vec(other.translation) + self.translation,
        }
    }

    /// Camera position in world coordinates.
    pub fn center(&self) -> Vec3<T> {
        self.translation
    }
}

/// Result of projecting a world point into a camera.
#[derive(Clone, Copy, Debug)]
pub struct Projection<T> {
    /// Continuous pixel coordinates.
    pub u: T,
    pub v: T,
    /// Camera-frame z (z-depth), meters.
    pub z: T,
    /// True iff `z > Z_MIN` and `(u, v)` lies inside the image rectangle.
    pub valid: bool,
}

/// Projects a world point through `pose` (world-from-camera) and `intr`.
///
/// Invalid projections (behind the camera, outside the image) are reported
/// via `valid = false`; the numeric fields are still filled in when `z` is
/// nonzero so callers may inspect them.
pub fn project_point<T: Scalar>(p: Vec3<T>, intr: &Intrinsics<T>, pose: &Pose<T>) -> Projection<T> {
    let pc = pose.inverse_transform(p);
    let z = pc.z;
    if z <= T::lit(Z_MIN) {
        return Projection {
            u: T::zero(),
            v: T::zero(),
            z,
            valid: false,
        };
    }
    let u = intr.fx * pc.x / z + intr.cx;
    let v = intr.fy * pc.y / z + intr.cy;
    let w = T::from_usize(intr.width - 1).unwrap();
    let h = T::from_usize(intr.height - 1).unwrap();
    let inside = u >= T::zero() && u <= w && v >= T::zero() && v <= h;
    Projection {
        u,
        v,
        z,
        valid: inside,
    }
}

/// Axis-aligned voxel grid placement: `origin` is the world position of the
/// center of node (0,0,0), nodes spaced `voxel_size` apart.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec<T> {
    pub origin: Vec3<T>,
    pub voxel_size: T,
    pub dims: [usize; 3],
}

impl<T: Scalar> GridSpec<T> {
    pub fn new(origin: Vec3<T>, voxel_size: T, dims: [usize; 3]) -> Self {
        debug_assert!(voxel_size > T::zero());
        debug_assert!(dims.iter().all(|&d| d >= 1));
        Self {
            origin,
            voxel_size,
            dims,
        }
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index; x-major, z-fastest.
    #[inline]
    pub fn flat(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn unflat(&self, idx: usize) -> [usize; 3] {
        let k = idx % self.dims[2];
        let j = (idx / self.dims[2]) % self.dims[1];
        let i = idx / (self.dims[1] * self.dims[2]);
        [i, j, k]
    }

    /// World position of node (i, j, k).
    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3<T> {
        let h = self.voxel_size;
        self.origin
            + Vec3::new(
                T::from_usize(i).unwrap() * h,
                T::from_usize(j).unwrap() * h,
                T::from_usize(k).unwrap() * h,
            )
    }

    /// Continuous node coordinates of a world point.
    pub fn world_to_grid(&self, p: Vec3<T>) -> Vec3<T> {
        (p - self.origin) / self.voxel_size
    }

    /// World-space bounding box of the node lattice.
    pub fn node_bounds(&self) -> (Vec3<T>, Vec3<T>) {
        (
            self.origin,
            self.center(self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1),
        )
    }
}

/// Precomputed trilinear interpolation footprint of a query point: the 8
/// surrounding node indices (flat, border-clamped) and their blend weights.
#[derive(Clone, Copy, Debug)]
pub struct TrilinearFootprint<T> {
    pub corners: [usize; 8],
    pub weights: [T; 8],
    /// True when the query fell outside the node lattice and was clamped.
    pub out_of_bounds: bool,
}

/// Computes the trilinear footprint of world point `p` in `spec`.
///
/// Out-of-bounds queries clamp to the border and set the flag; the caller
/// decides the policy.
pub fn trilinear_footprint<T: Scalar>(spec: &GridSpec<T>, p: Vec3<T>) -> TrilinearFootprint<T> {
    let g = spec.world_to_grid(p);
    let mut oob = false;
    let mut idx0 = [0usize; 3];
    let mut frac = [T::zero(); 3];
    let coords = [g.x, g.y, g.z];
    for axis in 0..3 {
        let n = spec.dims[axis];
        let hi = T::from_usize(n - 1).unwrap();
        // Queries a few ulps past the lattice (node centers recomputed from
        // world coordinates) are boundary roundoff, not out-of-bounds.
        let tol = T::lit(16.0) * T::epsilon() * hi.max(T::one());
        let mut c = coords[axis];
        if c < -tol || c > hi + tol {
            oob = true;
        }
        c = c.max(T::zero()).min(hi);
        let f = c.floor();
        let mut i0 = f.to_usize().unwrap_or(0);
        if i0 >= n - 1 && n > 1 {
            // Keep the cell interior so i0+1 stays in range.
            i0 = n - 2;
        }
        if n == 1 {
            i0 = 0;
        }
        idx0[axis] = i0;
        frac[axis] = if n == 1 {
            T::zero()
        } else {
            c - T::from_usize(i0).unwrap()
        };
    }
    let (fx, fy, fz) = (frac[0], frac[1], frac[2]);
    let one = T::one();
    let mut corners = [0usize; 8];
    let mut weights = [T::zero(); 8];
    for (c, (corner, weight)) in corners.iter_mut().zip(weights.iter_mut()).enumerate() {
        let dx = c >> 2 & 1;
        let dy = c >> 1 & 1;
        let dz = c & 1;
        let i = (idx0[0] + dx).min(spec.dims[0] - 1);
        let j = (idx0[1] + dy).min(spec.dims[1] - 1);
        let k = (idx0[2] + dz).min(spec.dims[2] - 1);
        *corner = spec.flat(i, j, k);
        let wx = if dx == 1 { fx } else { one - fx };
        let wy = if dy == 1 { fy } else { one - fy };
        let wz = if dz == 1 { fz } else { one - fz };
        *weight = wx * wy * wz;
    }
    TrilinearFootprint {
        corners,
        weights,
        out_of_bounds: oob,
    }
}

/// Trilinear blend of a scalar field stored at grid nodes.
pub fn trilinear_sample_scalar<T: Scalar>(
    spec: &GridSpec<T>,
    values: &[T],
    p: Vec3<T>,
) -> (T, bool) {
    let fp = trilinear_footprint(spec, p);
    let mut acc = T::zero();
    for (&c, &w) in fp.corners.iter().zip(fp.weights.iter()) {
        acc = acc + values[c] * w;
    }
    (acc, fp.out_of_bounds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut ChaCha8Rng) -> Mat3<f64> {
        let a = rng.random_range(-3.0..3.0);
        let b = rng.random_range(-3.0..3.0);
        let c = rng.random_range(-3.0..3.0);
        Mat3::rotation_z(a)
            .mul_mat(Mat3::rotation_x(b))
            .mul_mat(Mat3::rotation_z(c))
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose<f64> {
        Pose::new(
            random_rotation(rng),
            Vec3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ),
        )
    }

    #[test]
    fn optical_axis_point_maps_to_principal_point() {
        let intr = Intrinsics::new(100.0, 100.0, 160.0, 120.0, 320, 240);
        let pr = project_point(Vec3::new(0.0, 0.0, 1.0), &intr, &Pose::identity());
        assert_eq!((pr.u, pr.v, pr.z), (160.0, 120.0, 1.0));
        assert!(pr.valid);
    }

    #[test]
    fn off_axis_projection_matches_hand_check() {
        // u = fx * x / z + cx = 100 * 0.5 / 1 + 160 = 210
        let intr = Intrinsics::<f64>::new(100.0, 100.0, 160.0, 120.0, 320, 240);
        let pr = project_point(Vec3::new(0.5, 0.0, 1.0), &intr, &Pose::identity());
        assert!((pr.u - 210.0).abs() < 1e-12);
        assert!((pr.v - 120.0).abs() < 1e-12);
        assert_eq!(pr.z, 1.0);
    }

    #[test]
    fn point_behind_camera_is_invalid() {
        let intr = Intrinsics::new(100.0, 100.0, 160.0, 120.0, 320, 240);
        let pr = project_point(Vec3::new(0.0, 0.0, -1.0), &intr, &Pose::identity());
        assert!(!pr.valid);
    }

    #[test]
    fn projection_agrees_with_homogeneous_oracle() {
        // Oracle: full 3x4 homogeneous matrix multiply K [R^T | -R^T t].
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let intr = Intrinsics::new(211.0, 198.5, 157.2, 121.9, 320, 240);
        for _ in 0..1000 {
            let pose = random_pose(&mut rng);
            let p = Vec3::new(
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
            );
            let pr = project_point(p, &intr, &pose);
            let rt = pose.rotation.transpose();
            let tc = -rt.mul_vec(pose.translation);
            let k = Mat3::from_rows(
                Vec3::new(intr.fx, 0.0, intr.cx),
                Vec3::new(0.0, intr.fy, intr.cy),
                Vec3::new(0.0, 0.0, 1.0),
            );
            let krt = k.mul_mat(rt);
            let kt = k.mul_vec(tc);
            let hom = krt.mul_vec(p) + kt;
            if hom.z > Z_MIN {
                assert!((pr.u - hom.x / hom.z).abs() < 1e-9, "u mismatch");
                assert!((pr.v - hom.y / hom.z).abs() < 1e-9, "v mismatch");
                assert!((pr.z - hom.z).abs() < 1e-12);
            } else {
                assert!(!pr.valid);
            }
        }
    }

    #[test]
    fn transform_round_trip_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let pose = random_pose(&mut rng);
            let p = Vec3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            );
            let back = pose.inverse_transform(pose.transform(p));
            assert!((back - p).norm() < 1e-12);
        }
    }

    #[test]
    fn identity_and_pure_translation() {
        let p = Vec3::new(0.3, -0.7, 1.1);
        assert_eq!(Pose::<f64>::identity().transform(p), p);
        let t = Vec3::new(1.0, 2.0, 3.0);
        let pose = Pose::new(Mat3::identity(), t);
        assert_eq!(pose.transform(Vec3::zero()), t);
    }

    #[test]
    fn rotation_chains_stay_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut pose = Pose::<f64>::identity();
        for _ in 0..100 {
            pose = pose.compose(&random_pose(&mut rng));
        }
        assert!(pose.rotation.orthonormality_error() < 1e-8);
        assert!((pose.rotation.det() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn trilinear_reproduces_node_values_and_constants() {
        let spec = GridSpec::new(Vec3::from_f64(-0.1, 0.2, 0.0), 0.1, [4, 3, 5]);
        let mut values = vec![0.0f64; spec.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for v in values.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        for i in 0..4 {
            for j in 0..3 {
                for k in 0..5 {
                    let (s, oob) = trilinear_sample_scalar(&spec, &values, spec.center(i, j, k));
                    assert!(!oob);
                    assert!((s - values[spec.flat(i, j, k)]).abs() < 1e-12);
                }
            }
        }
        let constant = vec![0.37f64; spec.len()];
        let mid = spec.center(0, 0, 0) + Vec3::splat(0.05);
        let (s, _) = trilinear_sample_scalar(&spec, &constant, mid);
        assert!((s - 0.37).abs() < 1e-12);
    }

    #[test]
    fn trilinear_is_exact_on_affine_fields() {
        // f(x,y,z) = 2x + 3y - z is reproduced exactly by trilinear blending.
        let spec = GridSpec::new(Vec3::from_f64(-0.2, -0.3, -0.1), 0.07, [6, 6, 6]);
        let f = |p: Vec3<f64>| 2.0 * p.x + 3.0 * p.y - p.z;
        let values: Vec<f64> = (0..spec.len())
            .map(|idx| {
                let [i, j, k] = spec.unflat(idx);
                f(spec.center(i, j, k))
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (lo, hi) = spec.node_bounds();
        for _ in 0..100 {
            let p = Vec3::new(
                rng.random_range(lo.x..hi.x),
                rng.random_range(lo.y..hi.y),
                rng.random_range(lo.z..hi.z),
            );
            let (s, oob) = trilinear_sample_scalar(&spec, &values, p);
            assert!(!oob);
            assert!((s - f(p)).abs() < 1e-12);
        }
    }

    #[test]
    fn trilinear_clamps_and_flags_out_of_bounds() {
        let spec = GridSpec::new(Vec3::<f64>::zero(), 0.1, [3, 3, 3]);
        let values: Vec<f64> = (0..27).map(|i| i as f64).collect();
        let (inside, _) = trilinear_sample_scalar(&spec, &values, Vec3::zero());
        let (outside, oob) = trilinear_sample_scalar(&spec, &values, Vec3::from_f64(-1.0, 0.0, 0.0));
        assert!(oob);
        assert_eq!(inside, outside);
    }

    #[test]
    fn trilinear_is_continuous() {
        let spec = GridSpec::new(Vec3::<f64>::zero(), 0.1, [5, 5, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let values: Vec<f64> = (0..spec.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        for _ in 0..200 {
            let p = Vec3::new(
                rng.random_range(0.0..0.4),
                rng.random_range(0.0..0.4),
                rng.random_range(0.0..0.4),
            );
            let q = p + Vec3::splat(1e-9);
            let (a, _) = trilinear_sample_scalar(&spec, &values, p);
            let (b, _) = trilinear_sample_scalar(&spec, &values, q);
            assert!((a - b).abs() < 1e-6 * 2.0);
        }
    }

    #[test]
    fn polar_orthonormalization_restores_rotation() {
        let mut r = Mat3::rotation_z(0.4f64).mul_mat(Mat3::rotation_x(-0.9));
        // Inject drift.
        r.m[0][0] += 1e-6;
        r.m[2][1] -= 2e-6;
        let fixed = r.orthonormalized();
        assert!(fixed.orthonormality_error() < 1e-12);
    }
}
