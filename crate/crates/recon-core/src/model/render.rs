//! Synthetic multi-channel view rendering.
//!
//! The pipeline needs per-view 2D signal correlated with geometry, not
//! photorealism: each view gets a diffuse shading channel computed from
//! SDF normals, a hit silhouette mask, and a procedural surface texture
//! channel evaluated at the hit point. The texture is attached to the
//! surface (the same world point renders to the same value in every view),
//! which is what gives multi-view feature fusion a photo-consistency
//! signal to triangulate with.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::geometry::{Intrinsics, Pose, Vec3};
use crate::scalar::Scalar;
use crate::scene::{sdf_gradient, DepthMap, SdfScene};

/// Input channels: shading, silhouette, surface texture.
pub const RENDERED_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug)]
pub struct RenderConfig {
    /// Diffuse light direction (world frame, normalized on use).
    pub light: [f64; 3],
    /// Seed for the procedural surface texture.
    pub texture_seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            light: [0.4, 0.25, 0.9],
            texture_seed: 0,
        }
    }
}

/// Band-limited procedural 3D texture: a few random plane waves with
/// wavelengths around the feature-cell scale.
struct SurfaceTexture<T> {
    waves: Vec<(Vec3<T>, T, T)>,
}

impl<T: Scalar> SurfaceTexture<T> {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x7e57_7e57));
        let waves = (0..4)
            .map(|_| {
                let dir = Vec3::from_f64(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
                .normalized();
                let freq = T::lit(rng.random_range(30.0..80.0));
                let phase = T::lit(rng.random_range(0.0..std::f64::consts::TAU));
                (dir * freq, phase, T::lit(0.25))
            })
            .collect();
        Self { waves }
    }

    fn eval(&self, p: Vec3<T>) -> T {
        let mut acc = T::zero();
        for &(k, phase, amp) in &self.waves {
            acc += amp * (k.dot(p) + phase).sin();
        }
        acc
    }
}

/// Renders one input view from the scene's geometry and its ray-cast depth
/// map. Deterministic for a fixed config and view index.
pub fn render_input<T: Scalar>(
    scene: &SdfScene,
    intr: &Intrinsics<T>,
    pose: &Pose<T>,
    depth: &DepthMap<T>,
    cfg: &RenderConfig,
    _view_index: usize,
) -> Tensor<T> {
    let (w, h) = (intr.width, intr.height);
    let mut data = vec![T::zero(); RENDERED_CHANNELS * w * h];
    let light = Vec3::from_f64(cfg.light[0], cfg.light[1], cfg.light[2]).normalized();
    let texture = SurfaceTexture::new(cfg.texture_seed);
    let plane = w * h;
    for v in 0..h {
        for u in 0..w {
            let pix = v * w + u;
            let z = depth.at(u, v);
            if z > T::zero() {
                let dir_cam = Vec3::new(
                    (T::from_usize(u).unwrap() - intr.cx) / intr.fx,
                    (T::from_usize(v).unwrap() - intr.cy) / intr.fy,
                    T::one(),
                );
                let p_world = pose.transform(dir_cam * z);
                let n = sdf_gradient(scene, p_world, T::lit(1e-4)).normalized();
                let diffuse = n.dot(light).max(T::zero());
                data[pix] = T::lit(0.15) + T::lit(0.8) * diffuse;
                data[plane + pix] = T::one();
                data[2 * plane + pix] = texture.eval(p_world);
            }
        }
    }
    Tensor::from_vec(&[RENDERED_CHANNELS, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{look_at, raycast_depth, Primitive, DEFAULT_MAX_DEPTH};

    #[test]
    fn channels_and_determinism() {
        let scene = SdfScene::new(vec![Primitive::Sphere {
            center: [0.0, 0.0, 0.0],
            radius: 0.5,
        }]);
        let intr = Intrinsics::<f64>::new(40.0, 40.0, 16.0, 12.0, 33, 25);
        let pose = look_at(Vec3::from_f64(0.0, 0.0, -2.0), Vec3::zero());
        let depth = raycast_depth(&scene, &intr, &pose, DEFAULT_MAX_DEPTH);
        let cfg = RenderConfig::default();
        let a = render_input(&scene, &intr, &pose, &depth, &cfg, 0);
        let b = render_input(&scene, &intr, &pose, &depth, &cfg, 0);
        assert_eq!(a, b);
        assert_eq!(a.shape, vec![3, 25, 33]);
        // Silhouette matches depth validity; texture lives on hits only.
        let plane = 33 * 25;
        for pix in 0..plane {
            let hit = depth.values[pix] > 0.0;
            assert_eq!(a.data[plane + pix] > 0.5, hit);
            if hit {
                assert!(a.data[pix] > 0.0);
            } else {
                assert_eq!(a.data[2 * plane + pix], 0.0);
            }
        }
        assert!(a.data[2 * plane..].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn texture_is_view_consistent() {
        // The same surface point renders to the same texture value from
        // different cameras.
        let scene = SdfScene::new(vec![Primitive::Plane {
            normal: [0.0, 0.0, -1.0],
            offset: -2.0,
        }]);
        let cfg = RenderConfig::default();
        let intr = Intrinsics::<f64>::new(60.0, 60.0, 16.0, 12.0, 33, 25);
        let pose_a = Pose::identity();
        let pose_b = look_at(Vec3::from_f64(0.4, 0.1, 0.0), Vec3::from_f64(0.0, 0.0, 2.0));
        let da = raycast_depth(&scene, &intr, &pose_a, DEFAULT_MAX_DEPTH);
        let db = raycast_depth(&scene, &intr, &pose_b, DEFAULT_MAX_DEPTH);
        let ia = render_input(&scene, &intr, &pose_a, &da, &cfg, 0);
        let ib = render_input(&scene, &intr, &pose_b, &db, &cfg, 1);
        // World point (0, 0, 2) projects to the principal point of A.
        let tex_a = ia.data[2 * 33 * 25 + 12 * 33 + 16];
        // Find its pixel in B.
        let pr = crate::geometry::project_point(Vec3::from_f64(0.0, 0.0, 2.0), &intr, &pose_b);
        assert!(pr.valid);
        let (ub, vb) = (pr.u.round() as usize, pr.v.round() as usize);
        let tex_b = ib.data[2 * 33 * 25 + vb * 33 + ub];
        // Nearest-pixel rounding moves the sample point slightly.
        assert!((tex_a - tex_b).abs() < 0.2, "{tex_a} vs {tex_b}");
    }
}
