//! Training: chunk sampling, pose/depth augmentation, supervision-point
//! selection, and the optimization loop.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    adam_step, AdamState, AutodiffError, Tape, Tensor, Var,
};
use crate::backproject::{dense_plan, GuidanceStrategy, MapGeometry};
use crate::geometry::{project_point, GridSpec, Intrinsics, Mat3, Pose, Vec3};
use crate::scalar::Scalar;
use crate::scene::{
    fit_grid, orbit_trajectory, perturb_depth, raycast_depth, sample_ground_truth, sdf_eval,
    DepthMap, NoiseConfig, SceneError, SdfScene, DEFAULT_MAX_DEPTH,
};
use crate::tsdf::{dilate3, fuse_depths, TsdfVolume, DEFAULT_TRUNCATION_VOXELS};

use super::render::{render_input, RenderConfig};
use super::{
    loss_on_tape, omega_forward, predict_points, psi_forward, register_params,
    ModelParams,
};

/// Where supervision targets come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SupervisionMode {
    /// Exact ground-truth points, wherever they land after augmentation.
    Rts,
    /// Model voxel centers with trilinearly interpolated ground truth (the
    /// corrupted baseline).
    Interpolated,
    /// Uniform random points with analytic SDF values.
    Analytic,
}

impl SupervisionMode {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "rts" => Some(Self::Rts),
            "interpolated" => Some(Self::Interpolated),
            "analytic" => Some(Self::Analytic),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Rts => "rts",
            Self::Interpolated => "interpolated",
            Self::Analytic => "analytic",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub supervision: SupervisionMode,
    pub enable_dg: bool,
    pub enable_pb: bool,
    pub strategy: GuidanceStrategy,
    pub chunk_dims: [usize; 3],
    pub points_per_step: usize,
    pub views_per_step: usize,
    pub rotation_augmentation: bool,
    pub depth_scale_augmentation: bool,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr: f64,
    /// Learning-rate multiplier applied at each epoch boundary.
    pub lr_decay_per_epoch: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            supervision: SupervisionMode::Rts,
            enable_dg: true,
            enable_pb: true,
            strategy: GuidanceStrategy::Tsdf,
            chunk_dims: [64, 64, 32],
            points_per_step: 4096,
            views_per_step: 6,
            rotation_augmentation: true,
            depth_scale_augmentation: true,
            epochs: 1,
            steps_per_epoch: 50,
            lr: 1e-3,
            lr_decay_per_epoch: 0.7,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The strategy actually applied: disabling depth guidance overrides
    /// the configured variant.
    pub fn effective_strategy(&self) -> GuidanceStrategy {
        if self.enable_dg {
            self.strategy
        } else {
            GuidanceStrategy::None
        }
    }
}

/// Everything the trainer needs about one scene.
#[derive(Clone, Debug)]
pub struct SceneData<T> {
    pub scene: SdfScene,
    pub cameras: Vec<(Intrinsics<T>, Pose<T>)>,
    pub images: Vec<Tensor<T>>,
    pub gt_depths: Vec<DepthMap<T>>,
    pub noisy_depths: Vec<DepthMap<T>>,
    pub gt_points: Vec<(Vec3<T>, T)>,
    pub gt_volume: TsdfVolume<T>,
    pub grid: GridSpec<T>,
    pub truncation: T,
}

/// Scene-to-training-data settings.
#[derive(Clone, Debug)]
pub struct SceneDataConfig {
    pub n_views: usize,
    pub image_size: (usize, usize),
    pub focal: f64,
    /// None: bounding radius plus a margin.
    pub orbit_radius: Option<f64>,
    /// Camera rings: views are split evenly across these heights.
    pub orbit_heights: Vec<f64>,
    pub voxel_size: f64,
    pub grid_margin: f64,
    pub noise: NoiseConfig,
    pub render: RenderConfig,
}

impl Default for SceneDataConfig {
    fn default() -> Self {
        Self {
            n_views: 12,
            image_size: (48, 48),
            focal: 42.0,
            orbit_radius: None,
            orbit_heights: vec![0.8, 1.8],
            voxel_size: 0.04,
            grid_margin: 0.24,
            noise: NoiseConfig::default(),
            render: RenderConfig::default(),
        }
    }
}

impl<T: Scalar> SceneData<T> {
    /// Renders views, casts ground-truth depth, perturbs it into the noisy
    /// oracle, and samples the exact supervision lattice.
    pub fn build(scene: SdfScene, cfg: &SceneDataConfig) -> Result<Self, SceneError> {
        let (w, h) = cfg.image_size;
        let intr = Intrinsics::centered(T::lit(cfg.focal), w, h);
        let radius = cfg
            .orbit_radius
            .unwrap_or_else(|| scene.bounding_radius() + 1.2);
        let rings = cfg.orbit_heights.len().max(1);
        let per_ring = cfg.n_views.div_ceil(rings).max(2);
        let mut poses: Vec<Pose<T>> = Vec::new();
        for (ring, &height) in cfg.orbit_heights.iter().enumerate() {
            let want = per_ring.min(cfg.n_views - poses.len());
            if want < 2 {
                break;
            }
            let mut ring_poses = orbit_trajectory::<T>(&scene, want, radius, height)?;
            // Stagger rings so azimuths interleave.
            if ring % 2 == 1 {
                ring_poses.rotate_left(1);
            }
            poses.extend(ring_poses);
        }
        let cameras: Vec<(Intrinsics<T>, Pose<T>)> = poses.iter().map(|p| (intr, *p)).collect();
        let gt_depths: Vec<DepthMap<T>> = poses
            .iter()
            .map(|p| raycast_depth(&scene, &intr, p, DEFAULT_MAX_DEPTH))
            .collect();
        let noisy_depths: Vec<DepthMap<T>> = gt_depths
            .iter()
            .enumerate()
            .map(|(view, d)| {
                let per_view = NoiseConfig {
                    seed: cfg.noise.seed ^ (view as u64).wrapping_mul(0x9e37_79b9),
                    ..cfg.noise.clone()
                };
                perturb_depth(d, &per_view)
            })
            .collect();
        let images: Vec<Tensor<T>> = poses
            .iter()
            .zip(gt_depths.iter())
            .enumerate()
            .map(|(view, (p, d))| render_input(&scene, &intr, p, d, &cfg.render, view))
            .collect();
        let grid = fit_grid::<T>(&scene, cfg.voxel_size, cfg.grid_margin);
        let truncation = T::lit(cfg.voxel_size * DEFAULT_TRUNCATION_VOXELS);
        let gt_points = sample_ground_truth(&scene, &grid, truncation);
        let gt_volume = TsdfVolume {
            spec: grid,
            values: gt_points.iter().map(|&(_, v)| v).collect(),
            weights: vec![T::one(); grid.len()],
            truncation,
        };
        Ok(Self {
            scene,
            cameras,
            images,
            gt_depths,
            noisy_depths,
            gt_points,
            gt_volume,
            grid,
            truncation,
        })
    }
}

/// A world-to-model-frame rotation about a center point. `None` means the
/// identity (bit-exact no-op).
#[derive(Clone, Copy, Debug)]
pub struct FrameRotation<T> {
    rotation: Option<Mat3<T>>,
    center: Vec3<T>,
}

impl<T: Scalar> FrameRotation<T> {
    pub fn identity() -> Self {
        Self {
            rotation: None,
            center: Vec3::zero(),
        }
    }

    pub fn new(yaw: T, tilt: T, center: Vec3<T>) -> Self {
        if yaw == T::zero() && tilt == T::zero() {
            return Self::identity();
        }
        Self {
            rotation: Some(Mat3::rotation_x(tilt).mul_mat(Mat3::rotation_z(yaw))),
            center,
        }
    }

    /// World point -> model frame.
    pub fn to_model(&self, p: Vec3<T>) -> Vec3<T> {
        match &self.rotation {
            Some(r) => r.transpose().mul_vec(p - self.center) + self.center,
            None => p,
        }
    }

    /// Model-frame point -> world.
    pub fn to_world(&self, p: Vec3<T>) -> Vec3<T> {
        match &self.rotation {
            Some(r) => r.mul_vec(p - self.center) + self.center,
            None => p,
        }
    }

    /// Re-expresses a world-from-camera pose in the model frame.
    pub fn pose_to_model(&self, pose: &Pose<T>) -> Pose<T> {
        match &self.rotation {
            Some(r) => Pose {
                rotation: r.transpose().mul_mat(pose.rotation),
                translation: r.transpose().mul_vec(pose.translation - self.center) + self.center,
            },
            None => *pose,
        }
    }
}

/// One prepared optimization step: everything non-differentiable resolved.
#[derive(Clone, Debug)]
pub struct StepBatch<T> {
    pub chunk: GridSpec<T>,
    pub cameras: Vec<(Intrinsics<T>, Pose<T>)>,
    pub images: Vec<Tensor<T>>,
    pub depths: Vec<DepthMap<T>>,
    pub depth_volume: Option<TsdfVolume<T>>,
    pub sup_points: Vec<Vec3<T>>,
    pub sup_values: Vec<T>,
    pub occupancy: Vec<bool>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct StepLosses {
    pub total: f64,
    pub tsdf: f64,
    pub occupancy: f64,
}

/// Assembles one training step: chunk placement, rotation and depth-scale
/// augmentation, view selection, fusion, supervision targets, occupancy
/// targets. Returns `None` when no supervision points land in the chunk.
pub fn prepare_step<T: Scalar>(
    data: &SceneData<T>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Option<StepBatch<T>> {
    let c = data.scene.centroid();
    let centroid = Vec3::from_f64(c[0], c[1], c[2]);
    let frame = if cfg.rotation_augmentation {
        let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let tilt = rng.random_range(-3.0f64..3.0).to_radians();
        FrameRotation::new(T::lit(yaw), T::lit(tilt), centroid)
    } else {
        // Draw anyway so the rng stream does not depend on the flag.
        let _ = rng.random_range(-1.0f64..1.0);
        let _ = rng.random_range(-1.0f64..1.0);
        FrameRotation::identity()
    };

    let h = data.grid.voxel_size;
    let dims = cfg.chunk_dims;
    let anchor_idx = rng.random_range(0..data.gt_points.len());
    let anchor = frame.to_model(data.gt_points[anchor_idx].0);
    let extent = Vec3::new(
        T::from_usize(dims[0] - 1).unwrap() * h,
        T::from_usize(dims[1] - 1).unwrap() * h,
        T::from_usize(dims[2] - 1).unwrap() * h,
    );
    let jitter = Vec3::new(
        T::lit(rng.random_range(-0.5..0.5)) * h,
        T::lit(rng.random_range(-0.5..0.5)) * h,
        T::lit(rng.random_range(-0.5..0.5)) * h,
    );
    let origin = anchor - extent * T::lit(0.5) + jitter;
    let chunk = GridSpec::new(origin, h, dims);

    // Views that observe the chunk (center or a corner projects validly).
    let (lo, hi) = chunk.node_bounds();
    let probes = [
        (lo + hi) * T::lit(0.5),
        lo,
        hi,
        Vec3::new(lo.x, lo.y, hi.z),
        Vec3::new(lo.x, hi.y, lo.z),
        Vec3::new(hi.x, lo.y, lo.z),
        Vec3::new(lo.x, hi.y, hi.z),
        Vec3::new(hi.x, lo.y, hi.z),
        Vec3::new(hi.x, hi.y, lo.z),
    ];
    let qualifying: Vec<usize> = data
        .cameras
        .iter()
        .enumerate()
        .filter(|(_, (intr, pose))| {
            let pose_m = frame.pose_to_model(pose);
            probes.iter().any(|&p| project_point(p, intr, &pose_m).valid)
        })
        .map(|(i, _)| i)
        .collect();
    if qualifying.is_empty() {
        return None;
    }
    let take = cfg.views_per_step.min(qualifying.len());
    let chosen: Vec<usize> = index::sample(rng, qualifying.len(), take)
        .into_iter()
        .map(|i| qualifying[i])
        .collect();

    let mut cameras = Vec::with_capacity(take);
    let mut images = Vec::with_capacity(take);
    let mut depths = Vec::with_capacity(take);
    for &view in &chosen {
        let (intr, pose) = &data.cameras[view];
        cameras.push((*intr, frame.pose_to_model(pose)));
        images.push(data.images[view].clone());
        let mut d = data.noisy_depths[view].clone();
        if cfg.depth_scale_augmentation {
            let s = T::lit(rng.random_range(0.9..1.1));
            for v in d.values.iter_mut() {
                if *v > T::zero() {
                    *v = *v * s;
                }
            }
        } else {
            let _ = rng.random_range(0.9f64..1.1);
        }
        depths.push(d);
    }

    let strategy = cfg.effective_strategy();
    let depth_volume = if matches!(
        strategy,
        GuidanceStrategy::Tsdf | GuidanceStrategy::TsdfPlusGaussian { .. } | GuidanceStrategy::DepthOnly
    ) {
        Some(fuse_depths(&depths, &cameras, &chunk, data.truncation).expect("views are non-empty"))
    } else {
        None
    };

    let inside = |p: Vec3<T>| {
        p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y && p.z >= lo.z && p.z <= hi.z
    };
    let mut sup: Vec<(Vec3<T>, T)> = match cfg.supervision {
        SupervisionMode::Rts => data
            .gt_points
            .iter()
            .map(|&(p, v)| (frame.to_model(p), v))
            .filter(|&(p, _)| inside(p))
            .collect(),
        SupervisionMode::Interpolated => {
            let mut out = Vec::new();
            for idx in 0..chunk.len() {
                let [i, j, k] = chunk.unflat(idx);
                let p_m = chunk.center(i, j, k);
                let (value, oob) = data.gt_volume.sample(frame.to_world(p_m));
                if !oob {
                    out.push((p_m, value));
                }
            }
            out
        }
        SupervisionMode::Analytic => (0..cfg.points_per_step)
            .map(|_| {
                let p_m = Vec3::new(
                    T::lit(rng.random_range(lo.x.as_f64()..hi.x.as_f64())),
                    T::lit(rng.random_range(lo.y.as_f64()..hi.y.as_f64())),
                    T::lit(rng.random_range(lo.z.as_f64()..hi.z.as_f64())),
                );
                let v = sdf_eval(&data.scene, frame.to_world(p_m), Some(data.truncation));
                (p_m, v)
            })
            .collect(),
    };
    if sup.is_empty() {
        return None;
    }
    if sup.len() > cfg.points_per_step {
        let keep = index::sample(rng, sup.len(), cfg.points_per_step);
        let mut picked: Vec<(Vec3<T>, T)> = Vec::with_capacity(cfg.points_per_step);
        for i in keep {
            picked.push(sup[i]);
        }
        sup = picked;
    }
    let (sup_points, sup_values): (Vec<_>, Vec<_>) = sup.into_iter().unzip();

    // Occupancy ground truth at chunk voxel centers, evaluated analytically
    // in the rotated frame (the lattice no longer aligns with the
    // ground-truth grid, but the SDF is exact anywhere).
    let mut near = vec![false; chunk.len()];
    for (idx, slot) in near.iter_mut().enumerate() {
        let [i, j, k] = chunk.unflat(idx);
        let p_w = frame.to_world(chunk.center(i, j, k));
        *slot = sdf_eval(&data.scene, p_w, None).abs() < data.truncation;
    }
    let occupancy = dilate3(&near, chunk.dims);

    Some(StepBatch {
        chunk,
        cameras,
        images,
        depths,
        depth_volume,
        sup_points,
        sup_values,
        occupancy,
    })
}

/// Forward and backward over one prepared batch; gradients come back in
/// [`ModelParams::named_tensors`] order.
pub fn step_loss_and_grads<T: Scalar>(
    params: &ModelParams<T>,
    batch: &StepBatch<T>,
    cfg: &TrainConfig,
) -> Result<(StepLosses, Vec<Tensor<T>>), AutodiffError> {
    let mut tape = Tape::new();
    let pass = forward_loss(&mut tape, params, batch, cfg)?;
    tape.backward(pass.loss)?;
    let grads = pass
        .param_vars
        .iter()
        .map(|&v| tape.grad_or_zero(v))
        .collect();
    Ok((
        StepLosses {
            total: tape.value(pass.loss).item().as_f64(),
            tsdf: tape.value(pass.loss_tsdf).item().as_f64(),
            occupancy: tape.value(pass.loss_occ).item().as_f64(),
        },
        grads,
    ))
}

/// Handles into one recorded training pass.
pub struct ForwardPass {
    pub loss: Var,
    pub loss_tsdf: Var,
    pub loss_occ: Var,
    pub pred: Var,
    pub logits: Var,
    /// Parameter vars in [`ModelParams::named_tensors`] order.
    pub param_vars: Vec<Var>,
}

/// Builds the full training graph for one batch on the given tape.
pub fn forward_loss<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    batch: &StepBatch<T>,
    cfg: &TrainConfig,
) -> Result<ForwardPass, AutodiffError> {
    let tp = register_params(tape, params);
    let strides: Vec<usize> = params.omega_c.iter().map(|c| c.stride).collect();
    let strategy = cfg.effective_strategy();
    let use_images = !matches!(strategy, GuidanceStrategy::DepthOnly);

    let mut coarse_vars = Vec::new();
    let mut fine_vars = Vec::new();
    let mut coarse_geoms = Vec::new();
    let mut fine_geoms = Vec::new();
    for image in &batch.images {
        let img = tape.leaf(image.clone());
        let (_, c4) = omega_forward(tape, &tp.omega_c, &strides, img)?;
        let (f2, _) = omega_forward(tape, &tp.omega_f, &strides, img)?;
        let c4_shape = tape.value(c4).shape.clone();
        let f2_shape = tape.value(f2).shape.clone();
        coarse_geoms.push(MapGeometry {
            width: c4_shape[2],
            height: c4_shape[1],
            stride: 4,
        });
        fine_geoms.push(MapGeometry {
            width: f2_shape[2],
            height: f2_shape[1],
            stride: 2,
        });
        coarse_vars.push(c4);
        fine_vars.push(f2);
    }

    let (plan, extra) = dense_plan(
        &coarse_geoms,
        &batch.cameras,
        &batch.chunk,
        batch.depth_volume.as_ref(),
        &strategy,
        Some(&batch.depths),
    )
    .map_err(|e| AutodiffError::ShapeMismatch {
        layer: "dense_backprojection".to_string(),
        detail: format!("{e}"),
    })?;
    let dims = batch.chunk.dims;
    let mut vg_parts = Vec::new();
    if use_images {
        let cols = tape.sample_views(&coarse_vars, std::sync::Arc::new(plan))?;
        let vc = tape.reshape(cols, &[params.arch.c_c, dims[0], dims[1], dims[2]])?;
        vg_parts.push(vc);
    }
    if let Some(extra) = extra {
        let leaf = tape.leaf(Tensor::from_vec(&[1, dims[0], dims[1], dims[2]], extra));
        vg_parts.push(leaf);
    }
    let vg = if vg_parts.len() == 1 {
        vg_parts[0]
    } else {
        tape.concat(&vg_parts, 0)?
    };

    let (vpsi, logits) = psi_forward(tape, &tp, &params.arch, vg)?;
    let pred = predict_points(
        tape,
        &tp,
        &params.arch,
        vpsi,
        &batch.chunk,
        &batch.sup_points,
        &fine_vars,
        &fine_geoms,
        &batch.cameras,
        cfg.enable_pb,
    )?;
    let (loss, loss_tsdf, loss_occ) =
        loss_on_tape(tape, pred, &batch.sup_values, logits, &batch.occupancy)?;
    Ok(ForwardPass {
        loss,
        loss_tsdf,
        loss_occ,
        pred,
        logits,
        param_vars: tp.ordered,
    })
}

/// One optimization step over a prepared batch.
pub fn train_step<T: Scalar>(
    params: &mut ModelParams<T>,
    adam: &mut AdamState<T>,
    batch: &StepBatch<T>,
    cfg: &TrainConfig,
) -> Result<StepLosses, AutodiffError> {
    let (losses, grads) = step_loss_and_grads(params, batch, cfg)?;
    let named = params.named_tensors_mut();
    let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    let mut tensors: Vec<&mut Tensor<T>> = named.into_iter().map(|(_, t)| t).collect();
    let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    adam_step(&mut tensors, &grads, &name_refs, adam)?;
    Ok(losses)
}

#[derive(Clone, Debug, Default)]
pub struct EpochStats {
    pub losses: Vec<StepLosses>,
    pub skipped: usize,
    /// Wall time per executed step, seconds.
    pub step_seconds: Vec<f64>,
}

impl EpochStats {
    pub fn mean_total(&self) -> f64 {
        if self.losses.is_empty() {
            f64::NAN
        } else {
            self.losses.iter().map(|l| l.total).sum::<f64>() / self.losses.len() as f64
        }
    }
}

/// One epoch: `steps_per_epoch` chunks sampled round-robin across scenes.
/// Deterministic for a fixed seed and epoch index.
pub fn train_epoch<T: Scalar>(
    scenes: &[SceneData<T>],
    params: &mut ModelParams<T>,
    adam: &mut AdamState<T>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats, AutodiffError> {
    assert!(!scenes.is_empty());
    let mut rng =
        ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x517c_c1b7_2722_0a95));
    adam.cfg.lr = cfg.lr * cfg.lr_decay_per_epoch.powi(epoch as i32);
    let mut stats = EpochStats::default();
    for step in 0..cfg.steps_per_epoch {
        let scene = &scenes[step % scenes.len()];
        match prepare_step(scene, cfg, &mut rng) {
            Some(batch) => {
                let t0 = std::time::Instant::now();
                let losses = train_step(params, adam, &batch, cfg)?;
                stats.step_seconds.push(t0.elapsed().as_secs_f64());
                stats.losses.push(losses);
            }
            None => stats.skipped += 1,
        }
    }
    Ok(stats)
}
