//! Scratch probe for tuning desk-scale training configs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use recon_core::autodiff::{AdamConfig, AdamState, Tensor};
use recon_core::backproject::GuidanceStrategy;
use recon_core::eval::{metrics_3d, VisibilityVolume};
use recon_core::model::{
    encode_scene, predict_grid, train_epoch, ArchConfig, ModelParams, SceneData, SceneDataConfig,
    SupervisionMode, TrainConfig,
};
use recon_core::reconstruct::{marching_cubes, MarchingCubesOptions, ReconstructionRequest};
use recon_core::scene::{fit_grid, sdf_eval, NoiseConfig, ScenePreset, DEFAULT_MAX_DEPTH};
use recon_core::tsdf::TsdfVolume;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let image: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(64);
    let focal: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(56.0);
    let steps: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(45);
    let epochs: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(3);
    let dg: bool = args.get(5).map(|s| s == "dg").unwrap_or(false);
    let pb: bool = args.get(6).map(|s| s == "pb").unwrap_or(false);
    let superv = match args.get(7).map(|s| s.as_str()) {
        Some("interp") => SupervisionMode::Interpolated,
        _ => SupervisionMode::Rts,
    };

    let scfg = SceneDataConfig {
        n_views: 12,
        image_size: (image, image),
        focal,
        orbit_heights: vec![0.8, 1.9],
        voxel_size: 0.04,
        grid_margin: 0.22,
        noise: NoiseConfig {
            seed: 9,
            ..NoiseConfig::default()
        },
        ..SceneDataConfig::default()
    };
    let box_only = args.get(8).map(|s| s == "box").unwrap_or(false);
    let scenes: Vec<SceneData<f64>> = if box_only {
        vec![
            SceneData::build(ScenePreset::BoxCorner.build(1), &scfg).unwrap(),
            SceneData::build(ScenePreset::BoxCorner.build(4), &scfg).unwrap(),
            SceneData::build(ScenePreset::BoxCorner.build(5), &scfg).unwrap(),
        ]
    } else {
        vec![
            SceneData::build(ScenePreset::BoxCorner.build(1), &scfg).unwrap(),
            SceneData::build(ScenePreset::Thin.build(2), &scfg).unwrap(),
            SceneData::build(ScenePreset::Room.build(3), &scfg).unwrap(),
        ]
    };
    let cfg = TrainConfig {
        supervision: superv,
        enable_dg: dg,
        enable_pb: pb,
        strategy: GuidanceStrategy::Tsdf,
        chunk_dims: [16, 16, 12],
        points_per_step: 3072,
        views_per_step: 12,
        rotation_augmentation: true,
        depth_scale_augmentation: true,
        epochs,
        steps_per_epoch: steps,
        lr: 1e-3,
        lr_decay_per_epoch: 0.75,
        seed: 7,
    };
    let mut params = ModelParams::<f64>::new(ArchConfig::default(), cfg.effective_strategy(), 42);
    let named = params.named_tensors();
    let tensors: Vec<&Tensor<f64>> = named.iter().map(|(_, t)| *t).collect();
    let mut adam = AdamState::new(
        &tensors,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let t0 = std::time::Instant::now();
    for epoch in 0..cfg.epochs {
        let stats = train_epoch(&scenes, &mut params, &mut adam, &cfg, epoch).unwrap();
        let first = stats.losses.first().map(|l| l.total).unwrap_or(f64::NAN);
        let last = stats.losses.last().map(|l| l.total).unwrap_or(f64::NAN);
        println!(
            "epoch {epoch}: mean {:.4} first {:.4} last {:.4} skipped {} ({:.2} s/step)",
            stats.mean_total(),
            first,
            last,
            stats.skipped,
            stats.step_seconds.iter().sum::<f64>() / stats.step_seconds.len().max(1) as f64,
        );
    }
    println!("training took {:.1?}", t0.elapsed());

    for (idx, data) in scenes.iter().enumerate() {
        let encoded = encode_scene(
            &params,
            &data.images,
            &data.cameras,
            &data.noisy_depths,
            &data.grid,
            data.truncation,
        )
        .unwrap();
        for filter in [false, true] {
            let req = ReconstructionRequest {
                spacing: 0.02,
                occupancy_filter: filter,
                occupancy_threshold: 0.5,
                enable_pb: cfg.enable_pb,
            };
            let (vol, stats, _) = predict_grid(&encoded, &params, &req).unwrap();
            let neg = vol.values.iter().filter(|&&v| v < 0.0).count();
            let mesh = marching_cubes(&vol, 0.0, &MarchingCubesOptions::default());
            let gt_spec = fit_grid::<f64>(&data.scene, 0.02, 0.15);
            let gt_vol = TsdfVolume::from_fn(gt_spec, 0.06, |p| sdf_eval(&data.scene, p, Some(0.06)));
            let gt_mesh = marching_cubes(&gt_vol, 0.0, &MarchingCubesOptions::default());
            let vis = VisibilityVolume::from_depths(
                data.grid,
                &data.gt_depths,
                &data.cameras,
                data.truncation,
                DEFAULT_MAX_DEPTH,
            );
            let m = if mesh.is_empty() {
                None
            } else {
                Some(metrics_3d(&mesh, &gt_mesh, &vis, 0.05).unwrap())
            };
            match m {
                Some(m) => println!(
                    "scene {idx} filter={filter}: neg {} / evals {} — chamfer {:.2} cm acc {:.2} comp {:.2} f1 {:.1}",
                    neg, stats.cells_evaluated, m.chamfer, m.acc, m.comp, m.f1
                ),
                None => println!(
                    "scene {idx} filter={filter}: neg {} / evals {} — EMPTY MESH",
                    neg, stats.cells_evaluated
                ),
            }
        }
    }
}
