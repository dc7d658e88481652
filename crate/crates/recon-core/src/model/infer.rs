//! Scene-level inference: encode once, query anywhere.

use std::time::Instant;

use crate::autodiff::AutodiffError;
use crate::backproject::{backproject_dense, FeatureMap2D, FeatureVolume, GuidanceStrategy};
use crate::geometry::{GridSpec, Intrinsics, Pose};
use crate::scalar::Scalar;
use crate::scene::DepthMap;
use crate::tsdf::{fuse_depths, TsdfVolume};

use super::{encode_volume, extract_features, predict_tsdf, ModelParams};

/// Cost decomposition: per-frame work (feature extraction, fusion,
/// back-projection) is independent of the output sampling rate; the
/// one-time encode runs the 3D network once per scene.
#[derive(Clone, Copy, Debug, Default)]
pub struct InferenceTimings {
    pub frames: usize,
    pub per_frame_seconds: f64,
    pub encode_seconds: f64,
}

/// Everything needed to answer TSDF queries for one scene.
pub struct EncodedScene<T> {
    pub vpsi: FeatureVolume<T>,
    /// Per-voxel occupancy probability on the model grid.
    pub occupancy_probs: Vec<T>,
    pub fine: Vec<FeatureMap2D<T>>,
    pub cameras: Vec<(Intrinsics<T>, Pose<T>)>,
    pub depth_volume: Option<TsdfVolume<T>>,
    pub timings: InferenceTimings,
}

impl<T: Scalar> EncodedScene<T> {
    /// Thresholded occupancy flags on the model grid.
    pub fn occupied_flags(&self, threshold: f64) -> Vec<bool> {
        let t = T::lit(threshold);
        self.occupancy_probs.iter().map(|&p| p > t).collect()
    }
}

/// Runs the per-frame and per-scene phases once: 2D features for every
/// view, depth fusion, dense back-projection, and the 3D network.
pub fn encode_scene<T: Scalar>(
    params: &ModelParams<T>,
    images: &[crate::autodiff::Tensor<T>],
    cameras: &[(Intrinsics<T>, Pose<T>)],
    depths: &[DepthMap<T>],
    grid: &GridSpec<T>,
    truncation: T,
) -> Result<EncodedScene<T>, AutodiffError> {
    let strategy = params.strategy;
    let t0 = Instant::now();
    let (coarse, fine) = extract_features(images, params)?;
    let depth_volume = if matches!(
        strategy,
        GuidanceStrategy::Tsdf | GuidanceStrategy::TsdfPlusGaussian { .. } | GuidanceStrategy::DepthOnly
    ) {
        Some(
            fuse_depths(depths, cameras, grid, truncation).map_err(|e| {
                AutodiffError::ShapeMismatch {
                    layer: "encode_scene".to_string(),
                    detail: format!("{e}"),
                }
            })?,
        )
    } else {
        None
    };
    let vg = backproject_dense(
        &coarse,
        cameras,
        grid,
        depth_volume.as_ref(),
        &strategy,
        Some(depths),
    )
    .map_err(|e| AutodiffError::ShapeMismatch {
        layer: "encode_scene".to_string(),
        detail: format!("{e}"),
    })?;
    let per_frame_seconds = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let (vpsi, logits) = encode_volume(&vg, params)?;
    let occupancy_probs = logits
        .iter()
        .map(|&z| T::one() / (T::one() + (-z).exp()))
        .collect();
    let encode_seconds = t1.elapsed().as_secs_f64();

    Ok(EncodedScene {
        vpsi,
        occupancy_probs,
        fine,
        cameras: cameras.to_vec(),
        depth_volume,
        timings: InferenceTimings {
            frames: images.len(),
            per_frame_seconds,
            encode_seconds,
        },
    })
}

/// Queries the encoded scene on an output grid per the request; returns
/// the volume, the work counters, and the query wall time.
pub fn predict_grid<T: Scalar>(
    encoded: &EncodedScene<T>,
    params: &ModelParams<T>,
    req: &crate::reconstruct::ReconstructionRequest,
) -> Result<
    (
        TsdfVolume<T>,
        crate::reconstruct::ReconstructStats,
        f64,
    ),
    crate::reconstruct::ReconstructError,
> {
    let occupied = encoded.occupied_flags(req.occupancy_threshold);
    let t0 = Instant::now();
    let (volume, stats) = crate::reconstruct::reconstruct_grid(
        &encoded.vpsi.spec,
        Some(&occupied),
        req,
        |points| {
            predict_tsdf(
                points,
                &encoded.vpsi,
                &encoded.fine,
                &encoded.cameras,
                params,
                req.enable_pb,
            )
        },
    )?;
    Ok((volume, stats, t0.elapsed().as_secs_f64()))
}
