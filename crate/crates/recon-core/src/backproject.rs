//! Lifting 2D per-view features into 3D: dense voxel back-projection with
//! depth guidance, and continuous point back-projection.
//!
//! Both operations are expressed through precomputed sampling plans (one
//! bilinear tap and one mixing coefficient per valid voxel/view or
//! point/view pair). The training path replays the same plans inside the
//! autodiff tape, so the pure functions here and the differentiable ops
//! agree sample for sample.

use thiserror::Error;

use crate::geometry::{project_point, GridSpec, Intrinsics, Pose, Vec3};
use crate::scalar::Scalar;
use crate::scene::DepthMap;
use crate::tsdf::TsdfVolume;

/// Border down-weighting margin in image pixels.
pub const BORDER_MARGIN: f64 = 20.0;
/// Border down-weighting falloff rate.
pub const BORDER_FALLOFF: f64 = 6.0;
/// Default sigma (meters) for the density / gaussian-weight guidance
/// variants; half the default truncation so all strategies share a length
/// scale.
pub const DEFAULT_GUIDANCE_SIGMA: f64 = 0.06;

#[derive(Debug, Error)]
pub enum BackprojectError {
    #[error("strategy {0} needs a fused depth volume")]
    MissingDepthVolume(&'static str),
    #[error("strategy {0} needs per-view depth maps")]
    MissingDepths(&'static str),
    #[error("got {features} feature maps but {cameras} cameras")]
    MismatchedViews { features: usize, cameras: usize },
    #[error("feature maps disagree in shape or stride")]
    InconsistentMaps,
    #[error("depth volume grid does not match the target grid")]
    GridMismatch,
}

/// A 2D feature map at `stride` pixels per feature cell, data `[C][H][W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap2D<T> {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub stride: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureMap2D<T> {
    pub fn zeros(width: usize, height: usize, channels: usize, stride: usize) -> Self {
        Self {
            width,
            height,
            channels,
            stride,
            data: vec![T::zero(); width * height * channels],
        }
    }

    pub fn constant(width: usize, height: usize, channels: usize, stride: usize, value: T) -> Self {
        let mut map = Self::zeros(width, height, channels, stride);
        map.data.fill(value);
        map
    }

    #[inline]
    pub fn at(&self, c: usize, x: usize, y: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Voxel grid of feature vectors, data `[C][X][Y][Z]`, plus the per-voxel
/// count of contributing views.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume<T> {
    pub spec: GridSpec<T>,
    pub channels: usize,
    pub data: Vec<T>,
    pub validity: Vec<u32>,
}

impl<T: Scalar> FeatureVolume<T> {
    pub fn zeros(spec: GridSpec<T>, channels: usize) -> Self {
        let n = spec.len();
        Self {
            spec,
            channels,
            data: vec![T::zero(); n * channels],
            validity: vec![0; n],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, cell: usize) -> T {
        self.data[c * self.spec.len() + cell]
    }
}

/// How estimated depth modulates the back-projection volume.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GuidanceStrategy {
    /// Append the fused TSDF as an extra channel (the main strategy).
    Tsdf,
    /// Append a fused depth-density channel.
    Density { sigma: f64 },
    /// Per-view gaussian re-weighting of the feature mean, no extra channel.
    GaussianWeight { sigma: f64 },
    /// Gaussian re-weighting plus the fused TSDF channel.
    TsdfPlusGaussian { sigma: f64 },
    /// Image features only.
    None,
    /// Fused TSDF channel only, no image features.
    DepthOnly,
}

impl GuidanceStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Tsdf => "tsdf",
            Self::Density { .. } => "density",
            Self::GaussianWeight { .. } => "gaussian-weight",
            Self::TsdfPlusGaussian { .. } => "tsdf+gaussian",
            Self::None => "none",
            Self::DepthOnly => "depth-only",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "tsdf" => Some(Self::Tsdf),
            "density" => Some(Self::Density {
                sigma: DEFAULT_GUIDANCE_SIGMA,
            }),
            "gaussian-weight" | "gaussian_weight" => Some(Self::GaussianWeight {
                sigma: DEFAULT_GUIDANCE_SIGMA,
            }),
            "tsdf+gaussian" | "tsdf_plus_gaussian" => Some(Self::TsdfPlusGaussian {
                sigma: DEFAULT_GUIDANCE_SIGMA,
            }),
            "none" => Some(Self::None),
            "depth-only" | "depth_only" => Some(Self::DepthOnly),
            _ => None,
        }
    }

    /// Output channel count given `c` image-feature channels.
    pub fn channels_out(&self, c: usize) -> usize {
        match self {
            Self::Tsdf | Self::Density { .. } | Self::TsdfPlusGaussian { .. } => c + 1,
            Self::GaussianWeight { .. } | Self::None => c,
            Self::DepthOnly => 1,
        }
    }

    fn needs_depth_volume(&self) -> bool {
        matches!(
            self,
            Self::Tsdf | Self::TsdfPlusGaussian { .. } | Self::DepthOnly
        )
    }

    fn needs_depths(&self) -> bool {
        matches!(
            self,
            Self::Density { .. } | Self::GaussianWeight { .. } | Self::TsdfPlusGaussian { .. }
        )
    }
}

/// Weight in (0, 1) for a sample `d` pixels from the nearest image border:
/// `sigmoid(l * (min(d / m, 1) * 2 - 1))` with `m` = 20 px and `l` = 6.
/// Monotone in `d` and saturated from `d = m` on.
pub fn border_weight<T: Scalar>(d: T) -> T {
    let m = T::lit(BORDER_MARGIN);
    let l = T::lit(BORDER_FALLOFF);
    let x = l * ((d / m).min(T::one()) * T::lit(2.0) - T::one());
    T::one() / (T::one() + (-x).exp())
}

/// Distance from continuous pixel coordinates to the nearest border of a
/// `width` x `height` image.
pub fn border_distance<T: Scalar>(u: T, v: T, width: usize, height: usize) -> T {
    let w = T::from_usize(width - 1).unwrap();
    let h = T::from_usize(height - 1).unwrap();
    u.min(v).min(w - u).min(h - v).max(T::zero())
}

/// A bilinear sample: four flat cell indices into an `[H][W]` plane and the
/// blend weights.
#[derive(Clone, Copy, Debug)]
pub struct BilinearTap<T> {
    pub idx: [usize; 4],
    pub w: [T; 4],
}

/// Builds the bilinear tap at continuous feature-cell coordinates, clamped
/// to the map.
pub fn bilinear_tap<T: Scalar>(width: usize, height: usize, uf: T, vf: T) -> BilinearTap<T> {
    let clamp = |c: T, n: usize| c.max(T::zero()).min(T::from_usize(n - 1).unwrap());
    let u = clamp(uf, width);
    let v = clamp(vf, height);
    let u0 = u.floor().to_usize().unwrap_or(0).min(width - 1);
    let v0 = v.floor().to_usize().unwrap_or(0).min(height - 1);
    let u1 = (u0 + 1).min(width - 1);
    let v1 = (v0 + 1).min(height - 1);
    let fu = u - T::from_usize(u0).unwrap();
    let fv = v - T::from_usize(v0).unwrap();
    let one = T::one();
    BilinearTap {
        idx: [
            v0 * width + u0,
            v0 * width + u1,
            v1 * width + u0,
            v1 * width + u1,
        ],
        w: [
            (one - fu) * (one - fv),
            fu * (one - fv),
            (one - fu) * fv,
            fu * fv,
        ],
    }
}

/// One resolved sample in a back-projection plan.
#[derive(Clone, Debug)]
pub struct PlanEntry<T> {
    /// Flat target index (voxel cell or point row).
    pub target: u32,
    pub tap: BilinearTap<T>,
    /// Mixing coefficient applied after sampling; coefficients over the
    /// views of one target sum to 1 (or to 0 when no view qualifies).
    pub coeff: T,
}

/// Back-projection plan over a fixed set of targets.
#[derive(Clone, Debug)]
pub struct SamplePlan<T> {
    /// Per-view resolved samples, view order preserved.
    pub per_view: Vec<Vec<PlanEntry<T>>>,
    /// Per-target count of views with a valid projection.
    pub validity: Vec<u32>,
    pub n_targets: usize,
}

/// Feature-map geometry needed to resolve samples without the data.
#[derive(Clone, Copy, Debug)]
pub struct MapGeometry {
    pub width: usize,
    pub height: usize,
    pub stride: usize,
}

impl<T: Scalar> From<&FeatureMap2D<T>> for MapGeometry {
    fn from(m: &FeatureMap2D<T>) -> Self {
        Self {
            width: m.width,
            height: m.height,
            stride: m.stride,
        }
    }
}

enum MixRule<'a, T> {
    /// Plain per-channel mean over valid views.
    Mean,
    /// Gaussian window on |z - depth| per view, normalized across views.
    Gaussian { sigma: T, depths: &'a [DepthMap<T>] },
    /// Border-distance weighting, normalized across views.
    Border,
}

fn build_plan<T: Scalar>(
    targets: &[Vec3<T>],
    geoms: &[MapGeometry],
    cameras: &[(Intrinsics<T>, Pose<T>)],
    mix: MixRule<'_, T>,
) -> SamplePlan<T> {
    let n_views = cameras.len();
    let mut per_view: Vec<Vec<PlanEntry<T>>> = vec![Vec::new(); n_views];
    let mut validity = vec![0u32; targets.len()];
    // (view, weight) scratch for one target.
    let mut hits: Vec<(usize, BilinearTap<T>, T)> = Vec::with_capacity(n_views);
    for (t_idx, &p) in targets.iter().enumerate() {
        hits.clear();
        for (view, (intr, pose)) in cameras.iter().enumerate() {
            let pr = project_point(p, intr, pose);
            if !pr.valid {
                continue;
            }
            validity[t_idx] += 1;
            let geom = geoms[view];
            let s = T::from_usize(geom.stride).unwrap();
            let tap = bilinear_tap(geom.width, geom.height, pr.u / s, pr.v / s);
            let weight = match &mix {
                MixRule::Mean => T::one(),
                MixRule::Gaussian { sigma, depths } => {
                    match depths[view].at_nearest(pr.u, pr.v) {
                        Some(d) => {
                            let dz = pr.z - d;
                            (-(dz * dz) / (T::lit(2.0) * *sigma * *sigma)).exp()
                        }
                        None => T::zero(),
                    }
                }
                MixRule::Border => {
                    let d = border_distance(pr.u, pr.v, intr.width, intr.height);
                    border_weight(d)
                }
            };
            hits.push((view, tap, weight));
        }
        let total: T = hits.iter().map(|&(_, _, w)| w).sum();
        if total <= T::zero() {
            continue;
        }
        for &(view, tap, weight) in &hits {
            per_view[view].push(PlanEntry {
                target: t_idx as u32,
                tap,
                coeff: weight / total,
            });
        }
    }
    SamplePlan {
        per_view,
        validity,
        n_targets: targets.len(),
    }
}

/// Applies a plan to feature maps, producing `[C]`-per-target rows stored
/// `[C][targets]`.
pub fn apply_plan<T: Scalar>(
    plan: &SamplePlan<T>,
    maps: &[FeatureMap2D<T>],
    channels: usize,
) -> Vec<T> {
    let n = plan.n_targets;
    let mut out = vec![T::zero(); channels * n];
    for (view, entries) in plan.per_view.iter().enumerate() {
        let map = &maps[view];
        let plane = map.width * map.height;
        for entry in entries {
            for c in 0..channels {
                let base = c * plane;
                let mut s = T::zero();
                for q in 0..4 {
                    s += map.data[base + entry.tap.idx[q]] * entry.tap.w[q];
                }
                out[c * n + entry.target as usize] += entry.coeff * s;
            }
        }
    }
    out
}

/// Per-voxel extra guidance channel (fused TSDF value or depth density).
fn guidance_channel<T: Scalar>(
    strategy: &GuidanceStrategy,
    spec: &GridSpec<T>,
    depth_volume: Option<&TsdfVolume<T>>,
    depths: Option<&[DepthMap<T>]>,
    cameras: &[(Intrinsics<T>, Pose<T>)],
) -> Result<Option<Vec<T>>, BackprojectError> {
    match strategy {
        GuidanceStrategy::Tsdf
        | GuidanceStrategy::TsdfPlusGaussian { .. }
        | GuidanceStrategy::DepthOnly => {
            let vol = depth_volume
                .ok_or_else(|| BackprojectError::MissingDepthVolume(strategy.name()))?;
            if vol.spec.dims != spec.dims {
                return Err(BackprojectError::GridMismatch);
            }
            Ok(Some(vol.values.clone()))
        }
        GuidanceStrategy::Density { sigma } => {
            let depths = depths.ok_or_else(|| BackprojectError::MissingDepths(strategy.name()))?;
            let sigma = T::lit(*sigma);
            let two_sq = T::lit(2.0) * sigma * sigma;
            let mut out = vec![T::zero(); spec.len()];
            for (idx, slot) in out.iter_mut().enumerate() {
                let [i, j, k] = spec.unflat(idx);
                let p = spec.center(i, j, k);
                let mut sum = T::zero();
                let mut count = 0usize;
                for (view, (intr, pose)) in cameras.iter().enumerate() {
                    let pr = project_point(p, intr, pose);
                    if !pr.valid {
                        continue;
                    }
                    if let Some(d) = depths[view].at_nearest(pr.u, pr.v) {
                        let dz = pr.z - d;
                        sum += (-(dz * dz) / two_sq).exp();
                        count += 1;
                    }
                }
                if count > 0 {
                    *slot = sum / T::from_usize(count).unwrap();
                }
            }
            Ok(Some(out))
        }
        GuidanceStrategy::GaussianWeight { .. } | GuidanceStrategy::None => Ok(None),
    }
}

/// Builds the dense back-projection plan plus the optional guidance channel
/// for voxel centers of `spec`. Exposed so the training tape can replay the
/// exact plan.
pub fn dense_plan<T: Scalar>(
    geoms: &[MapGeometry],
    cameras: &[(Intrinsics<T>, Pose<T>)],
    spec: &GridSpec<T>,
    depth_volume: Option<&TsdfVolume<T>>,
    strategy: &GuidanceStrategy,
    depths: Option<&[DepthMap<T>]>,
) -> Result<(SamplePlan<T>, Option<Vec<T>>), BackprojectError> {
    if strategy.needs_depth_volume() && depth_volume.is_none() {
        return Err(BackprojectError::MissingDepthVolume(strategy.name()));
    }
    if strategy.needs_depths() && depths.is_none() {
        return Err(BackprojectError::MissingDepths(strategy.name()));
    }
    let mut targets = Vec::with_capacity(spec.len());
    for idx in 0..spec.len() {
        let [i, j, k] = spec.unflat(idx);
        targets.push(spec.center(i, j, k));
    }
    let mix = match strategy {
        GuidanceStrategy::GaussianWeight { sigma }
        | GuidanceStrategy::TsdfPlusGaussian { sigma } => MixRule::Gaussian {
            sigma: T::lit(*sigma),
            depths: depths.unwrap(),
        },
        _ => MixRule::Mean,
    };
    let plan = if matches!(strategy, GuidanceStrategy::DepthOnly) {
        // No image sampling; still count views per voxel for the validity
        // field.
        let mut validity = vec![0u32; targets.len()];
        for (t, &p) in targets.iter().enumerate() {
            for (intr, pose) in cameras {
                if project_point(p, intr, pose).valid {
                    validity[t] += 1;
                }
            }
        }
        SamplePlan {
            per_view: vec![Vec::new(); cameras.len()],
            validity,
            n_targets: targets.len(),
        }
    } else {
        build_plan(&targets, geoms, cameras, mix)
    };
    let extra = guidance_channel(strategy, spec, depth_volume, depths, cameras)?;
    Ok((plan, extra))
}

/// Dense depth-guided back-projection: per voxel center, bilinear-sample
/// every view with a valid projection, reduce across views, then apply the
/// guidance strategy.
pub fn backproject_dense<T: Scalar>(
    features: &[FeatureMap2D<T>],
    cameras: &[(Intrinsics<T>, Pose<T>)],
    spec: &GridSpec<T>,
    depth_volume: Option<&TsdfVolume<T>>,
    strategy: &GuidanceStrategy,
    depths: Option<&[DepthMap<T>]>,
) -> Result<FeatureVolume<T>, BackprojectError> {
    let use_images = !matches!(strategy, GuidanceStrategy::DepthOnly);
    if use_images {
        if features.len() != cameras.len() {
            return Err(BackprojectError::MismatchedViews {
                features: features.len(),
                cameras: cameras.len(),
            });
        }
        if features
            .windows(2)
            .any(|w| w[0].channels != w[1].channels || w[0].stride != w[1].stride)
        {
            return Err(BackprojectError::InconsistentMaps);
        }
    }
    let c_img = if use_images { features[0].channels } else { 0 };
    let geoms: Vec<MapGeometry> = features.iter().map(MapGeometry::from).collect();
    let (plan, extra) = dense_plan(&geoms, cameras, spec, depth_volume, strategy, depths)?;
    let n = spec.len();
    let c_out = strategy.channels_out(features.first().map(|f| f.channels).unwrap_or(0));
    let mut vol = FeatureVolume::zeros(*spec, c_out);
    if use_images {
        let rows = apply_plan(&plan, features, c_img);
        vol.data[..c_img * n].copy_from_slice(&rows);
    }
    if let Some(extra) = extra {
        let offset = if use_images { c_img } else { 0 };
        vol.data[offset * n..(offset + 1) * n].copy_from_slice(&extra);
    }
    vol.validity = plan.validity;
    Ok(vol)
}

/// Builds the continuous point back-projection plan (border-weighted mean of
/// the fine feature maps).
pub fn point_plan<T: Scalar>(
    points: &[Vec3<T>],
    geoms: &[MapGeometry],
    cameras: &[(Intrinsics<T>, Pose<T>)],
) -> SamplePlan<T> {
    build_plan(points, geoms, cameras, MixRule::Border)
}

/// Point back-projection: per query point, bilinear-sample each valid
/// view's fine features, weight by border distance, and take the normalized
/// weighted mean. Points seen by no view get a zero vector and a flag.
///
/// Returns `(rows stored [C][P], no_view flags)`.
pub fn point_backproject<T: Scalar>(
    points: &[Vec3<T>],
    fine_features: &[FeatureMap2D<T>],
    cameras: &[(Intrinsics<T>, Pose<T>)],
) -> (Vec<T>, Vec<bool>) {
    let geoms: Vec<MapGeometry> = fine_features.iter().map(MapGeometry::from).collect();
    let plan = point_plan(points, &geoms, cameras);
    let channels = fine_features.first().map(|f| f.channels).unwrap_or(0);
    let rows = apply_plan(&plan, fine_features, channels);
    let no_view = plan.validity.iter().map(|&v| v == 0).collect();
    (rows, no_view)
}
