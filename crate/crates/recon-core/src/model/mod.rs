//! The reconstruction model: 2D feature extractors, the 3D encoder-decoder
//! over the depth-guided feature volume, the TSDF and occupancy heads, and
//! the losses.
//!
//! Two identically-shaped 2D stacks with disjoint weights feed the
//! pipeline: one is tapped at stride 4 for dense volume fusion, the other
//! at stride 2 for continuous point back-projection. The 3D network output
//! can be queried at any point by trilinear interpolation, concatenated
//! with point back-projected image features, and decoded to a TSDF value
//! by an MLP, so prediction resolution is decoupled from the voxel grid.

mod infer;
mod render;
#[cfg(test)]
mod tests;
mod train;

pub use infer::{encode_scene, predict_grid, EncodedScene, InferenceTimings};
pub use render::{render_input, RenderConfig, RENDERED_CHANNELS};
pub use train::{
    forward_loss, prepare_step, step_loss_and_grads, train_epoch, train_step, EpochStats,
    ForwardPass, FrameRotation, SceneData, SceneDataConfig, StepBatch, StepLosses,
    SupervisionMode, TrainConfig,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::sync::Arc;

use crate::autodiff::{
    read_checkpoint, write_checkpoint, AutodiffError, CheckpointError, Tape, Tensor, Var,
};
use crate::backproject::{point_plan, FeatureMap2D, GuidanceStrategy, MapGeometry};
use crate::geometry::{GridSpec, Intrinsics, Pose, Vec3};
use crate::scalar::Scalar;

/// Occupancy probability clamp used inside the BCE loss.
pub const PROB_CLAMP: f64 = 1e-7;

/// Network size knobs. Defaults are the desk-scale configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    /// Rendered input channels.
    pub input_channels: usize,
    /// Coarse (stride-4) feature channels, fused into the volume.
    pub c_c: usize,
    /// Fine (stride-2) feature channels, point back-projected.
    pub c_f: usize,
    /// Output channels of the 3D network.
    pub c_psi: usize,
    pub psi_enc0: usize,
    pub psi_enc1: usize,
    pub psi_enc2: usize,
    pub psi_dec1: usize,
    /// 3D kernel size (odd). 1 makes the 3D network pointwise.
    pub psi_kernel: usize,
    /// Number of stride-2 encoder levels (0..=2).
    pub psi_levels: usize,
    pub theta_s_hidden: usize,
    pub theta_o_hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input_channels: RENDERED_CHANNELS,
            c_c: 16,
            c_f: 16,
            c_psi: 32,
            psi_enc0: 16,
            psi_enc1: 24,
            psi_enc2: 32,
            psi_dec1: 24,
            psi_kernel: 3,
            psi_levels: 2,
            theta_s_hidden: 64,
            theta_o_hidden: 32,
        }
    }
}

impl ArchConfig {
    /// A tiny configuration for gradient checks.
    pub fn micro() -> Self {
        Self {
            input_channels: RENDERED_CHANNELS,
            c_c: 2,
            c_f: 2,
            c_psi: 4,
            psi_enc0: 3,
            psi_enc1: 3,
            psi_enc2: 3,
            psi_dec1: 3,
            psi_kernel: 3,
            psi_levels: 2,
            theta_s_hidden: 4,
            theta_o_hidden: 4,
        }
    }

    /// Spatial padding multiple required by the encoder.
    pub fn pad_multiple(&self) -> usize {
        1 << self.psi_levels
    }
}

#[derive(Clone, Debug)]
pub struct ConvParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub struct MlpParams<T> {
    /// (weight [in, out], bias [out]) per layer; ReLU between layers.
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
}

/// All trainable tensors.
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    pub arch: ArchConfig,
    /// Guidance strategy the volume network was built for; fixes the input
    /// channel count of the 3D network.
    pub strategy: GuidanceStrategy,
    pub omega_c: Vec<ConvParams<T>>,
    pub omega_f: Vec<ConvParams<T>>,
    pub psi: Vec<ConvParams<T>>,
    pub theta_s: MlpParams<T>,
    pub theta_o: MlpParams<T>,
}

fn uniform_tensor<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| T::lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data)
}

fn conv2d_params<T: Scalar>(
    ci: usize,
    co: usize,
    k: usize,
    stride: usize,
    rng: &mut ChaCha8Rng,
) -> ConvParams<T> {
    ConvParams {
        weight: uniform_tensor(&[co, ci, k, k], ci * k * k, rng),
        bias: Tensor::zeros(&[co]),
        stride,
    }
}

fn conv3d_params<T: Scalar>(
    ci: usize,
    co: usize,
    k: usize,
    stride: usize,
    rng: &mut ChaCha8Rng,
) -> ConvParams<T> {
    ConvParams {
        weight: uniform_tensor(&[co, ci, k, k, k], ci * k * k * k, rng),
        bias: Tensor::zeros(&[co]),
        stride,
    }
}

fn mlp_params<T: Scalar>(widths: &[usize], rng: &mut ChaCha8Rng) -> MlpParams<T> {
    let layers = widths
        .windows(2)
        .map(|w| {
            (
                uniform_tensor(&[w[0], w[1]], w[0], rng),
                Tensor::zeros(&[w[1]]),
            )
        })
        .collect();
    MlpParams { layers }
}

impl<T: Scalar> ModelParams<T> {
    /// Fresh parameters with fan-in-scaled uniform weights and zero biases;
    /// deterministic for a fixed seed.
    pub fn new(arch: ArchConfig, strategy: GuidanceStrategy, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let omega = |rng: &mut ChaCha8Rng| {
            vec![
                conv2d_params(arch.input_channels, arch.c_c, 3, 1, rng),
                conv2d_params(arch.c_c, arch.c_c, 3, 2, rng),
                conv2d_params(arch.c_c, arch.c_c, 3, 2, rng),
            ]
        };
        let omega_c = omega(&mut rng);
        let omega_f = omega(&mut rng);
        let vg_c = strategy.channels_out(arch.c_c);
        let k = arch.psi_kernel;
        let psi = match arch.psi_levels {
            0 => vec![
                conv3d_params(vg_c, arch.psi_enc0, k, 1, &mut rng),
                conv3d_params(arch.psi_enc0, arch.c_psi, k, 1, &mut rng),
            ],
            1 => vec![
                conv3d_params(vg_c, arch.psi_enc0, k, 1, &mut rng),
                conv3d_params(arch.psi_enc0, arch.psi_enc1, k, 2, &mut rng),
                conv3d_params(arch.psi_enc0 + arch.psi_enc1, arch.c_psi, k, 1, &mut rng),
            ],
            2 => vec![
                conv3d_params(vg_c, arch.psi_enc0, k, 1, &mut rng),
                conv3d_params(arch.psi_enc0, arch.psi_enc1, k, 2, &mut rng),
                conv3d_params(arch.psi_enc1, arch.psi_enc2, k, 2, &mut rng),
                conv3d_params(arch.psi_enc1 + arch.psi_enc2, arch.psi_dec1, k, 1, &mut rng),
                conv3d_params(arch.psi_enc0 + arch.psi_dec1, arch.c_psi, k, 1, &mut rng),
            ],
            n => panic!("psi_levels {n} unsupported"),
        };
        // theta_s always takes [W, V]: c_f + c_psi inputs, with zeros
        // substituted for W when point back-projection is disabled.
        let mut theta_s = mlp_params(
            &[
                arch.c_f + arch.c_psi,
                arch.theta_s_hidden,
                arch.theta_s_hidden,
                1,
            ],
            &mut rng,
        );
        let mut theta_o = mlp_params(&[arch.c_psi, arch.theta_o_hidden, 1], &mut rng);
        // Output biases start at the free-space priors (TSDF +1, occupancy
        // around one voxel in five); Adam steps are bounded by the learning
        // rate, so spotting the heads the prior saves hundreds of steps.
        theta_s.layers.last_mut().unwrap().1.data[0] = T::one();
        theta_o.layers.last_mut().unwrap().1.data[0] = T::lit(-1.4);
        Self {
            arch,
            strategy,
            omega_c,
            omega_f,
            psi,
            theta_s,
            theta_o,
        }
    }

    /// Input channel count expected by the 3D network.
    pub fn vg_channels(&self) -> usize {
        self.strategy.channels_out(self.arch.c_c)
    }

    /// All tensors in a stable order (the Adam and checkpoint order).
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        for (prefix, convs) in [
            ("omega_c", &self.omega_c),
            ("omega_f", &self.omega_f),
            ("psi", &self.psi),
        ] {
            for (i, c) in convs.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), &c.weight));
                out.push((format!("{prefix}.{i}.bias"), &c.bias));
            }
        }
        for (i, (w, b)) in self.theta_s.layers.iter().enumerate() {
            out.push((format!("theta_s.{i}.weight"), w));
            out.push((format!("theta_s.{i}.bias"), b));
        }
        for (i, (w, b)) in self.theta_o.layers.iter().enumerate() {
            out.push((format!("theta_o.{i}.weight"), w));
            out.push((format!("theta_o.{i}.bias"), b));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        for (prefix, convs) in [
            ("omega_c", &mut self.omega_c),
            ("omega_f", &mut self.omega_f),
            ("psi", &mut self.psi),
        ] {
            for (i, c) in convs.iter_mut().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), &mut c.weight));
                out.push((format!("{prefix}.{i}.bias"), &mut c.bias));
            }
        }
        for (i, (w, b)) in self.theta_s.layers.iter_mut().enumerate() {
            out.push((format!("theta_s.{i}.weight"), w));
            out.push((format!("theta_s.{i}.bias"), b));
        }
        for (i, (w, b)) in self.theta_o.layers.iter_mut().enumerate() {
            out.push((format!("theta_o.{i}.weight"), w));
            out.push((format!("theta_o.{i}.bias"), b));
        }
        out
    }

    fn manifest(&self) -> String {
        let a = &self.arch;
        format!(
            "version 1\nstrategy {}\ninput_channels {}\nc_c {}\nc_f {}\nc_psi {}\npsi_enc0 {}\npsi_enc1 {}\npsi_enc2 {}\npsi_dec1 {}\npsi_kernel {}\npsi_levels {}\ntheta_s_hidden {}\ntheta_o_hidden {}\n",
            self.strategy.name(),
            a.input_channels,
            a.c_c,
            a.c_f,
            a.c_psi,
            a.psi_enc0,
            a.psi_enc1,
            a.psi_enc2,
            a.psi_dec1,
            a.psi_kernel,
            a.psi_levels,
            a.theta_s_hidden,
            a.theta_o_hidden
        )
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let named = self.named_tensors();
        let tensors: Vec<(String, &Tensor<T>)> = named;
        write_checkpoint(path, &self.manifest(), &tensors)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let ck = read_checkpoint::<T>(path)?;
        let mut fields = std::collections::HashMap::new();
        for line in ck.manifest.lines() {
            if let Some((k, v)) = line.split_once(' ') {
                fields.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| -> Result<usize, CheckpointError> {
            fields
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| CheckpointError::Format(format!("missing manifest field {k}")))
        };
        let strategy = fields
            .get("strategy")
            .and_then(|s| GuidanceStrategy::parse(s))
            .ok_or_else(|| CheckpointError::Format("missing strategy".to_string()))?;
        let arch = ArchConfig {
            input_channels: get("input_channels")?,
            c_c: get("c_c")?,
            c_f: get("c_f")?,
            c_psi: get("c_psi")?,
            psi_enc0: get("psi_enc0")?,
            psi_enc1: get("psi_enc1")?,
            psi_enc2: get("psi_enc2")?,
            psi_dec1: get("psi_dec1")?,
            psi_kernel: get("psi_kernel")?,
            psi_levels: get("psi_levels")?,
            theta_s_hidden: get("theta_s_hidden")?,
            theta_o_hidden: get("theta_o_hidden")?,
        };
        let mut params = Self::new(arch, strategy, 0);
        for (name, slot) in params.named_tensors_mut() {
            let loaded = ck
                .tensor(&name)
                .ok_or_else(|| CheckpointError::Format(format!("missing tensor {name}")))?;
            if loaded.shape != slot.shape {
                return Err(CheckpointError::Format(format!(
                    "tensor {name}: shape {:?}, expected {:?}",
                    loaded.shape, slot.shape
                )));
            }
            *slot = loaded.clone();
        }
        Ok(params)
    }
}

/// Parameter handles for one tape pass.
pub struct TapeParams {
    pub omega_c: Vec<(Var, Var)>,
    pub omega_f: Vec<(Var, Var)>,
    pub psi: Vec<(Var, Var)>,
    pub theta_s: Vec<(Var, Var)>,
    pub theta_o: Vec<(Var, Var)>,
    /// Registration order matching [`ModelParams::named_tensors`].
    pub ordered: Vec<Var>,
}

/// Registers every parameter on the tape.
pub fn register_params<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>) -> TapeParams {
    let mut ordered = Vec::new();
    let reg_convs = |tape: &mut Tape<T>, prefix: &str, convs: &[ConvParams<T>]| {
        let mut out = Vec::new();
        for (i, c) in convs.iter().enumerate() {
            let w = tape.param(&format!("{prefix}.{i}.weight"), c.weight.clone());
            let b = tape.param(&format!("{prefix}.{i}.bias"), c.bias.clone());
            out.push((w, b));
        }
        out
    };
    let omega_c = reg_convs(tape, "omega_c", &params.omega_c);
    let omega_f = reg_convs(tape, "omega_f", &params.omega_f);
    let psi = reg_convs(tape, "psi", &params.psi);
    let reg_mlp = |tape: &mut Tape<T>, prefix: &str, mlp: &MlpParams<T>| {
        mlp.layers
            .iter()
            .enumerate()
            .map(|(i, (w, b))| {
                (
                    tape.param(&format!("{prefix}.{i}.weight"), w.clone()),
                    tape.param(&format!("{prefix}.{i}.bias"), b.clone()),
                )
            })
            .collect::<Vec<_>>()
    };
    let theta_s = reg_mlp(tape, "theta_s", &params.theta_s);
    let theta_o = reg_mlp(tape, "theta_o", &params.theta_o);
    for group in [&omega_c, &omega_f, &psi, &theta_s, &theta_o] {
        for &(w, b) in group {
            ordered.push(w);
            ordered.push(b);
        }
    }
    TapeParams {
        omega_c,
        omega_f,
        psi,
        theta_s,
        theta_o,
        ordered,
    }
}

/// One 2D stack pass; returns the stride-2 and stride-4 taps.
pub fn omega_forward<T: Scalar>(
    tape: &mut Tape<T>,
    layers: &[(Var, Var)],
    strides: &[usize],
    image: Var,
) -> Result<(Var, Var), AutodiffError> {
    let mut x = image;
    let mut taps = Vec::new();
    for ((w, b), &s) in layers.iter().zip(strides.iter()) {
        let y = tape.conv2d(x, *w, Some(*b), s)?;
        x = tape.relu(y);
        taps.push(x);
    }
    Ok((taps[1], taps[2]))
}

/// 2D feature extraction for a batch of rendered views.
///
/// Returns the coarse stride-4 maps from one stack and the fine stride-2
/// maps from the other; the stacks share an architecture but not weights.
pub fn extract_features<T: Scalar>(
    images: &[Tensor<T>],
    params: &ModelParams<T>,
) -> Result<(Vec<FeatureMap2D<T>>, Vec<FeatureMap2D<T>>), AutodiffError> {
    let mut coarse = Vec::with_capacity(images.len());
    let mut fine = Vec::with_capacity(images.len());
    let strides: Vec<usize> = params.omega_c.iter().map(|c| c.stride).collect();
    for image in images {
        let mut tape = Tape::new();
        let tp = register_params(&mut tape, params);
        let img = tape.leaf(image.clone());
        let (_, c4) = omega_forward(&mut tape, &tp.omega_c, &strides, img)?;
        let (f2, _) = omega_forward(&mut tape, &tp.omega_f, &strides, img)?;
        coarse.push(var_to_map(&tape, c4, 4));
        fine.push(var_to_map(&tape, f2, 2));
    }
    Ok((coarse, fine))
}

pub(crate) fn var_to_map<T: Scalar>(tape: &Tape<T>, v: Var, stride: usize) -> FeatureMap2D<T> {
    let t = tape.value(v);
    FeatureMap2D {
        channels: t.shape[0],
        height: t.shape[1],
        width: t.shape[2],
        stride,
        data: t.data.clone(),
    }
}

/// MLP with ReLU between layers, none after the last.
pub fn mlp_forward<T: Scalar>(
    tape: &mut Tape<T>,
    layers: &[(Var, Var)],
    mut x: Var,
) -> Result<Var, AutodiffError> {
    for (i, (w, b)) in layers.iter().enumerate() {
        x = tape.linear(x, *w, Some(*b))?;
        if i + 1 < layers.len() {
            x = tape.relu(x);
        }
    }
    Ok(x)
}

/// 3D network pass over a `[C, X, Y, Z]` feature-volume tensor; returns
/// the output volume (same spatial dims) and per-voxel occupancy logits
/// `[S, 1]`.
pub fn psi_forward<T: Scalar>(
    tape: &mut Tape<T>,
    tp: &TapeParams,
    arch: &ArchConfig,
    vg: Var,
) -> Result<(Var, Var), AutodiffError> {
    let dims = {
        let s = &tape.value(vg).shape;
        [s[1], s[2], s[3]]
    };
    let mult = arch.pad_multiple();
    let padded = [
        dims[0].div_ceil(mult) * mult,
        dims[1].div_ceil(mult) * mult,
        dims[2].div_ceil(mult) * mult,
    ];
    let mut x = vg;
    if padded != dims {
        x = tape.pad3d(x, padded)?;
    }
    let conv = |tape: &mut Tape<T>, (w, b): (Var, Var), x: Var, s: usize| -> Result<Var, AutodiffError> {
        let y = tape.conv3d(x, w, Some(b), s)?;
        Ok(tape.relu(y))
    };
    let out_padded = match arch.psi_levels {
        0 => {
            let e0 = conv(tape, tp.psi[0], x, 1)?;
            conv(tape, tp.psi[1], e0, 1)?
        }
        1 => {
            let e0 = conv(tape, tp.psi[0], x, 1)?;
            let e1 = conv(tape, tp.psi[1], e0, 2)?;
            let u1 = tape.nearest_upsample3d(e1)?;
            let u1 = tape.crop3d(u1, padded)?;
            let cat = tape.concat(&[e0, u1], 0)?;
            conv(tape, tp.psi[2], cat, 1)?
        }
        2 => {
            let half = [padded[0] / 2, padded[1] / 2, padded[2] / 2];
            let e0 = conv(tape, tp.psi[0], x, 1)?;
            let e1 = conv(tape, tp.psi[1], e0, 2)?;
            let e2 = conv(tape, tp.psi[2], e1, 2)?;
            let u2 = tape.nearest_upsample3d(e2)?;
            let u2 = tape.crop3d(u2, half)?;
            let cat1 = tape.concat(&[e1, u2], 0)?;
            let d1 = conv(tape, tp.psi[3], cat1, 1)?;
            let u1 = tape.nearest_upsample3d(d1)?;
            let u1 = tape.crop3d(u1, padded)?;
            let cat0 = tape.concat(&[e0, u1], 0)?;
            conv(tape, tp.psi[4], cat0, 1)?
        }
        n => panic!("psi_levels {n} unsupported"),
    };
    let vpsi = if padded != dims {
        tape.crop3d(out_padded, dims)?
    } else {
        out_padded
    };
    let rows = tape.channels_to_rows(vpsi)?;
    let logits = mlp_forward(tape, &tp.theta_o, rows)?;
    Ok((vpsi, logits))
}

/// TSDF head over planned query points: trilinear volume features
/// concatenated with point back-projected fine features (or zeros when
/// disabled, keeping the head input width fixed across ablations).
#[allow(clippy::too_many_arguments)]
pub fn predict_points<T: Scalar>(
    tape: &mut Tape<T>,
    tp: &TapeParams,
    arch: &ArchConfig,
    vpsi: Var,
    vpsi_spec: &GridSpec<T>,
    points: &[Vec3<T>],
    fine_maps: &[Var],
    geoms: &[MapGeometry],
    cameras: &[(Intrinsics<T>, Pose<T>)],
    enable_pb: bool,
) -> Result<Var, AutodiffError> {
    let tri = Arc::new(crate::autodiff::trilinear_plan(vpsi_spec, points));
    let v_rows = tape.sample_trilinear(vpsi, tri)?;
    let w_rows = if enable_pb {
        let plan = Arc::new(point_plan(points, geoms, cameras));
        let cols = tape.sample_views(fine_maps, plan)?;
        tape.channels_to_rows(cols)?
    } else {
        tape.leaf(Tensor::zeros(&[points.len(), arch.c_f]))
    };
    let x = tape.concat(&[w_rows, v_rows], 1)?;
    mlp_forward(tape, &tp.theta_s, x)
}

/// Differentiable loss: `mean |t(pred) - t(gt)| + mean BCE(occupancy)`.
/// Returns `(total, tsdf_term, occupancy_term)`.
pub fn loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    gt_values: &[T],
    logits: Var,
    occupancy: &[bool],
) -> Result<(Var, Var, Var), AutodiffError> {
    let n = gt_values.len();
    let gt = tape.leaf(Tensor::from_vec(&[n, 1], gt_values.to_vec()));
    let pred_t = tape.tlog(pred);
    let gt_t = tape.tlog(gt);
    let diff = tape.sub(pred_t, gt_t)?;
    let diff = tape.abs(diff);
    let l_s = tape.mean(diff);

    let m = occupancy.len();
    let targets = Tensor::from_vec(
        &[m, 1],
        occupancy
            .iter()
            .map(|&o| if o { T::one() } else { T::zero() })
            .collect(),
    );
    let probs = tape.sigmoid(logits);
    let probs = tape.clamp(probs, T::lit(PROB_CLAMP), T::lit(1.0 - PROB_CLAMP));
    let bce = tape.bce(probs, targets)?;
    let l_o = tape.mean(bce);
    let total = tape.add(l_s, l_o)?;
    Ok((total, l_s, l_o))
}

/// Loss computed directly from values; the reporting-side counterpart of
/// [`loss_on_tape`].
pub fn compute_loss<T: Scalar>(
    pred_tsdf: &[T],
    gt_tsdf: &[T],
    logits: &[T],
    occupancy: &[bool],
) -> (T, T, T) {
    assert_eq!(pred_tsdf.len(), gt_tsdf.len());
    assert_eq!(logits.len(), occupancy.len());
    let t = |x: T| x.signum() * (x.abs() + T::one()).ln();
    let n = T::from_usize(pred_tsdf.len().max(1)).unwrap();
    let l_s = pred_tsdf
        .iter()
        .zip(gt_tsdf.iter())
        .map(|(&p, &g)| (t(p) - t(g)).abs())
        .sum::<T>()
        / n;
    let m = T::from_usize(logits.len().max(1)).unwrap();
    let lo_clamp = T::lit(PROB_CLAMP);
    let hi_clamp = T::lit(1.0 - PROB_CLAMP);
    let l_o = logits
        .iter()
        .zip(occupancy.iter())
        .map(|(&z, &o)| {
            let p = (T::one() / (T::one() + (-z).exp())).max(lo_clamp).min(hi_clamp);
            let y = if o { T::one() } else { T::zero() };
            -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
        })
        .sum::<T>()
        / m;
    (l_s + l_o, l_s, l_o)
}

/// The TSDF field evaluator: trilinear volume features plus point
/// back-projection, decoded by the TSDF head. Pure inference; batches
/// internally.
pub fn predict_tsdf<T: Scalar>(
    points: &[Vec3<T>],
    vpsi: &crate::backproject::FeatureVolume<T>,
    fine: &[FeatureMap2D<T>],
    cameras: &[(Intrinsics<T>, Pose<T>)],
    params: &ModelParams<T>,
    enable_pb: bool,
) -> Vec<T> {
    let geoms: Vec<MapGeometry> = fine.iter().map(MapGeometry::from).collect();
    let mut out = Vec::with_capacity(points.len());
    let [nx, ny, nz] = vpsi.spec.dims;
    for batch in points.chunks(32 * 1024) {
        let mut tape = Tape::new();
        let tp = register_params(&mut tape, params);
        let vol = tape.leaf(Tensor::from_vec(
            &[vpsi.channels, nx, ny, nz],
            vpsi.data.clone(),
        ));
        let fine_vars: Vec<Var> = fine
            .iter()
            .map(|m| {
                tape.leaf(Tensor::from_vec(
                    &[m.channels, m.height, m.width],
                    m.data.clone(),
                ))
            })
            .collect();
        let pred = predict_points(
            &mut tape,
            &tp,
            &params.arch,
            vol,
            &vpsi.spec,
            batch,
            &fine_vars,
            &geoms,
            cameras,
            enable_pb,
        )
        .expect("prediction shapes are internally consistent");
        out.extend_from_slice(&tape.value(pred).data);
    }
    out
}

/// Runs the 3D network over a fused feature volume; the inference-side
/// counterpart of the tape path. Returns the output feature volume and
/// per-voxel occupancy logits.
pub fn encode_volume<T: Scalar>(
    vg: &crate::backproject::FeatureVolume<T>,
    params: &ModelParams<T>,
) -> Result<(crate::backproject::FeatureVolume<T>, Vec<T>), AutodiffError> {
    if vg.channels != params.vg_channels() {
        return Err(AutodiffError::ShapeMismatch {
            layer: "encode_volume".to_string(),
            detail: format!(
                "feature volume has {} channels, the {} strategy expects {}",
                vg.channels,
                params.strategy.name(),
                params.vg_channels()
            ),
        });
    }
    let [nx, ny, nz] = vg.spec.dims;
    let mut tape = Tape::new();
    let tp = register_params(&mut tape, params);
    let vg_var = tape.leaf(Tensor::from_vec(&[vg.channels, nx, ny, nz], vg.data.clone()));
    let (vpsi, logits) = psi_forward(&mut tape, &tp, &params.arch, vg_var)?;
    let vol = crate::backproject::FeatureVolume {
        spec: vg.spec,
        channels: params.arch.c_psi,
        data: tape.value(vpsi).data.clone(),
        validity: vg.validity.clone(),
    };
    Ok((vol, tape.value(logits).data.clone()))
}
