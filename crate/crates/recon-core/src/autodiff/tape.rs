//! The computation tape: eager forward, reverse-order backward.

use std::sync::Arc;

use rayon::prelude::*;

use crate::backproject::SamplePlan;
use crate::geometry::{trilinear_footprint, GridSpec, TrilinearFootprint, Vec3};
use crate::scalar::Scalar;

use super::conv;
use super::{AutodiffError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Trilinear sampling plan: one footprint per query point into a
/// `[C, X, Y, Z]` volume with `spatial` nodes per channel.
#[derive(Clone, Debug)]
pub struct TriPlan<T> {
    pub footprints: Vec<TrilinearFootprint<T>>,
    pub out_of_bounds: Vec<bool>,
    pub spatial: usize,
}

/// Builds the trilinear plan for `points` over `spec` (clamped at borders,
/// clamping reported per point).
pub fn trilinear_plan<T: Scalar>(spec: &GridSpec<T>, points: &[Vec3<T>]) -> TriPlan<T> {
    let footprints: Vec<TrilinearFootprint<T>> = points
        .iter()
        .map(|&p| trilinear_footprint(spec, p))
        .collect();
    let out_of_bounds = footprints.iter().map(|f| f.out_of_bounds).collect();
    TriPlan {
        footprints,
        out_of_bounds,
        spatial: spec.len(),
    }
}

enum Op<T> {
    Leaf,
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    /// t(x) = sign(x) ln(1 + |x|)
    TLog(Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mean(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    NearestUpsample3d(Var),
    Pad3d {
        x: Var,
        dims: [usize; 3],
    },
    Crop3d {
        x: Var,
        dims: [usize; 3],
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    /// `[C, rest...]` -> `[prod(rest), C]`
    ChannelsToRows(Var),
    /// Shape metadata change, same element count and order.
    Reshape(Var),
    /// Elementwise binary cross-entropy against constant targets.
    Bce {
        prob: Var,
        target: Tensor<T>,
    },
    SampleTrilinear {
        vol: Var,
        plan: Arc<TriPlan<T>>,
    },
    /// Back-projection of per-view feature maps through a sampling plan.
    SampleViews {
        maps: Vec<Var>,
        plan: Arc<SamplePlan<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    trainable: bool,
    name: Option<String>,
}

/// Eager computation tape.
#[derive(Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            trainable: false,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input (no gradient retained).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a trainable parameter.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].trainable = true;
        self.nodes[v.0].name = Some(name.to_string());
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass; populated for leaves and
    /// parameters, `None` for unreachable or interior nodes.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter, zeros when the parameter is unreachable
    /// from the loss.
    pub fn grad_or_zero(&self, v: Var) -> Tensor<T> {
        match self.grad(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.nodes[v.0].value.shape),
        }
    }

    fn shape_err(layer: &str, detail: String) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            layer: layer.to_string(),
            detail,
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(value, Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.abs());
        self.push(value, Op::Abs(x))
    }

    /// `t(x) = sign(x) ln(1 + |x|)`; compresses TSDF residuals near the
    /// surface.
    pub fn tlog(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.signum() * (v.abs() + T::one()).ln());
        self.push(value, Op::TLog(x))
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let value = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(value, Op::Clamp { x, lo, hi })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Self::shape_err(
                "add",
                format!("{:?} vs {:?}", self.value(a).shape, self.value(b).shape),
            ));
        }
        let data = self
            .value(a)
            .data
            .iter()
            .zip(self.value(b).data.iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Self::shape_err(
                "sub",
                format!("{:?} vs {:?}", self.value(a).shape, self.value(b).shape),
            ));
        }
        let data = self
            .value(a)
            .data
            .iter()
            .zip(self.value(b).data.iter())
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.value(a).shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Sub(a, b)))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = T::from_usize(t.numel()).unwrap();
        let sum: T = t.data.iter().copied().sum();
        self.push(Tensor::scalar(sum / n), Op::Mean(x))
    }

    /// `[N, in] x [in, out] (+ [out]) -> [N, out]`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, AutodiffError> {
        let xs = &self.value(x).shape;
        let ws = &self.value(w).shape;
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Self::shape_err(
                "linear",
                format!("input {xs:?} incompatible with weight {ws:?}"),
            ));
        }
        let (n, ci, co) = (xs[0], xs[1], ws[1]);
        if let Some(b) = b {
            let bs = &self.value(b).shape;
            if bs.as_slice() != [co] {
                return Err(Self::shape_err(
                    "linear",
                    format!("bias {bs:?} incompatible with weight {ws:?}"),
                ));
            }
        }
        let xv = &self.value(x).data;
        let wv = &self.value(w).data;
        let bv = b.map(|b| self.value(b).data.clone());
        let mut out = vec![T::zero(); n * co];
        out.par_chunks_mut(co).enumerate().for_each(|(row, orow)| {
            if let Some(bv) = &bv {
                orow.copy_from_slice(bv);
            }
            for k in 0..ci {
                let xnk = xv[row * ci + k];
                let wrow = &wv[k * co..(k + 1) * co];
                for (o, &wkc) in orow.iter_mut().zip(wrow.iter()) {
                    *o += xnk * wkc;
                }
            }
        });
        Ok(self.push(
            Tensor::from_vec(&[n, co], out),
            Op::Linear { x, w, b },
        ))
    }

    /// `[Ci, H, W]` -> `[Co, ceil(H/s), ceil(W/s)]`
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    ) -> Result<Var, AutodiffError> {
        let xs = &self.value(x).shape;
        let ws = &self.value(w).shape;
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(Self::shape_err(
                "conv2d",
                format!("input {xs:?} incompatible with weight {ws:?} (odd square kernel required)"),
            ));
        }
        let (ci, h, wd) = (xs[0], xs[1], xs[2]);
        let (co, k) = (ws[0], ws[2]);
        if let Some(b) = b {
            if self.value(b).shape.as_slice() != [co] {
                return Err(Self::shape_err(
                    "conv2d",
                    format!("bias {:?} for {co} output channels", self.value(b).shape),
                ));
            }
        }
        let (oh, ow) = (conv::conv_out_len(h, stride), conv::conv_out_len(wd, stride));
        let mut out = vec![T::zero(); co * oh * ow];
        let bv = b.map(|b| self.value(b).data.clone());
        conv::conv2d_forward(
            &self.value(x).data,
            &self.value(w).data,
            bv.as_deref(),
            ci,
            co,
            [h, wd],
            k,
            stride,
            &mut out,
        );
        Ok(self.push(
            Tensor::from_vec(&[co, oh, ow], out),
            Op::Conv2d { x, w, b, stride },
        ))
    }

    /// `[Ci, X, Y, Z]` -> `[Co, ceil(X/s), ceil(Y/s), ceil(Z/s)]`
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    ) -> Result<Var, AutodiffError> {
        let xs = &self.value(x).shape;
        let ws = &self.value(w).shape;
        if xs.len() != 4
            || ws.len() != 5
            || ws[1] != xs[0]
            || ws[2] != ws[3]
            || ws[3] != ws[4]
            || ws[2] % 2 == 0
        {
            return Err(Self::shape_err(
                "conv3d",
                format!("input {xs:?} incompatible with weight {ws:?} (odd cubic kernel required)"),
            ));
        }
        let (ci, xd, yd, zd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[0], ws[2]);
        if let Some(b) = b {
            if self.value(b).shape.as_slice() != [co] {
                return Err(Self::shape_err(
                    "conv3d",
                    format!("bias {:?} for {co} output channels", self.value(b).shape),
                ));
            }
        }
        let (ox, oy, oz) = (
            conv::conv_out_len(xd, stride),
            conv::conv_out_len(yd, stride),
            conv::conv_out_len(zd, stride),
        );
        let mut out = vec![T::zero(); co * ox * oy * oz];
        let bv = b.map(|b| self.value(b).data.clone());
        conv::conv3d_forward(
            &self.value(x).data,
            &self.value(w).data,
            bv.as_deref(),
            ci,
            co,
            [xd, yd, zd],
            k,
            stride,
            &mut out,
        );
        Ok(self.push(
            Tensor::from_vec(&[co, ox, oy, oz], out),
            Op::Conv3d { x, w, b, stride },
        ))
    }

    /// Factor-2 nearest-neighbor upsampling of `[C, X, Y, Z]`.
    pub fn nearest_upsample3d(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xs = &self.value(x).shape;
        if xs.len() != 4 {
            return Err(Self::shape_err(
                "nearest_upsample3d",
                format!("expected [C, X, Y, Z], got {xs:?}"),
            ));
        }
        let (c, xd, yd, zd) = (xs[0], xs[1], xs[2], xs[3]);
        let (ux, uy, uz) = (2 * xd, 2 * yd, 2 * zd);
        let xv = &self.value(x).data;
        let mut out = vec![T::zero(); c * ux * uy * uz];
        for ci in 0..c {
            for xo in 0..ux {
                for yo in 0..uy {
                    let in_row = ((ci * xd + xo / 2) * yd + yo / 2) * zd;
                    let out_row = ((ci * ux + xo) * uy + yo) * uz;
                    for zo in 0..uz {
                        out[out_row + zo] = xv[in_row + zo / 2];
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(&[c, ux, uy, uz], out),
            Op::NearestUpsample3d(x),
        ))
    }

    /// Zero-pads the spatial dims of `[C, X, Y, Z]` at the high side up to
    /// `dims`.
    pub fn pad3d(&mut self, x: Var, dims: [usize; 3]) -> Result<Var, AutodiffError> {
        let xs = &self.value(x).shape;
        if xs.len() != 4 || (0..3).any(|a| dims[a] < xs[a + 1]) {
            return Err(Self::shape_err(
                "pad3d",
                format!("cannot pad {xs:?} to {dims:?}"),
            ));
        }
        let (c, xd, yd, zd) = (xs[0], xs[1], xs[2], xs[3]);
        let [px, py, pz] = dims;
        let xv = &self.value(x).data;
        let mut out = vec![T::zero(); c * px * py * pz];
        for ci in 0..c {
            for xi in 0..xd {
                for yi in 0..yd {
                    let src = ((ci * xd + xi) * yd + yi) * zd;
                    let dst = ((ci * px + xi) * py + yi) * pz;
                    out[dst..dst + zd].copy_from_slice(&xv[src..src + zd]);
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(&[c, px, py, pz], out),
            Op::Pad3d { x, dims },
        ))
    }

    /// Crops the spatial dims of `[C, X, Y, Z]` down to `dims` (low corner).
    pub fn crop3d(&mut self, x: Var, dims: [usize; 3]) -> Result<Var, AutodiffError> {
        let xs = &self.value(x).shape;
        if xs.len() != 4 || (0..3).any(|a| dims[a] > xs[a + 1]) {
            return Err(Self::shape_err(
                "crop3d",
                format!("cannot crop {xs:?} to {dims:?}"),
            ));
        }
        let (c, xd, yd, zd) = (xs[0], xs[1], xs[2], xs[3]);
        let [cx, cy, cz] = dims;
        let xv = &self.value(x).data;
        let mut out = vec![T::zero(); c * cx * cy * cz];
        for ci in 0..c {
            for xi in 0..cx {
                for yi in 0..cy {
                    let src = ((ci * xd + xi) * yd + yi) * zd;
                    let dst = ((ci * cx + xi) * cy + yi) * cz;
                    out[dst..dst + cz].copy_from_slice(&xv[src..src + cz]);
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(&[c, cx, cy, cz], out),
            Op::Crop3d { x, dims },
        ))
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        if parts.is_empty() {
            return Err(Self::shape_err("concat", "no inputs".to_string()));
        }
        let base = self.value(parts[0]).shape.clone();
        if axis >= base.len() {
            return Err(Self::shape_err(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = &self.value(p).shape;
            if s.len() != base.len()
                || (0..base.len()).any(|a| a != axis && s[a] != base[a])
            {
                return Err(Self::shape_err(
                    "concat",
                    format!("{s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            axis_total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = axis_total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = vec![T::zero(); shape.iter().product()];
        let out_block = axis_total * inner;
        let mut offset = 0usize;
        for &p in parts {
            let s = self.value(p).shape[axis];
            let pv = &self.value(p).data;
            let in_block = s * inner;
            for o in 0..outer {
                let src = o * in_block;
                let dst = o * out_block + offset * inner;
                out[dst..dst + in_block].copy_from_slice(&pv[src..src + in_block]);
            }
            offset += s;
        }
        Ok(self.push(
            Tensor::from_vec(&shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// `[C, rest...]` -> `[prod(rest), C]`: channel-major volume to
    /// row-per-cell layout.
    pub fn channels_to_rows(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xs = &self.value(x).shape;
        if xs.len() < 2 {
            return Err(Self::shape_err(
                "channels_to_rows",
                format!("expected at least 2 dims, got {xs:?}"),
            ));
        }
        let c = xs[0];
        let rest: usize = xs[1..].iter().product();
        let xv = &self.value(x).data;
        let mut out = vec![T::zero(); c * rest];
        for ci in 0..c {
            for r in 0..rest {
                out[r * c + ci] = xv[ci * rest + r];
            }
        }
        Ok(self.push(Tensor::from_vec(&[rest, c], out), Op::ChannelsToRows(x)))
    }

    /// Reinterprets the shape; element count must match.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Self::shape_err(
                "reshape",
                format!("{:?} to {shape:?}", self.value(x).shape),
            ));
        }
        let data = self.value(x).data.clone();
        Ok(self.push(Tensor::from_vec(shape, data), Op::Reshape(x)))
    }

    /// Elementwise binary cross-entropy of probabilities against constant
    /// targets in [0, 1].
    pub fn bce(&mut self, prob: Var, target: Tensor<T>) -> Result<Var, AutodiffError> {
        if self.value(prob).shape != target.shape {
            return Err(Self::shape_err(
                "bce",
                format!(
                    "prob {:?} vs target {:?}",
                    self.value(prob).shape, target.shape
                ),
            ));
        }
        let data: Vec<T> = self
            .value(prob)
            .data
            .iter()
            .zip(target.data.iter())
            .map(|(&p, &y)| -(y * p.ln() + (T::one() - y) * (T::one() - p).ln()))
            .collect();
        let shape = target.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Bce { prob, target }))
    }

    /// Trilinear interpolation of a `[C, X, Y, Z]` volume at planned query
    /// points; output `[P, C]`.
    pub fn sample_trilinear(
        &mut self,
        vol: Var,
        plan: Arc<TriPlan<T>>,
    ) -> Result<Var, AutodiffError> {
        let vs = &self.value(vol).shape;
        if vs.len() != 4 || vs[1] * vs[2] * vs[3] != plan.spatial {
            return Err(Self::shape_err(
                "sample_trilinear",
                format!("volume {vs:?} does not match plan over {} nodes", plan.spatial),
            ));
        }
        let c = vs[0];
        let spatial = plan.spatial;
        let vv = &self.value(vol).data;
        let p_n = plan.footprints.len();
        let mut out = vec![T::zero(); p_n * c];
        for (p, fp) in plan.footprints.iter().enumerate() {
            for ci in 0..c {
                let base = ci * spatial;
                let mut acc = T::zero();
                for q in 0..8 {
                    acc += vv[base + fp.corners[q]] * fp.weights[q];
                }
                out[p * c + ci] = acc;
            }
        }
        Ok(self.push(
            Tensor::from_vec(&[p_n, c], out),
            Op::SampleTrilinear { vol, plan },
        ))
    }

    /// Applies a back-projection [`SamplePlan`] to per-view feature maps
    /// (each `[C, H, W]`); output `[C, targets]`.
    pub fn sample_views(
        &mut self,
        maps: &[Var],
        plan: Arc<SamplePlan<T>>,
    ) -> Result<Var, AutodiffError> {
        if maps.len() != plan.per_view.len() {
            return Err(Self::shape_err(
                "sample_views",
                format!(
                    "{} maps for a plan over {} views",
                    maps.len(),
                    plan.per_view.len()
                ),
            ));
        }
        let c = if maps.is_empty() {
            0
        } else {
            self.value(maps[0]).shape[0]
        };
        for &m in maps {
            let s = &self.value(m).shape;
            if s.len() != 3 || s[0] != c {
                return Err(Self::shape_err(
                    "sample_views",
                    format!("feature map shape {s:?}"),
                ));
            }
        }
        let n = plan.n_targets;
        let mut out = vec![T::zero(); c * n];
        for (view, entries) in plan.per_view.iter().enumerate() {
            let map = self.value(maps[view]);
            let plane = map.shape[1] * map.shape[2];
            for e in entries {
                for ci in 0..c {
                    let base = ci * plane;
                    let mut s = T::zero();
                    for q in 0..4 {
                        s += map.data[base + e.tap.idx[q]] * e.tap.w[q];
                    }
                    out[ci * n + e.target as usize] += e.coeff * s;
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(&[c, n], out),
            Op::SampleViews {
                maps: maps.to_vec(),
                plan,
            },
        ))
    }

    /// Reverse pass from a scalar loss. Populates gradients for every node
    /// reachable from the loss; query them with [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        if loss.0 >= self.nodes.len() {
            return Err(AutodiffError::BackwardBeforeForward);
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(
                self.nodes[loss.0].value.shape.clone(),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..self.nodes.len()).rev() {
            if self.grads[idx].is_none() {
                continue;
            }
            // Keep leaf gradients; interior gradients are consumed here.
            let g = if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            } else {
                self.grads[idx].take().unwrap()
            };
            self.propagate(idx, &g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, delta: Tensor<T>) {
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, b) in g.data.iter_mut().zip(delta.data.iter()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, idx: usize, g: &Tensor<T>) {
        // Ops store only Vars; clone the small descriptors out of the node
        // so `self` stays free for accumulation.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Relu(x) => {
                let x = *x;
                let data = self.nodes[x.0]
                    .value
                    .data
                    .iter()
                    .zip(g.data.iter())
                    .map(|(&v, &gg)| if v > T::zero() { gg } else { T::zero() })
                    .collect();
                let shape = g.shape.clone();
                self.acc(x, Tensor { shape, data });
            }
            Op::Sigmoid(x) => {
                let x = *x;
                let data = self.nodes[idx]
                    .value
                    .data
                    .iter()
                    .zip(g.data.iter())
                    .map(|(&y, &gg)| gg * y * (T::one() - y))
                    .collect();
                let shape = g.shape.clone();
                self.acc(x, Tensor { shape, data });
            }
            Op::Abs(x) => {
                let x = *x;
                let data = self.nodes[x.0]
                    .value
                    .data
                    .iter()
                    .zip(g.data.iter())
                    .map(|(&v, &gg)| {
                        if v > T::zero() {
                            gg
                        } else if v < T::zero() {
                            -gg
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                let shape = g.shape.clone();
                self.acc(x, Tensor { shape, data });
            }
            Op::TLog(x) => {
                let x = *x;
                let data = self.nodes[x.0]
                    .value
                    .data
                    .iter()
                    .zip(g.data.iter())
                    .map(|(&v, &gg)| gg / (T::one() + v.abs()))
                    .collect();
                let shape = g.shape.clone();
                self.acc(x, Tensor { shape, data });
            }
            Op::Clamp { x, lo, hi } => {
                let (x, lo, hi) = (*x, *lo, *hi);
                let data = self.nodes[x.0]
                    .value
                    .data
                    .iter()
                    .zip(g.data.iter())
                    .map(|(&v, &gg)| if v >= lo && v <= hi { gg } else { T::zero() })
                    .collect();
                let shape = g.shape.clone();
                self.acc(x, Tensor { shape, data });
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, g.clone());
                self.acc(b, g.clone());
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, g.clone());
                let neg = g.map(|v| -v);
                self.acc(b, neg);
            }
            Op::Mean(x) => {
                let x = *x;
                let shape = self.nodes[x.0].value.shape.clone();
                let n: usize = shape.iter().product();
                let gv = g.item() / T::from_usize(n).unwrap();
                self.acc(
                    x,
                    Tensor {
                        shape,
                        data: vec![gv; n],
                    },
                );
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let xs = self.nodes[x.0].value.shape.clone();
                let (n, ci) = (xs[0], xs[1]);
                let co = self.nodes[w.0].value.shape[1];
                let xv = &self.nodes[x.0].value.data;
                let wv = &self.nodes[w.0].value.data;
                let mut dx = vec![T::zero(); n * ci];
                dx.par_chunks_mut(ci).enumerate().for_each(|(row, drow)| {
                    let grow = &g.data[row * co..(row + 1) * co];
                    for (kk, d) in drow.iter_mut().enumerate() {
                        let wrow = &wv[kk * co..(kk + 1) * co];
                        let mut acc = T::zero();
                        for (gg, ww) in grow.iter().zip(wrow.iter()) {
                            acc += *gg * *ww;
                        }
                        *d = acc;
                    }
                });
                let mut dw = vec![T::zero(); ci * co];
                dw.par_chunks_mut(co).enumerate().for_each(|(kk, dwrow)| {
                    for row in 0..n {
                        let xnk = xv[row * ci + kk];
                        let grow = &g.data[row * co..(row + 1) * co];
                        for (d, gg) in dwrow.iter_mut().zip(grow.iter()) {
                            *d += xnk * *gg;
                        }
                    }
                });
                self.acc(x, Tensor::from_vec(&[n, ci], dx));
                self.acc(w, Tensor::from_vec(&[ci, co], dw));
                if let Some(b) = b {
                    let mut db = vec![T::zero(); co];
                    for row in 0..n {
                        for (d, gg) in db.iter_mut().zip(g.data[row * co..].iter()) {
                            *d += *gg;
                        }
                    }
                    self.acc(b, Tensor::from_vec(&[co], db));
                }
            }
            Op::Conv2d { x, w, b, stride } => {
                let (x, w, b, stride) = (*x, *w, *b, *stride);
                let xs = self.nodes[x.0].value.shape.clone();
                let ws = self.nodes[w.0].value.shape.clone();
                let (ci, h, wd) = (xs[0], xs[1], xs[2]);
                let (co, k) = (ws[0], ws[2]);
                let mut dx = vec![T::zero(); ci * h * wd];
                let mut dw = vec![T::zero(); ws.iter().product()];
                let mut db = b.map(|_| vec![T::zero(); co]);
                conv::conv2d_backward(
                    &self.nodes[x.0].value.data,
                    &self.nodes[w.0].value.data,
                    &g.data,
                    ci,
                    co,
                    [h, wd],
                    k,
                    stride,
                    &mut dx,
                    &mut dw,
                    db.as_deref_mut(),
                );
                self.acc(x, Tensor::from_vec(&xs, dx));
                self.acc(w, Tensor::from_vec(&ws, dw));
                if let (Some(b), Some(db)) = (b, db) {
                    self.acc(b, Tensor::from_vec(&[co], db));
                }
            }
            Op::Conv3d { x, w, b, stride } => {
                let (x, w, b, stride) = (*x, *w, *b, *stride);
                let xs = self.nodes[x.0].value.shape.clone();
                let ws = self.nodes[w.0].value.shape.clone();
                let (ci, xd, yd, zd) = (xs[0], xs[1], xs[2], xs[3]);
                let (co, k) = (ws[0], ws[2]);
                let mut dx = vec![T::zero(); ci * xd * yd * zd];
                let mut dw = vec![T::zero(); ws.iter().product()];
                let mut db = b.map(|_| vec![T::zero(); co]);
                conv::conv3d_backward(
                    &self.nodes[x.0].value.data,
                    &self.nodes[w.0].value.data,
                    &g.data,
                    ci,
                    co,
                    [xd, yd, zd],
                    k,
                    stride,
                    &mut dx,
                    &mut dw,
                    db.as_deref_mut(),
                );
                self.acc(x, Tensor::from_vec(&xs, dx));
                self.acc(w, Tensor::from_vec(&ws, dw));
                if let (Some(b), Some(db)) = (b, db) {
                    self.acc(b, Tensor::from_vec(&[co], db));
                }
            }
            Op::NearestUpsample3d(x) => {
                let x = *x;
                let xs = self.nodes[x.0].value.shape.clone();
                let (c, xd, yd, zd) = (xs[0], xs[1], xs[2], xs[3]);
                let (ux, uy, uz) = (2 * xd, 2 * yd, 2 * zd);
                let mut dx = vec![T::zero(); c * xd * yd * zd];
                for ci in 0..c {
                    for xo in 0..ux {
                        for yo in 0..uy {
                            let in_row = ((ci * xd + xo / 2) * yd + yo / 2) * zd;
                            let out_row = ((ci * ux + xo) * uy + yo) * uz;
                            for zo in 0..uz {
                                dx[in_row + zo / 2] += g.data[out_row + zo];
                            }
                        }
                    }
                }
                self.acc(x, Tensor::from_vec(&xs, dx));
            }
            Op::Pad3d { x, dims } => {
                let (x, dims) = (*x, *dims);
                let xs = self.nodes[x.0].value.shape.clone();
                let (c, xd, yd, zd) = (xs[0], xs[1], xs[2], xs[3]);
                let [px, py, pz] = dims;
                let mut dx = vec![T::zero(); c * xd * yd * zd];
                for ci in 0..c {
                    for xi in 0..xd {
                        for yi in 0..yd {
                            let src = ((ci * px + xi) * py + yi) * pz;
                            let dst = ((ci * xd + xi) * yd + yi) * zd;
                            dx[dst..dst + zd].copy_from_slice(&g.data[src..src + zd]);
                        }
                    }
                }
                self.acc(x, Tensor::from_vec(&xs, dx));
            }
            Op::Crop3d { x, dims } => {
                let (x, dims) = (*x, *dims);
                let xs = self.nodes[x.0].value.shape.clone();
                let (c, xd, yd, zd) = (xs[0], xs[1], xs[2], xs[3]);
                let [cx, cy, cz] = dims;
                let mut dx = vec![T::zero(); c * xd * yd * zd];
                for ci in 0..c {
                    for xi in 0..cx {
                        for yi in 0..cy {
                            let src = ((ci * cx + xi) * cy + yi) * cz;
                            let dst = ((ci * xd + xi) * yd + yi) * zd;
                            dx[dst..dst + cz].copy_from_slice(&g.data[src..src + cz]);
                        }
                    }
                }
                self.acc(x, Tensor::from_vec(&xs, dx));
            }
            Op::Concat { parts, axis } => {
                let parts = parts.clone();
                let axis = *axis;
                let out_shape = self.nodes[idx].value.shape.clone();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let out_block = out_shape[axis] * inner;
                let mut offset = 0usize;
                for p in parts {
                    let ps = self.nodes[p.0].value.shape.clone();
                    let s = ps[axis];
                    let in_block = s * inner;
                    let mut dp = vec![T::zero(); ps.iter().product()];
                    for o in 0..outer {
                        let src = o * out_block + offset * inner;
                        let dst = o * in_block;
                        dp[dst..dst + in_block].copy_from_slice(&g.data[src..src + in_block]);
                    }
                    offset += s;
                    self.acc(p, Tensor::from_vec(&ps, dp));
                }
            }
            Op::Reshape(x) => {
                let x = *x;
                let shape = self.nodes[x.0].value.shape.clone();
                self.acc(x, Tensor::from_vec(&shape, g.data.clone()));
            }
            Op::ChannelsToRows(x) => {
                let x = *x;
                let xs = self.nodes[x.0].value.shape.clone();
                let c = xs[0];
                let rest: usize = xs[1..].iter().product();
                let mut dx = vec![T::zero(); c * rest];
                for ci in 0..c {
                    for r in 0..rest {
                        dx[ci * rest + r] = g.data[r * c + ci];
                    }
                }
                self.acc(x, Tensor::from_vec(&xs, dx));
            }
            Op::Bce { prob, target } => {
                let prob = *prob;
                let data: Vec<T> = self.nodes[prob.0]
                    .value
                    .data
                    .iter()
                    .zip(target.data.iter())
                    .zip(g.data.iter())
                    .map(|((&p, &y), &gg)| gg * (p - y) / (p * (T::one() - p)))
                    .collect();
                let shape = g.shape.clone();
                self.acc(prob, Tensor { shape, data });
            }
            Op::SampleTrilinear { vol, plan } => {
                let vol = *vol;
                let plan = Arc::clone(plan);
                let vs = self.nodes[vol.0].value.shape.clone();
                let c = vs[0];
                let spatial = plan.spatial;
                let mut dv = vec![T::zero(); c * spatial];
                for (p, fp) in plan.footprints.iter().enumerate() {
                    for ci in 0..c {
                        let gg = g.data[p * c + ci];
                        let base = ci * spatial;
                        for q in 0..8 {
                            dv[base + fp.corners[q]] += fp.weights[q] * gg;
                        }
                    }
                }
                self.acc(vol, Tensor::from_vec(&vs, dv));
            }
            Op::SampleViews { maps, plan } => {
                let maps = maps.clone();
                let plan = Arc::clone(plan);
                let n = plan.n_targets;
                let c = if maps.is_empty() {
                    0
                } else {
                    self.nodes[maps[0].0].value.shape[0]
                };
                for (view, &m) in maps.iter().enumerate() {
                    let ms = self.nodes[m.0].value.shape.clone();
                    let plane = ms[1] * ms[2];
                    let mut dm = vec![T::zero(); ms.iter().product()];
                    for e in &plan.per_view[view] {
                        for ci in 0..c {
                            let gg = g.data[ci * n + e.target as usize] * e.coeff;
                            let base = ci * plane;
                            for q in 0..4 {
                                dm[base + e.tap.idx[q]] += e.tap.w[q] * gg;
                            }
                        }
                    }
                    self.acc(m, Tensor::from_vec(&ms, dm));
                }
            }
        }
    }

    /// Name of a parameter node (set by [`Tape::param`]).
    pub fn name(&self, v: Var) -> Option<&str> {
        self.nodes[v.0].name.as_deref()
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        self.nodes[v.0].trainable
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}
