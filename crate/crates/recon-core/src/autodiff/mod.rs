//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Forward evaluation is eager: each op records a node on a [`Tape`] as it
//! computes, and [`Tape::backward`] walks the nodes in reverse to populate
//! gradients. The op set is exactly what the reconstruction model needs:
//! dense layers, 2D/3D convolution, the sampling ops that lift image
//! features into scene space, and the loss primitives.

mod adam;
mod checkpoint;
mod conv;
pub mod gradcheck;
mod tape;
#[cfg(test)]
mod tests;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointError};
pub use tape::{trilinear_plan, Tape, TriPlan, Var};

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{layer}: {detail}")]
    ShapeMismatch { layer: String, detail: String },
    #[error("backward called before forward: the tape has no such node")]
    BackwardBeforeForward,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient for parameter '{0}'")]
    NonFiniteGradient(String),
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> T {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// The layer zoo. Hyperparameters are validated against concrete input
/// shapes when the layer is applied to a tape.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    /// `[N, in] x [in, out] (+ bias [out]) -> [N, out]`
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    /// Cross-correlation, zero "same" padding, odd kernel.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    },
    Conv3d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    },
    Relu,
    Sigmoid,
    /// Factor-2 nearest-neighbor upsampling of `[C, X, Y, Z]`.
    NearestUpsample3d,
    /// Concatenation along the leading (channel) axis.
    Concat,
    /// Full mean reduction to a scalar.
    Mean,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Linear { .. } => "linear",
            Self::Conv2d { .. } => "conv2d",
            Self::Conv3d { .. } => "conv3d",
            Self::Relu => "relu",
            Self::Sigmoid => "sigmoid",
            Self::NearestUpsample3d => "nearest_upsample3d",
            Self::Concat => "concat",
            Self::Mean => "mean",
        }
    }

    /// Applies the layer to `inputs`, taking weights from `params`
    /// (`[weight]` or `[weight, bias]` where applicable).
    pub fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        inputs: &[Var],
        params: &[Var],
    ) -> Result<Var, AutodiffError> {
        let one_input = |what: &'static str| -> Result<Var, AutodiffError> {
            inputs.first().copied().ok_or(AutodiffError::ShapeMismatch {
                layer: what.to_string(),
                detail: "expected one input".to_string(),
            })
        };
        match *self {
            Self::Linear { .. } => {
                let x = one_input("linear")?;
                tape.linear(x, params[0], params.get(1).copied())
            }
            Self::Conv2d { stride, .. } => {
                let x = one_input("conv2d")?;
                tape.conv2d(x, params[0], params.get(1).copied(), stride)
            }
            Self::Conv3d { stride, .. } => {
                let x = one_input("conv3d")?;
                tape.conv3d(x, params[0], params.get(1).copied(), stride)
            }
            Self::Relu => Ok(tape.relu(one_input("relu")?)),
            Self::Sigmoid => Ok(tape.sigmoid(one_input("sigmoid")?)),
            Self::NearestUpsample3d => tape.nearest_upsample3d(one_input("nearest_upsample3d")?),
            Self::Concat => tape.concat(inputs, 0),
            Self::Mean => Ok(tape.mean(one_input("mean")?)),
        }
    }
}
