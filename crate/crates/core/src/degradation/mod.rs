//! Degradation operators and seeded generators of training pairs.

mod dataset;
mod kernel;
mod scene;
mod synth;

pub use dataset::{synth_dataset, DatasetKind, DatasetSpec};
pub use kernel::{box_kernel, gaussian_kernel, motion_kernel, perturb_kernel, Kernel};
pub use scene::synth_scene;
pub use synth::{
    composite_rain, regenerate, synth_deconv_pair, synth_denoise_pair, synth_multi_degrade,
    synth_rain_pair, synth_rain_streaks, GeneratorParams, RainMode, RainParams, SampleMeta,
    TrainingSample, JPEG_CODEC,
};

use crate::grid::{conv2_same, conv2_same_transpose, Boundary, Image};

/// The known part `A` of the degradation `y = A x + g(x) + n`.
#[derive(Clone, Debug, PartialEq)]
pub enum DegradationOp {
    Identity,
    Blur(Kernel),
}

impl DegradationOp {
    pub fn blur(kernel: Kernel) -> Self {
        DegradationOp::Blur(kernel)
    }

    pub fn kernel(&self) -> Option<&Kernel> {
        match self {
            DegradationOp::Identity => None,
            DegradationOp::Blur(k) => Some(k),
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, DegradationOp::Identity)
    }
}

/// `A x`: convolution with the kernel under symmetric padding.
pub fn apply(op: &DegradationOp, x: &Image) -> Image {
    match op {
        DegradationOp::Identity => x.clone(),
        DegradationOp::Blur(k) => conv2_same(x, k.filter(), Boundary::Symmetric),
    }
}

/// `A^T z` as used inside the inference step: correlation with the kernel,
/// i.e. convolution with its 180-degree rotation, under the same padding.
pub fn apply_adjoint(op: &DegradationOp, z: &Image) -> Image {
    match op {
        DegradationOp::Identity => z.clone(),
        DegradationOp::Blur(k) => conv2_same(z, k.flipped(), Boundary::Symmetric),
    }
}

/// Exact transpose of [`apply`] (differs from [`apply_adjoint`] only near the border).
pub fn apply_transpose(op: &DegradationOp, g: &Image) -> Image {
    match op {
        DegradationOp::Identity => g.clone(),
        DegradationOp::Blur(k) => conv2_same_transpose(g, k.filter(), Boundary::Symmetric),
    }
}

/// Exact transpose of [`apply_adjoint`].
pub fn apply_adjoint_transpose(op: &DegradationOp, g: &Image) -> Image {
    match op {
        DegradationOp::Identity => g.clone(),
        DegradationOp::Blur(k) => conv2_same_transpose(g, k.flipped(), Boundary::Symmetric),
    }
}

/// Convolution of `x` with an arbitrary filter under zero padding; used for
/// adjoint checks on zero-padded interiors.
#[cfg(test)]
pub(crate) fn blur_zero_padded(x: &Image, f: &crate::grid::Filter) -> Image {
    conv2_same(x, f, Boundary::Zero)
}
