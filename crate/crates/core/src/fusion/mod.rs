//! Desk-scale ViT trunk with intermediate-layer taps, layer-fusion
//! strategies, and the MLP projector that maps fused visual tokens toward a
//! language model's embedding space.
//!
//! The trunk is frozen. Only the concat combiner and the projector carry
//! analytic gradients, which [`grad_check`] verifies against central finite
//! differences.

mod gradcheck;
mod projector;
mod strategy;
mod trunk;

use std::f64::consts::{FRAC_1_SQRT_2, PI};

pub use gradcheck::{grad_check, relative_error, GradCheckReport, STEP};
pub use projector::{
    fuse, project, squared_norm_loss, squared_norm_loss_and_grads, Activation, ProjectorGrads,
    ProjectorParams,
};
pub use strategy::{resolve_layer, CombineMode, FusionStrategy, FusionVariant, LAYER_SELECTIONS};
pub use trunk::{init_trunk, Block, LayerNorm, Linear, TapFeatures, Trunk, TrunkConfig};

/// Exact GELU, `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}
