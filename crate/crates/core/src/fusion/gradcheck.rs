use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::projector::{squared_norm_loss, squared_norm_loss_and_grads, ProjectorParams};
use super::strategy::FusionStrategy;
use super::trunk::TapFeatures;

/// Relative step for central differences: `h = STEP * max(1, |theta|)`.
pub const STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: f64,
    pub parameters: usize,
    pub max_relative_error: f64,
    pub worst_parameter: String,
}

/// `|a - b| / max(1, |a|, |b|)`: relative for large gradients, absolute
/// below unit magnitude where finite differences have no relative accuracy.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares the analytic combiner/projector gradient of `sum(y^2)` with
/// central finite differences over every trainable parameter.
pub fn grad_check(
    strategy: &FusionStrategy,
    params: &ProjectorParams,
    features: &TapFeatures,
) -> Result<GradCheckReport> {
    let (loss, grads) = squared_norm_loss_and_grads(features, strategy, params)?;
    let analytic = grads.flatten();
    if analytic.len() != params.trainable_len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} parameters",
            analytic.len(),
            params.trainable_len()
        )));
    }
    if let Some(i) = analytic.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(params.param_name(i)));
    }

    let numeric: Vec<f64> = (0..analytic.len())
        .into_par_iter()
        .map_init(
            || params.clone(),
            |probe, i| -> Result<f64> {
                let theta = *probe.param_mut(i);
                let h = STEP * theta.abs().max(1.0);
                *probe.param_mut(i) = theta + h;
                let plus = squared_norm_loss(features, strategy, probe)?;
                *probe.param_mut(i) = theta - h;
                let minus = squared_norm_loss(features, strategy, probe)?;
                *probe.param_mut(i) = theta;
                // Divide by the step actually taken after rounding.
                Ok((plus - minus) / ((theta + h) - (theta - h)))
            },
        )
        .collect::<Result<_>>()?;

    let (worst, max_relative_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold(
            (0, 0.0),
            |best, (i, e)| if e > best.1 { (i, e) } else { best },
        );

    Ok(GradCheckReport {
        loss,
        parameters: analytic.len(),
        max_relative_error,
        worst_parameter: params.param_name(worst),
    })
}
