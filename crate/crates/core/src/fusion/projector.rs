use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::strategy::{CombineMode, FusionStrategy, FusionVariant};
use super::trunk::TapFeatures;
use super::{gelu, gelu_derivative};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Gelu,
    /// Linear projector, used as a control in gradient checks.
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Identity => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_derivative(x),
            Activation::Identity => 1.0,
        }
    }
}

/// Trainable part of the vision-to-language bridge: an optional concat
/// combiner followed by a two-layer perceptron.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorParams {
    /// `2d x d`, present only for concat fusion.
    pub combine: Option<Matrix>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub activation: Activation,
}

impl ProjectorParams {
    /// Seeded uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// biases included, so gradient checks exercise every path.
    pub fn init(
        d: usize,
        d_mid: usize,
        d_out: usize,
        strategy: &FusionStrategy,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let s = 1.0 / (fan_in as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| rng.random_range(-s..s))
        };
        let combine = strategy
            .has_combine_weight()
            .then(|| uniform(2 * d, d, 2 * d));
        let w1 = uniform(d, d_mid, d);
        let b1 = uniform(1, d_mid, d).as_slice().to_vec();
        let w2 = uniform(d_mid, d_out, d_mid);
        let b2 = uniform(1, d_out, d_mid).as_slice().to_vec();
        ProjectorParams {
            combine,
            w1,
            b1,
            w2,
            b2,
            activation: Activation::Gelu,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.cols()
    }

    fn segments(&self) -> Vec<(&'static str, &[f64], usize)> {
        let mut out = Vec::with_capacity(5);
        if let Some(c) = &self.combine {
            out.push(("combine", c.as_slice(), c.cols()));
        }
        out.push(("w1", self.w1.as_slice(), self.w1.cols()));
        out.push(("b1", &self.b1[..], self.b1.len()));
        out.push(("w2", self.w2.as_slice(), self.w2.cols()));
        out.push(("b2", &self.b2[..], self.b2.len()));
        out
    }

    fn segments_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(5);
        if let Some(c) = &mut self.combine {
            out.push(c.as_mut_slice());
        }
        out.push(self.w1.as_mut_slice());
        out.push(&mut self.b1);
        out.push(self.w2.as_mut_slice());
        out.push(&mut self.b2);
        out
    }

    pub fn trainable_len(&self) -> usize {
        self.segments().iter().map(|(_, s, _)| s.len()).sum()
    }

    /// All trainable values in `combine, w1, b1, w2, b2` order.
    pub fn flatten(&self) -> Vec<f64> {
        self.segments()
            .iter()
            .flat_map(|(_, s, _)| s.iter().copied())
            .collect()
    }

    pub fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for segment in self.segments_mut() {
            if index < segment.len() {
                return &mut segment[index];
            }
            index -= segment.len();
        }
        panic!("parameter index out of range");
    }

    /// Human-readable name such as `w1[3,7]` or `b2[5]`.
    pub fn param_name(&self, mut index: usize) -> String {
        for (name, segment, cols) in self.segments() {
            if index < segment.len() {
                return if name.starts_with('b') {
                    format!("{name}[{index}]")
                } else {
                    format!("{name}[{},{}]", index / cols, index % cols)
                };
            }
            index -= segment.len();
        }
        format!("#{index} (out of range)")
    }
}

/// Tap contribution for a strategy: the single tap, or the elementwise mean
/// of several. `None` for last-only.
fn tap_part(features: &TapFeatures, strategy: &FusionStrategy) -> Result<Option<Matrix>> {
    match &strategy.variant {
        FusionVariant::LastOnly => Ok(None),
        FusionVariant::SingleLayer(k) => Ok(Some(features.tap(*k)?.clone())),
        FusionVariant::MultiLayerMean(layers) => {
            let (first, rest) = layers
                .split_first()
                .ok_or_else(|| Error::param("mean over an empty layer set"))?;
            let mut sum = features.tap(*first)?.clone();
            for k in rest {
                sum.add_assign(features.tap(*k)?)?;
            }
            let count = layers.len() as f64;
            Ok(Some(sum.map(|x| x / count)))
        }
    }
}

struct Fused {
    /// Combiner input `[tap | final]` in concat mode.
    concat: Option<Matrix>,
    fused: Matrix,
}

fn fuse_inner(
    features: &TapFeatures,
    strategy: &FusionStrategy,
    params: &ProjectorParams,
) -> Result<Fused> {
    let Some(tap) = tap_part(features, strategy)? else {
        return Ok(Fused {
            concat: None,
            fused: features.final_map.clone(),
        });
    };
    match strategy.combine {
        CombineMode::Additive => Ok(Fused {
            concat: None,
            fused: tap.add(&features.final_map)?,
        }),
        CombineMode::ConcatProject => {
            let weight = params
                .combine
                .as_ref()
                .ok_or_else(|| Error::param("concat fusion needs a combine weight"))?;
            let concat = tap.hconcat(&features.final_map)?;
            let fused = concat.matmul(weight)?;
            Ok(Fused {
                concat: Some(concat),
                fused,
            })
        }
    }
}

/// Merges tapped features with the final map. The result keeps the final
/// map's `N x d` shape for every strategy.
pub fn fuse(
    features: &TapFeatures,
    strategy: &FusionStrategy,
    params: &ProjectorParams,
) -> Result<Matrix> {
    Ok(fuse_inner(features, strategy, params)?.fused)
}

/// Row-wise `act(x W1 + b1) W2 + b2`.
pub fn project(fused: &Matrix, params: &ProjectorParams) -> Result<Matrix> {
    if fused.cols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "projector expects {} input channels, got {}",
            params.input_dim(),
            fused.cols()
        )));
    }
    let mut z = fused.matmul(&params.w1)?;
    z.add_row_vector(&params.b1)?;
    let h = z.map(|x| params.activation.apply(x));
    let mut y = h.matmul(&params.w2)?;
    y.add_row_vector(&params.b2)?;
    Ok(y)
}

/// Gradients of a scalar loss, shaped like [`ProjectorParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorGrads {
    pub combine: Option<Matrix>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl ProjectorGrads {
    /// Same order as [`ProjectorParams::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(c) = &self.combine {
            out.extend_from_slice(c.as_slice());
        }
        out.extend_from_slice(self.w1.as_slice());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.as_slice());
        out.extend_from_slice(&self.b2);
        out
    }
}

/// `sum(y^2)` for `y = project(fuse(features))`.
pub fn squared_norm_loss(
    features: &TapFeatures,
    strategy: &FusionStrategy,
    params: &ProjectorParams,
) -> Result<f64> {
    Ok(project(&fuse(features, strategy, params)?, params)?.squared_norm())
}

/// Loss `sum(y^2)` and its analytic gradient with respect to the combiner
/// and projector. The trunk is frozen, so the features are constants.
pub fn squared_norm_loss_and_grads(
    features: &TapFeatures,
    strategy: &FusionStrategy,
    params: &ProjectorParams,
) -> Result<(f64, ProjectorGrads)> {
    let Fused { concat, fused } = fuse_inner(features, strategy, params)?;
    if fused.cols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "projector expects {} input channels, got {}",
            params.input_dim(),
            fused.cols()
        )));
    }
    let mut z = fused.matmul(&params.w1)?;
    z.add_row_vector(&params.b1)?;
    let h = z.map(|x| params.activation.apply(x));
    let mut y = h.matmul(&params.w2)?;
    y.add_row_vector(&params.b2)?;
    let loss = y.squared_norm();

    let dy = y.scale(2.0);
    let w2 = h.t_matmul(&dy)?;
    let b2 = dy.column_sums();
    let dz = dy
        .matmul_t(&params.w2)?
        .hadamard(&z.map(|x| params.activation.derivative(x)))?;
    let w1 = fused.t_matmul(&dz)?;
    let b1 = dz.column_sums();
    let combine = match (&concat, &params.combine) {
        (Some(cat), Some(_)) => {
            let dfused = dz.matmul_t(&params.w1)?;
            Some(cat.t_matmul(&dfused)?)
        }
        // A combine weight the strategy never reads has zero gradient.
        (None, Some(w)) => Some(Matrix::zeros(w.rows(), w.cols())),
        _ => None,
    };
    Ok((
        loss,
        ProjectorGrads {
            combine,
            w1,
            b1,
            w2,
            b2,
        },
    ))
}
