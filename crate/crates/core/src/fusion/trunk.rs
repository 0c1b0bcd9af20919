use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::gelu;

const LAYER_NORM_EPS: f64 = 1e-6;
const FEEDFORWARD_EXPANSION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrunkConfig {
    pub depth: usize,
    pub hidden_dim: usize,
    pub num_patches: usize,
    pub heads: usize,
    /// Width of one raw (flattened) patch fed to the patch embedding.
    pub patch_dim: usize,
    pub seed: u64,
}

impl Default for TrunkConfig {
    fn default() -> Self {
        TrunkConfig {
            depth: 8,
            hidden_dim: 32,
            num_patches: 16,
            heads: 4,
            patch_dim: 48,
            seed: 0,
        }
    }
}

impl TrunkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::param(format!(
                "depth must be >= 2, got {}",
                self.depth
            )));
        }
        if self.hidden_dim < 4 {
            return Err(Error::param(format!(
                "hidden_dim must be >= 4, got {}",
                self.hidden_dim
            )));
        }
        if self.num_patches == 0 || self.patch_dim == 0 {
            return Err(Error::param("num_patches and patch_dim must be positive"));
        }
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::param(format!(
                "heads ({}) must divide hidden_dim ({})",
                self.heads, self.hidden_dim
            )));
        }
        Ok(())
    }
}

/// Affine map applied row-wise: `x * weight + bias`, weight is `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, scale: f64) -> Self {
        Linear {
            weight: Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-scale..scale)),
            bias: vec![0.0; fan_out],
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul(&self.weight)?;
        y.add_row_vector(&self.bias)?;
        Ok(y)
    }

    fn zero(&mut self) {
        self.weight.as_mut_slice().fill(0.0);
        self.bias.fill(0.0);
    }

    fn extend_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.weight.as_slice());
        out.extend_from_slice(&self.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNorm {
    fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        let d = x.cols() as f64;
        for r in 0..x.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for ((v, g), b) in row.iter_mut().zip(&self.gamma).zip(&self.beta) {
                *v = (*v - mean) * inv * g + b;
            }
        }
        out
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + ff(ln2(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub attn_out: Linear,
    pub ln2: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    heads: usize,
}

impl Block {
    fn init(rng: &mut ChaCha8Rng, d: usize, heads: usize, scale: f64) -> Self {
        let hidden = FEEDFORWARD_EXPANSION * d;
        Block {
            ln1: LayerNorm::new(d),
            qkv: Linear::init(rng, d, 3 * d, scale),
            attn_out: Linear::init(rng, d, d, scale),
            ln2: LayerNorm::new(d),
            ff_in: Linear::init(rng, d, hidden, scale),
            ff_out: Linear::init(rng, hidden, d, scale),
            heads,
        }
    }

    fn attention(&self, x: &Matrix) -> Result<Matrix> {
        let n = x.rows();
        let d = x.cols();
        let dh = d / self.heads;
        let qkv = self.qkv.forward(x)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut context = Matrix::zeros(n, d);
        let mut weights = vec![0.0; n];
        for h in 0..self.heads {
            let (q_off, k_off, v_off) = (h * dh, d + h * dh, 2 * d + h * dh);
            for i in 0..n {
                let q = &qkv.row(i)[q_off..q_off + dh];
                for (j, w) in weights.iter_mut().enumerate() {
                    let k = &qkv.row(j)[k_off..k_off + dh];
                    *w = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for w in weights.iter_mut() {
                    *w = (*w - max).exp();
                    total += *w;
                }
                let out = &mut context.row_mut(i)[h * dh..(h + 1) * dh];
                for (j, w) in weights.iter().enumerate() {
                    let v = &qkv.row(j)[v_off..v_off + dh];
                    for (o, x) in out.iter_mut().zip(v) {
                        *o += w / total * x;
                    }
                }
            }
        }
        self.attn_out.forward(&context)
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut x = x.add(&self.attention(&self.ln1.forward(x))?)?;
        let hidden = self.ff_in.forward(&self.ln2.forward(&x))?.map(gelu);
        x.add_assign(&self.ff_out.forward(&hidden)?)?;
        Ok(x)
    }

    fn extend_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.ln1.gamma);
        out.extend_from_slice(&self.ln1.beta);
        self.qkv.extend_params(out);
        self.attn_out.extend_params(out);
        out.extend_from_slice(&self.ln2.gamma);
        out.extend_from_slice(&self.ln2.beta);
        self.ff_in.extend_params(out);
        self.ff_out.extend_params(out);
    }
}

/// Feature maps captured during one forward pass. Layer indices are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct TapFeatures {
    pub taps: BTreeMap<usize, Matrix>,
    pub final_map: Matrix,
}

impl TapFeatures {
    pub fn tap(&self, layer: usize) -> Result<&Matrix> {
        self.taps
            .get(&layer)
            .ok_or_else(|| Error::param(format!("layer {layer} was not tapped")))
    }
}

/// Frozen ViT encoder: patch embedding followed by `depth` pre-norm blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Trunk {
    config: TrunkConfig,
    pub patch_embed: Linear,
    pub blocks: Vec<Block>,
}

/// Uniform in `[-1/sqrt(d), 1/sqrt(d))` for every weight matrix; biases and
/// layer-norm shifts start at zero, layer-norm gains at one.
pub fn init_trunk(config: TrunkConfig) -> Result<Trunk> {
    config.validate()?;
    let d = config.hidden_dim;
    let scale = 1.0 / (d as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let patch_embed = Linear::init(&mut rng, config.patch_dim, d, scale);
    let blocks = (0..config.depth)
        .map(|_| Block::init(&mut rng, d, config.heads, scale))
        .collect();
    Ok(Trunk {
        config,
        patch_embed,
        blocks,
    })
}

impl Trunk {
    pub fn config(&self) -> &TrunkConfig {
        &self.config
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// All parameters flattened in a fixed order.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.patch_embed.extend_params(&mut out);
        for block in &self.blocks {
            block.extend_params(&mut out);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().len()
    }

    /// Zeroes the output projections of every residual branch, turning each
    /// block into the identity.
    pub fn zero_residual_outputs(&mut self) {
        for block in &mut self.blocks {
            block.attn_out.zero();
            block.ff_out.zero();
        }
    }

    /// Maps raw `num_patches x patch_dim` patches to `num_patches x hidden_dim`.
    pub fn embed(&self, patches: &Matrix) -> Result<Matrix> {
        if patches.shape() != (self.config.num_patches, self.config.patch_dim) {
            return Err(Error::Shape(format!(
                "patches {:?}, expected {:?}",
                patches.shape(),
                (self.config.num_patches, self.config.patch_dim)
            )));
        }
        self.patch_embed.forward(patches)
    }

    /// Runs every block over patch embeddings and records the post-block
    /// output of each requested layer. Taps are copies; they never feed back
    /// into the computation.
    pub fn forward_with_taps(
        &self,
        embeddings: &Matrix,
        tap_set: &BTreeSet<usize>,
    ) -> Result<TapFeatures> {
        let expected = (self.config.num_patches, self.config.hidden_dim);
        if embeddings.shape() != expected {
            return Err(Error::Shape(format!(
                "embeddings {:?}, expected {expected:?}",
                embeddings.shape()
            )));
        }
        if let Some(&bad) = tap_set.iter().find(|&&k| k == 0 || k > self.depth()) {
            return Err(Error::param(format!(
                "tap layer {bad} outside [1, {}]",
                self.depth()
            )));
        }
        let mut taps = BTreeMap::new();
        let mut x = embeddings.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x)?;
            if tap_set.contains(&(i + 1)) {
                taps.insert(i + 1, x.clone());
            }
        }
        Ok(TapFeatures { taps, final_map: x })
    }

    pub fn forward(&self, embeddings: &Matrix) -> Result<Matrix> {
        Ok(self
            .forward_with_taps(embeddings, &BTreeSet::new())?
            .final_map)
    }
}
