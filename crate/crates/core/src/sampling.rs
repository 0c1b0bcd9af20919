//! Temperature, top-k, and nucleus (top-p) sampling with a replayable rng.
//!
//! `sample_token` applies temperature, then top-k, then softmax, then top-p,
//! then a categorical draw. Ties are always broken toward the lowest index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_k: usize,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    /// Latency-benchmark conditions: T = 0.1, top-k 1, top-p 0.001, 512 new tokens.
    fn default() -> Self {
        SamplingConfig {
            temperature: 0.1,
            top_k: 1,
            top_p: 0.001,
            max_new_tokens: 512,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::param(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.top_k == 0 {
            return Err(Error::param("top_k must be >= 1"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::param(format!(
                "top_p must be in (0, 1], got {}",
                self.top_p
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::param("max_new_tokens must be >= 1"));
        }
        Ok(())
    }
}

/// Counter-based generator state: a ChaCha8 key (`seed`), a stream id, and a
/// word position. Drawing returns the advanced state instead of mutating, so
/// any draw can be replayed from a saved state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            stream: 0,
            word_pos: 0,
        }
    }

    /// Independent child state on a different stream of the same key.
    pub fn split(&self, index: u64) -> Self {
        RngState {
            seed: self.seed,
            stream: self
                .stream
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(index.wrapping_add(1)),
            word_pos: 0,
        }
    }

    fn generator(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    /// Uniform draw in `[0, 1)`.
    pub fn next_f64(self) -> (f64, RngState) {
        let mut rng = self.generator();
        let u = rng.random::<f64>();
        (
            u,
            RngState {
                word_pos: rng.get_word_pos(),
                ..self
            },
        )
    }
}

fn check_finite(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::param("empty logit vector"));
    }
    match logits.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("logit {i}"))),
        None => Ok(()),
    }
}

/// Lowest index among the maximal entries.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Indices sorted by descending value, lowest index first among ties.
fn ranked(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

pub fn apply_temperature(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::param(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    check_finite(logits)?;
    Ok(logits.iter().map(|x| x / temperature).collect())
}

/// Keeps the `k` largest logits and sets the rest to negative infinity.
pub fn top_k_filter(logits: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 || k > logits.len() {
        return Err(Error::param(format!(
            "top_k = {k} outside [1, {}]",
            logits.len()
        )));
    }
    let mut out = vec![f64::NEG_INFINITY; logits.len()];
    for &i in ranked(logits).iter().take(k) {
        out[i] = logits[i];
    }
    Ok(out)
}

/// Numerically stable softmax; negative-infinity logits get probability 0.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Keeps the shortest descending-probability prefix whose mass reaches `p`
/// (at least one token) and renormalizes it. Everything else becomes 0.
pub fn top_p_filter(probs: &[f64], p: f64) -> Result<Vec<f64>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::param(format!("top_p must be in (0, 1], got {p}")));
    }
    if probs.iter().any(|&q| !(q >= 0.0 && q.is_finite())) {
        return Err(Error::param(
            "probabilities must be finite and non-negative",
        ));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::param(format!("probabilities sum to {total}, not 1")));
    }

    let mut keep = Vec::new();
    let mut mass = 0.0;
    for i in ranked(probs) {
        if probs[i] == 0.0 || (mass >= p && !keep.is_empty()) {
            break;
        }
        mass += probs[i];
        keep.push(i);
    }
    let mut out = vec![0.0; probs.len()];
    for i in keep {
        out[i] = probs[i] / mass;
    }
    Ok(out)
}

/// Draws one token. With a single surviving candidate (e.g. `top_k = 1`) no
/// randomness is consumed and the state comes back unchanged.
pub fn sample_token(
    logits: &[f64],
    config: &SamplingConfig,
    rng: RngState,
) -> Result<(usize, RngState)> {
    let scaled = apply_temperature(logits, config.temperature)?;
    let filtered = top_k_filter(&scaled, config.top_k.min(logits.len()))?;
    let nucleus = top_p_filter(&softmax(&filtered), config.top_p)?;

    let candidates: Vec<usize> = (0..nucleus.len()).filter(|&i| nucleus[i] > 0.0).collect();
    if let [only] = candidates[..] {
        return Ok((only, rng));
    }
    let (u, next) = rng.next_f64();
    let mut cumulative = 0.0;
    for &i in &candidates {
        cumulative += nucleus[i];
        if u < cumulative {
            return Ok((i, next));
        }
    }
    // Rounding left the cumulative mass just below 1.
    Ok((*candidates.last().expect("nucleus is never empty"), next))
}

/// Autoregressive decoding: feeds the generated prefix to `lm_head` until it
/// produces `eos` (which is kept in the output) or `max_new_tokens` is hit.
pub fn decode_loop<F>(
    mut lm_head: F,
    eos: Option<usize>,
    config: &SamplingConfig,
) -> Result<Vec<usize>>
where
    F: FnMut(&[usize]) -> Vec<f64>,
{
    config.validate()?;
    let mut rng = RngState::new(config.seed);
    let mut tokens = Vec::with_capacity(config.max_new_tokens.min(4096));
    while tokens.len() < config.max_new_tokens {
        let logits = lm_head(&tokens);
        let (token, next) = sample_token(&logits, config, rng)?;
        rng = next;
        tokens.push(token);
        if Some(token) == eos {
            break;
        }
    }
    Ok(tokens)
}
