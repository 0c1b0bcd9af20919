use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{expected_retention, partition, LossStats};

use super::config::PipelineConfig;
use super::{ensure_dir, write_json, SYNTH_FILE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthReport {
    pub count: usize,
    pub contamination_rate: f64,
    pub shift_sigmas: f64,
    pub n: f64,
    pub seed: u64,
    pub planted: usize,
    pub stats: LossStats,
    pub threshold: f64,
    pub kept_count: usize,
    /// Fraction of all samples kept.
    pub retention: f64,
    /// Fraction of clean samples kept.
    pub clean_retention: f64,
    /// Fraction of planted outliers discarded; absent when nothing was planted.
    pub planted_recall: Option<f64>,
    pub expected_retention: f64,
    /// The generated losses, in draw order, with their planted flags.
    #[serde(skip)]
    pub losses: Vec<f64>,
    #[serde(skip)]
    pub planted_mask: Vec<bool>,
}

/// Draws `count` losses: clean ones from `N(mu, sigma^2)` and
/// `round(count * rate)` planted ones at exactly `mu + shift * sigma`, in a
/// seeded random order, then filters at `n`.
pub fn run_synth(
    count: usize,
    contamination_rate: f64,
    shift_sigmas: f64,
    n: f64,
    mu: f64,
    sigma: f64,
    seed: u64,
) -> Result<SynthReport> {
    if !(0.0..0.5).contains(&contamination_rate) {
        return Err(Error::param(format!(
            "contamination_rate must be in [0, 0.5), got {contamination_rate}"
        )));
    }
    if !(shift_sigmas.is_finite() && shift_sigmas >= 0.0) {
        return Err(Error::param(format!(
            "shift must be >= 0, got {shift_sigmas}"
        )));
    }
    if count < 2 {
        return Err(Error::InsufficientData(count));
    }
    if !(sigma.is_finite() && sigma > 0.0 && mu.is_finite()) {
        return Err(Error::param(format!(
            "need finite mu and sigma > 0, got N({mu}, {sigma})"
        )));
    }

    let planted = (count as f64 * contamination_rate).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut planted_mask: Vec<bool> = (0..count).map(|i| i < planted).collect();
    planted_mask.shuffle(&mut rng);
    let normal = Normal::new(mu, sigma).map_err(|e| Error::param(e.to_string()))?;
    let outlier_value = mu + shift_sigmas * sigma;
    let losses: Vec<f64> = planted_mask
        .iter()
        .map(|&p| {
            if p {
                outlier_value
            } else {
                normal.sample(&mut rng)
            }
        })
        .collect();

    let part = partition(&losses, n)?;
    let mut caught = 0;
    let mut clean_kept = 0;
    for (&p, &out) in planted_mask.iter().zip(&part.outlier) {
        match (p, out) {
            (true, true) => caught += 1,
            (false, false) => clean_kept += 1,
            _ => {}
        }
    }
    let kept_count = part.kept_count();
    Ok(SynthReport {
        count,
        contamination_rate,
        shift_sigmas,
        n,
        seed,
        planted,
        stats: part.stats,
        threshold: part.threshold,
        kept_count,
        retention: kept_count as f64 / count as f64,
        clean_retention: clean_kept as f64 / (count - planted) as f64,
        planted_recall: (planted > 0).then(|| caught as f64 / planted as f64),
        expected_retention: expected_retention(n),
        losses,
        planted_mask,
    })
}

pub fn cmd_synth(config: &PipelineConfig) -> Result<SynthReport> {
    let report = run_synth(
        config.synth_count,
        config.synth_contamination,
        config.synth_shift_sigmas,
        config.n,
        config.synth_mu,
        config.synth_sigma,
        config.seed,
    )?;
    ensure_dir(&config.out)?;
    write_json(&report, &config.out.join(SYNTH_FILE))?;
    Ok(report)
}
