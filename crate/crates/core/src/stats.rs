//! Normal fit of a loss population and the upper-tail σ-rule filter.
//!
//! A sample is an outlier when its loss is strictly greater than
//! `mu + n * sigma`, with `mu` and `sigma` the mean and population standard
//! deviation of the losses being filtered. Only the upper tail is removed.

use std::collections::{HashMap, HashSet};
use std::f64::consts::{PI, SQRT_2};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::{LossRecord, SampleRecord};

pub const HISTOGRAM_BINS: usize = 50;

/// Recommended σ-multiplier range; values outside it are allowed but warned about.
pub const RECOMMENDED_N: std::ops::RangeInclusive<f64> = 1.0..=3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub count: usize,
    pub mu: f64,
    pub sigma: f64,
    pub min_loss: f64,
    pub max_loss: f64,
}

/// Neumaier-compensated running sum.
#[derive(Default, Clone, Copy)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn total(self) -> f64 {
        self.sum + self.carry
    }
}

fn fit_labeled(values: &[f64], label: impl Fn(usize) -> String) -> Result<LossStats> {
    let mut sum = CompensatedSum::default();
    let mut min_loss = f64::INFINITY;
    let mut max_loss = f64::NEG_INFINITY;
    for (i, &x) in values.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::NonFinite(label(i)));
        }
        sum.add(x);
        min_loss = min_loss.min(x);
        max_loss = max_loss.max(x);
    }
    let count = values.len();
    if count < 2 {
        return Err(Error::InsufficientData(count));
    }
    if min_loss == max_loss {
        return Ok(LossStats {
            count,
            mu: min_loss,
            sigma: 0.0,
            min_loss,
            max_loss,
        });
    }

    let mu = (sum.total() / count as f64).clamp(min_loss, max_loss);
    let mut squares = CompensatedSum::default();
    for &x in values {
        let d = x - mu;
        squares.add(d * d);
    }
    let sigma = (squares.total() / count as f64).sqrt();
    Ok(LossStats {
        count,
        mu,
        sigma,
        min_loss,
        max_loss,
    })
}

/// Fits mean and population standard deviation (divide by N).
///
/// Sums are compensated and taken in input order, so the result is
/// reproducible bit-for-bit and permutation-invariant to rounding level.
pub fn fit_normal(losses: &[f64]) -> Result<LossStats> {
    fit_labeled(losses, |i| format!("index {i}"))
}

/// Normal density with mean `mu` and standard deviation `sigma`.
pub fn normal_pdf(x: f64, mu: f64, sigma: f64) -> Result<f64> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::param(format!("sigma must be > 0, got {sigma}")));
    }
    let z = (x - mu) / sigma;
    Ok((-0.5 * z * z).exp() / (2.0 * PI * sigma * sigma).sqrt())
}

/// `mu + n * sigma`.
pub fn outlier_threshold(stats: &LossStats, n: f64) -> Result<f64> {
    validate_n(n)?;
    Ok(stats.mu + n * stats.sigma)
}

/// Strict comparison: a loss exactly at the threshold is kept.
pub fn is_outlier(loss: f64, threshold: f64) -> bool {
    loss > threshold
}

/// Fraction of an exactly normal population at or below `mu + n * sigma`,
/// i.e. the standard normal CDF at `n`.
pub fn expected_retention(n: f64) -> f64 {
    0.5 * libm::erfc(-n / SQRT_2)
}

fn validate_n(n: f64) -> Result<()> {
    if n.is_finite() && n > 0.0 {
        Ok(())
    } else {
        Err(Error::param(format!(
            "sigma multiplier n must be finite and > 0, got {n}"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub n: f64,
    pub scorer_id: String,
}

impl FilterConfig {
    pub fn new(n: f64, scorer_id: impl Into<String>) -> Result<Self> {
        validate_n(n)?;
        Ok(FilterConfig {
            n,
            scorer_id: scorer_id.into(),
        })
    }

    pub fn warnings(&self) -> Vec<String> {
        if RECOMMENDED_N.contains(&self.n) {
            Vec::new()
        } else {
            vec![format!(
                "sigma multiplier n = {} is outside the recommended range [1, 3]",
                self.n
            )]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_lower: f64,
    pub count: usize,
}

/// Equal-width histogram over `[min, max]`. A zero-width range yields a
/// single bin holding every value.
pub fn histogram(values: &[f64], min: f64, max: f64, bins: usize) -> Vec<HistogramBin> {
    let span = max - min;
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    if span.is_nan() || span <= 0.0 {
        return vec![HistogramBin {
            bin_lower: min,
            count: values.len(),
        }];
    }
    let width = span / bins as f64;
    let mut out: Vec<_> = (0..bins)
        .map(|i| HistogramBin {
            bin_lower: min + i as f64 * width,
            count: 0,
        })
        .collect();
    for &x in values {
        let idx = (((x - min) / width).floor() as usize).min(bins - 1);
        out[idx].count += 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub scorer_id: String,
    pub n: f64,
    /// Always `"population"`: sigma divides by N.
    pub std_convention: String,
    pub stats: LossStats,
    pub threshold: f64,
    pub kept_count: usize,
    pub discarded_count: usize,
    pub discarded_ids: Vec<String>,
    pub histogram: Vec<HistogramBin>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl FilterReport {
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("bin_lower,count\n");
        for bin in &self.histogram {
            writeln!(out, "{},{}", bin.bin_lower, bin.count).unwrap();
        }
        out
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("report always serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn write_histogram_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.histogram_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Stats, threshold, and the outlier mask for a bare list of losses.
#[derive(Debug, Clone)]
pub struct Partition {
    pub stats: LossStats,
    pub threshold: f64,
    pub outlier: Vec<bool>,
}

impl Partition {
    pub fn kept_count(&self) -> usize {
        self.outlier.iter().filter(|&&o| !o).count()
    }
}

pub fn partition(losses: &[f64], n: f64) -> Result<Partition> {
    let stats = fit_normal(losses)?;
    let threshold = outlier_threshold(&stats, n)?;
    let outlier = losses.iter().map(|&x| is_outlier(x, threshold)).collect();
    Ok(Partition {
        stats,
        threshold,
        outlier,
    })
}

/// Fits the loss distribution of `samples` and drops the upper-tail outliers.
///
/// Only loss records whose `scorer_id` matches the config are considered,
/// and each sample needs exactly one of them. Kept samples preserve input
/// order.
pub fn filter_dataset(
    samples: &[SampleRecord],
    losses: &[LossRecord],
    config: &FilterConfig,
) -> Result<(Vec<SampleRecord>, FilterReport)> {
    validate_n(config.n)?;
    let sample_ids: HashSet<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    let mut by_id: HashMap<&str, f64> = HashMap::with_capacity(samples.len());
    for record in losses.iter().filter(|r| r.scorer_id == config.scorer_id) {
        record.validate()?;
        if !sample_ids.contains(record.sample_id.as_str()) {
            return Err(Error::UnknownLoss(record.sample_id.clone()));
        }
        if by_id
            .insert(record.sample_id.as_str(), record.loss)
            .is_some()
        {
            return Err(Error::DuplicateLoss(record.sample_id.clone()));
        }
    }
    let values = samples
        .iter()
        .map(|s| {
            by_id
                .get(s.id.as_str())
                .copied()
                .ok_or_else(|| Error::MissingLoss(s.id.clone()))
        })
        .collect::<Result<Vec<f64>>>()?;

    let stats = fit_labeled(&values, |i| samples[i].id.clone())?;
    let threshold = outlier_threshold(&stats, config.n)?;

    let mut kept = Vec::with_capacity(samples.len());
    let mut discarded_ids = Vec::new();
    for (sample, &loss) in samples.iter().zip(&values) {
        if is_outlier(loss, threshold) {
            discarded_ids.push(sample.id.clone());
        } else {
            kept.push(sample.clone());
        }
    }

    let report = FilterReport {
        scorer_id: config.scorer_id.clone(),
        n: config.n,
        std_convention: "population".to_string(),
        stats,
        threshold,
        kept_count: kept.len(),
        discarded_count: discarded_ids.len(),
        discarded_ids,
        histogram: histogram(&values, stats.min_loss, stats.max_loss, HISTOGRAM_BINS),
        warnings: config.warnings(),
    };
    Ok((kept, report))
}
