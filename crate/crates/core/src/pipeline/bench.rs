use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{fuse, init_trunk, project, FusionStrategy, ProjectorParams, Trunk};
use crate::sampling::{decode_loop, SamplingConfig};
use crate::tensor::Matrix;

use super::config::PipelineConfig;
use super::probe::probe_patches;
use super::{ensure_dir, write_json, BENCH_FILE};

/// Tiny language-model head: `logits = (embed[last token] + context) * W`.
/// It has no end-of-sequence token, so decoding always runs to the limit.
#[derive(Debug, Clone)]
pub struct ToyLmHead {
    embed: Matrix,
    out: Matrix,
}

impl ToyLmHead {
    pub fn new(vocab: usize, width: usize, seed: u64) -> Result<Self> {
        if vocab < 2 || width == 0 {
            return Err(Error::param(format!(
                "toy head needs vocab >= 2 and width >= 1, got {vocab}x{width}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1A_4EAD);
        let s = 1.0 / (width as f64).sqrt();
        let embed = Matrix::from_fn(vocab, width, |_, _| rng.random_range(-s..s));
        let out = Matrix::from_fn(width, vocab, |_, _| rng.random_range(-s..s));
        Ok(ToyLmHead { embed, out })
    }

    pub fn vocab(&self) -> usize {
        self.out.cols()
    }

    pub fn logits(&self, context: &[f64], prefix: &[usize]) -> Vec<f64> {
        let last = prefix.last().copied().unwrap_or(0);
        let h: Vec<f64> = self
            .embed
            .row(last)
            .iter()
            .zip(context)
            .map(|(a, b)| a + b)
            .collect();
        let mut logits = vec![0.0; self.vocab()];
        for (i, &hi) in h.iter().enumerate() {
            for (l, &w) in logits.iter_mut().zip(self.out.row(i)) {
                *l += hi * w;
            }
        }
        logits
    }
}

/// One timed run, in integer nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchTiming {
    pub preprocessing_ns: u128,
    pub inference_ns: u128,
    pub total_ns: u128,
    pub tokens: usize,
}

/// Preprocessing is patch embedding, the trunk, fusion, and projection;
/// inference is the decode loop conditioned on the pooled projector output.
/// All three spans come from the same three clock readings.
pub fn bench_once(
    trunk: &Trunk,
    strategy: &FusionStrategy,
    params: &ProjectorParams,
    head: &ToyLmHead,
    patches: &Matrix,
    sampling: &SamplingConfig,
) -> Result<BenchTiming> {
    let t0 = Instant::now();
    let features = trunk.forward_with_taps(&trunk.embed(patches)?, &strategy.required_taps())?;
    let visual = project(&fuse(&features, strategy, params)?, params)?;
    let rows = visual.rows() as f64;
    let context: Vec<f64> = visual.column_sums().iter().map(|s| s / rows).collect();
    let t1 = Instant::now();
    let tokens = decode_loop(|prefix| head.logits(&context, prefix), None, sampling)?;
    let t2 = Instant::now();
    Ok(BenchTiming {
        preprocessing_ns: (t1 - t0).as_nanos(),
        inference_ns: (t2 - t1).as_nanos(),
        total_ns: (t2 - t0).as_nanos(),
        tokens: tokens.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub runs: usize,
    pub warmups: usize,
    pub sampling: SamplingConfig,
    pub strategy: String,
    pub vocab: usize,
    pub preprocessing_s: f64,
    pub inference_s: f64,
    pub total_s: f64,
    pub timings: Vec<BenchTiming>,
    pub table: String,
}

impl BenchReport {
    fn render_table(&mut self) {
        let s = &self.sampling;
        let mut t = String::new();
        writeln!(
            t,
            "# runs={} warmups={} max_new_tokens={} temperature={} top_k={} top_p={}",
            self.runs, self.warmups, s.max_new_tokens, s.temperature, s.top_k, s.top_p
        )
        .unwrap();
        writeln!(
            t,
            "| Version | Preprocessing Latency (s) | Inference Latency (s) | Total Latency (s) |"
        )
        .unwrap();
        writeln!(t, "|---|---|---|---|").unwrap();
        writeln!(
            t,
            "| {} | {:.6} | {:.6} | {:.6} |",
            self.strategy, self.preprocessing_s, self.inference_s, self.total_s
        )
        .unwrap();
        self.table = t;
    }
}

fn mean_seconds(timings: &[BenchTiming], f: impl Fn(&BenchTiming) -> u128) -> f64 {
    let sum: u128 = timings.iter().map(f).sum();
    sum as f64 / timings.len() as f64 / 1e9
}

/// Mean latencies over `bench_runs` runs after `bench_warmups` discarded ones.
pub fn cmd_bench(config: &PipelineConfig) -> Result<BenchReport> {
    if config.bench_runs == 0 {
        return Err(Error::Config("bench_runs must be >= 1".into()));
    }
    let trunk = init_trunk(config.trunk)?;
    let strategy = FusionStrategy::parse(&config.fusion, trunk.depth())?;
    let params = ProjectorParams::init(
        config.trunk.hidden_dim,
        config.projector_hidden,
        config.projector_out,
        &strategy,
        config.seed,
    );
    let head = ToyLmHead::new(config.bench_vocab, config.projector_out, config.seed)?;
    let patches = probe_patches(&config.trunk, config.seed);

    for _ in 0..config.bench_warmups {
        bench_once(
            &trunk,
            &strategy,
            &params,
            &head,
            &patches,
            &config.sampling,
        )?;
    }
    let timings = (0..config.bench_runs)
        .map(|_| {
            bench_once(
                &trunk,
                &strategy,
                &params,
                &head,
                &patches,
                &config.sampling,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = BenchReport {
        runs: config.bench_runs,
        warmups: config.bench_warmups,
        sampling: config.sampling,
        strategy: strategy.to_string(),
        vocab: head.vocab(),
        preprocessing_s: mean_seconds(&timings, |t| t.preprocessing_ns),
        inference_s: mean_seconds(&timings, |t| t.inference_ns),
        total_s: mean_seconds(&timings, |t| t.total_ns),
        timings,
        table: String::new(),
    };
    report.render_table();
    ensure_dir(&config.out)?;
    write_json(&report, &config.out.join(BENCH_FILE))?;
    Ok(report)
}
