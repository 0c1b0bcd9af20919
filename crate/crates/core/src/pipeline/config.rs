//! Flat `key = value` pipeline configuration.
//!
//! ```text
//! # comments start with '#'
//! input = toy_samples.jsonl
//! scorer = toy-bigram-v1        # or external:<losses path>
//! n = 2
//! fusion = layer:middle combine=concat
//! temperature = 0.1
//! ```
//!
//! Relative paths are resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::TrunkConfig;
use crate::sampling::SamplingConfig;
use crate::scorer::TOY_SCORER_ID;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ScorerSelection {
    ToyBigram,
    External(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub input: Option<PathBuf>,
    pub scorer: ScorerSelection,
    /// Corpus for the toy scorer; defaults to the input samples.
    pub scorer_corpus: Option<PathBuf>,
    /// Losses consumed by `filter`; defaults to `<out>/losses.jsonl`.
    pub losses: Option<PathBuf>,
    /// Which scorer's records to filter on; inferred from the losses file if unset.
    pub scorer_id: Option<String>,
    pub n: f64,
    pub out: PathBuf,
    pub manifest_name: String,
    pub sampling: SamplingConfig,
    pub fusion: String,
    pub trunk: TrunkConfig,
    pub projector_hidden: usize,
    pub projector_out: usize,
    pub seed: u64,
    pub synth_count: usize,
    pub synth_contamination: f64,
    pub synth_shift_sigmas: f64,
    pub synth_mu: f64,
    pub synth_sigma: f64,
    pub bench_runs: usize,
    pub bench_warmups: usize,
    pub bench_vocab: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            input: None,
            scorer: ScorerSelection::ToyBigram,
            scorer_corpus: None,
            losses: None,
            scorer_id: None,
            n: 2.0,
            out: PathBuf::from("beecurate-out"),
            manifest_name: "filtered".to_string(),
            sampling: SamplingConfig::default(),
            fusion: "layer:middle combine=concat".to_string(),
            trunk: TrunkConfig::default(),
            projector_hidden: 64,
            projector_out: 32,
            seed: 0,
            synth_count: 100_000,
            synth_contamination: 0.01,
            synth_shift_sigmas: 8.0,
            synth_mu: 1.0,
            synth_sigma: 0.25,
            bench_runs: 10,
            bench_warmups: 3,
            bench_vocab: 512,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("line {line}: bad value for `{key}`: {e}")))
}

impl PipelineConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut config = PipelineConfig::default();
        let resolve = |value: &str| base_dir.join(value);
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split_once('#').map_or(raw, |(before, _)| before).trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected `key = value`")))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "input" => config.input = Some(resolve(value)),
                "scorer" => {
                    config.scorer = if value == TOY_SCORER_ID {
                        ScorerSelection::ToyBigram
                    } else if let Some(p) = value.strip_prefix("external:") {
                        ScorerSelection::External(resolve(p))
                    } else {
                        return Err(Error::Config(format!(
                            "line {line}: scorer must be `{TOY_SCORER_ID}` or `external:<path>`"
                        )));
                    }
                }
                "scorer_corpus" => config.scorer_corpus = Some(resolve(value)),
                "losses" => config.losses = Some(resolve(value)),
                "scorer_id" => config.scorer_id = Some(value.to_string()),
                "n" => config.n = parse_value(key, value, line)?,
                "out" => config.out = resolve(value),
                "name" => config.manifest_name = value.to_string(),
                "temperature" => config.sampling.temperature = parse_value(key, value, line)?,
                "top_k" => config.sampling.top_k = parse_value(key, value, line)?,
                "top_p" => config.sampling.top_p = parse_value(key, value, line)?,
                "max_new_tokens" => config.sampling.max_new_tokens = parse_value(key, value, line)?,
                "seed" => config.seed = parse_value(key, value, line)?,
                "fusion" => config.fusion = value.to_string(),
                "depth" => config.trunk.depth = parse_value(key, value, line)?,
                "hidden_dim" => config.trunk.hidden_dim = parse_value(key, value, line)?,
                "num_patches" => config.trunk.num_patches = parse_value(key, value, line)?,
                "heads" => config.trunk.heads = parse_value(key, value, line)?,
                "patch_dim" => config.trunk.patch_dim = parse_value(key, value, line)?,
                "projector_hidden" => config.projector_hidden = parse_value(key, value, line)?,
                "projector_out" => config.projector_out = parse_value(key, value, line)?,
                "synth_count" => config.synth_count = parse_value(key, value, line)?,
                "contamination_rate" => config.synth_contamination = parse_value(key, value, line)?,
                "shift_sigmas" => config.synth_shift_sigmas = parse_value(key, value, line)?,
                "synth_mu" => config.synth_mu = parse_value(key, value, line)?,
                "synth_sigma" => config.synth_sigma = parse_value(key, value, line)?,
                "bench_runs" => config.bench_runs = parse_value(key, value, line)?,
                "bench_warmups" => config.bench_warmups = parse_value(key, value, line)?,
                "bench_vocab" => config.bench_vocab = parse_value(key, value, line)?,
                other => {
                    return Err(Error::Config(format!("line {line}: unknown key `{other}`")));
                }
            }
        }
        config.set_seed(config.seed);
        config.validate()?;
        Ok(config)
    }

    /// One seed drives the trunk, the projector, synthetic data, and sampling.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.trunk.seed = seed;
        self.sampling.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.n.is_finite() && self.n > 0.0) {
            return Err(Error::Config(format!("n must be > 0, got {}", self.n)));
        }
        self.sampling.validate()?;
        Ok(())
    }

    pub fn losses_path(&self) -> PathBuf {
        self.losses
            .clone()
            .unwrap_or_else(|| self.out.join(super::LOSSES_FILE))
    }
}
