//! Subcommands behind the `beecurate` binary. Each one reads a
//! [`PipelineConfig`], writes its fixed-name outputs into `config.out`, and
//! returns the report it wrote.

mod bench;
mod config;
mod curate;
mod probe;
mod synth;

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub use bench::{bench_once, cmd_bench, BenchReport, BenchTiming, ToyLmHead};
pub use config::{PipelineConfig, ScorerSelection};
pub use curate::{cmd_filter, cmd_score, creation_timestamp, ScoreSummary};
pub use probe::{
    cmd_probe, probe_patches, probe_strategies, probe_strategy, Assertion, ProbeReport,
    StrategyProbe, GRAD_TOLERANCE,
};
pub use synth::{cmd_synth, run_synth, SynthReport};

pub const LOSSES_FILE: &str = "losses.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";
pub const HISTOGRAM_FILE: &str = "histogram.csv";
pub const SYNTH_FILE: &str = "synth.json";
pub const PROBE_FILE: &str = "probe.json";
pub const BENCH_FILE: &str = "bench.json";

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "BEECURATE_THREADS";

/// Worker count from `BEECURATE_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!(
                "{THREADS_ENV} must be a positive integer, got `{v}`"
            ))),
        },
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("reports always serialize");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
