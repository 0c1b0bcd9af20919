use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use beecurate::pipeline::{
    cmd_bench, cmd_filter, cmd_probe, cmd_score, cmd_synth, thread_cap, PipelineConfig,
};

#[derive(Parser)]
#[command(
    name = "beecurate",
    version,
    about = "Loss-based data curation and fusion probes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score every sample and write losses.jsonl.
    Score(Common),
    /// Fit the loss distribution and drop outliers above mu + n*sigma.
    Filter(Common),
    /// Filter synthetic normal losses with planted outliers.
    Synth(Common),
    /// Check fusion-strategy invariants and projector gradients.
    Probe(Common),
    /// Time preprocessing and decoding on the toy model.
    Bench(Common),
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Outlier multiplier, overriding the config.
    #[arg(long)]
    n: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<PipelineConfig> {
        let mut config = match &self.config {
            Some(path) => PipelineConfig::from_file(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => PipelineConfig::default(),
        };
        if let Some(n) = self.n {
            config.n = n;
        }
        if let Some(seed) = self.seed {
            config.set_seed(seed);
        }
        if let Some(out) = &self.out {
            config.out = out.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(threads) = thread_cap()? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring worker threads")?;
    }
    match cli.command {
        Command::Score(args) => {
            let summary = cmd_score(&args.load()?)?;
            println!(
                "scored {} samples with {} -> {}",
                summary.count,
                summary.scorer_id,
                summary.path.display()
            );
        }
        Command::Filter(args) => {
            let config = args.load()?;
            let (_, report) = cmd_filter(&config)?;
            for warning in &report.warnings {
                eprintln!("warning: {warning}");
            }
            println!(
                "n={} mu={} sigma={} threshold={} kept={} discarded={} -> {}",
                report.n,
                report.stats.mu,
                report.stats.sigma,
                report.threshold,
                report.kept_count,
                report.discarded_count,
                config.out.display()
            );
        }
        Command::Synth(args) => {
            let r = cmd_synth(&args.load()?)?;
            let recall = r
                .planted_recall
                .map_or("n/a".to_string(), |x| x.to_string());
            println!(
                "count={} planted={} threshold={} retention={} clean_retention={} recall={} expected_retention={}",
                r.count, r.planted, r.threshold, r.retention, r.clean_retention, recall, r.expected_retention
            );
        }
        Command::Probe(args) => {
            let report = cmd_probe(&args.load()?)?;
            for s in &report.strategies {
                let grad = s
                    .grad_check
                    .as_ref()
                    .map_or("n/a".to_string(), |g| format!("{:e}", g.max_relative_error));
                let status = if s.passed() { "ok" } else { "FAILED" };
                println!(
                    "{status:6} {:32} output {:?} grad error {grad}",
                    s.strategy, s.output_shape
                );
            }
            let failed = report.failed();
            for f in &failed {
                eprintln!("failed assertion: {f}");
            }
            return Ok(failed.is_empty());
        }
        Command::Bench(args) => {
            print!("{}", cmd_bench(&args.load()?)?.table);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            // Library errors already embed their cause; skip repeated links.
            let mut message = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !message.contains(&cause) {
                    message = if message.is_empty() {
                        cause
                    } else {
                        format!("{message}: {cause}")
                    };
                }
            }
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}
