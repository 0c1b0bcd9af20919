use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{
    fuse, grad_check, init_trunk, project, CombineMode, FusionStrategy, FusionVariant,
    GradCheckReport, ProjectorParams, TapFeatures, Trunk, TrunkConfig, LAYER_SELECTIONS,
};
use crate::tensor::Matrix;

use super::config::PipelineConfig;
use super::{ensure_dir, write_json, PROBE_FILE};

/// Largest gradient-check error accepted by the probe.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Assertion {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Assertion {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyProbe {
    pub label: Option<String>,
    pub strategy: String,
    pub taps: Vec<usize>,
    pub fused_shape: (usize, usize),
    pub output_shape: (usize, usize),
    pub baseline_shape: (usize, usize),
    pub grad_check: Option<GradCheckReport>,
    pub assertions: Vec<Assertion>,
}

impl StrategyProbe {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub trunk: TrunkConfig,
    pub trunk_parameters: usize,
    pub projector_hidden: usize,
    pub projector_out: usize,
    pub strategies: Vec<StrategyProbe>,
    pub all_passed: bool,
}

impl ProbeReport {
    pub fn failed(&self) -> Vec<String> {
        self.strategies
            .iter()
            .flat_map(|s| {
                s.assertions
                    .iter()
                    .filter(|a| !a.passed)
                    .map(move |a| format!("{}: {} ({})", s.strategy, a.name, a.detail))
            })
            .collect()
    }
}

/// Seeded uniform `[-1, 1)` patch matrix standing in for an image.
pub fn probe_patches(config: &TrunkConfig, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_DA7A);
    Matrix::from_fn(config.num_patches, config.patch_dim, |_, _| {
        rng.random_range(-1.0..1.0)
    })
}

fn exact(a: &Matrix, b: &Matrix) -> bool {
    a.shape() == b.shape()
        && a.as_slice()
            .iter()
            .zip(b.as_slice())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Runs one strategy through forward, fusion, projection, and (if
/// `run_grad_check`) the gradient check, recording each invariant as an
/// assertion rather than failing fast.
pub fn probe_strategy(
    trunk: &Trunk,
    embeddings: &Matrix,
    strategy: &FusionStrategy,
    projector_hidden: usize,
    projector_out: usize,
    seed: u64,
    run_grad_check: bool,
) -> Result<StrategyProbe> {
    strategy.validate(trunk.depth())?;
    let d = trunk.config().hidden_dim;
    let taps = strategy.required_taps();
    let features = trunk.forward_with_taps(embeddings, &taps)?;
    let params = ProjectorParams::init(d, projector_hidden, projector_out, strategy, seed);

    let fused = fuse(&features, strategy, &params)?;
    let output = project(&fused, &params)?;
    let baseline = project(
        &fuse(&features, &FusionStrategy::last_only(), &params)?,
        &params,
    )?;
    let mut assertions = vec![Assertion::new(
        "output shape equals last-only baseline",
        output.shape() == baseline.shape(),
        format!("{:?} vs {:?}", output.shape(), baseline.shape()),
    )];

    let untapped = trunk.forward(embeddings)?;
    assertions.push(Assertion::new(
        "taps leave the final map unchanged",
        exact(&features.final_map, &untapped),
        "bitwise comparison against a forward pass without taps",
    ));

    for &k in &taps {
        let single = FusionStrategy {
            variant: FusionVariant::SingleLayer(k),
            combine: strategy.combine,
        };
        let singleton = FusionStrategy {
            variant: FusionVariant::MultiLayerMean(vec![k]),
            combine: strategy.combine,
        };
        let a = fuse(&features, &single, &params)?;
        let b = fuse(&features, &singleton, &params)?;
        assertions.push(Assertion::new(
            format!("mean:{k} equals layer:{k}"),
            exact(&a, &b),
            "exact",
        ));
    }

    if strategy.variant != FusionVariant::LastOnly {
        let zeroed = TapFeatures {
            taps: features
                .taps
                .iter()
                .map(|(&k, m)| (k, Matrix::zeros(m.rows(), m.cols())))
                .collect(),
            final_map: features.final_map.clone(),
        };
        let additive = strategy.clone().with_combine(CombineMode::Additive);
        let a = fuse(&zeroed, &additive, &params)?;
        let b = fuse(&zeroed, &FusionStrategy::last_only(), &params)?;
        assertions.push(Assertion::new(
            "additive fusion of zero taps equals last-only",
            exact(&a, &b),
            "exact",
        ));
    }

    let grad = if !run_grad_check {
        None
    } else {
        match grad_check(strategy, &params, &features) {
            Ok(report) => {
                assertions.push(Assertion::new(
                    format!("gradient check <= {GRAD_TOLERANCE:e}"),
                    report.max_relative_error <= GRAD_TOLERANCE,
                    format!(
                        "max relative error {:e} at {}",
                        report.max_relative_error, report.worst_parameter
                    ),
                ));
                Some(report)
            }
            Err(Error::NonFiniteGradient(name)) => {
                assertions.push(Assertion::new(
                    "gradient check",
                    false,
                    format!("non-finite gradient at {name}"),
                ));
                None
            }
            Err(e) => return Err(e),
        }
    };

    Ok(StrategyProbe {
        label: None,
        strategy: strategy.to_string(),
        taps: taps.into_iter().collect(),
        fused_shape: fused.shape(),
        output_shape: output.shape(),
        baseline_shape: baseline.shape(),
        grad_check: grad,
        assertions,
    })
}

/// Strategies named by `fusion`: one strategy string, or `ablation` (optionally
/// followed by `combine=...`) for all five layer-selection analogues.
pub fn probe_strategies(
    fusion: &str,
    depth: usize,
) -> Result<Vec<(Option<String>, FusionStrategy)>> {
    let fusion = fusion.trim();
    match fusion.strip_prefix("ablation") {
        Some(rest) => LAYER_SELECTIONS
            .iter()
            .map(|(label, text)| {
                Ok((
                    Some(label.to_string()),
                    FusionStrategy::parse(&format!("{text} {rest}"), depth)?,
                ))
            })
            .collect(),
        None => Ok(vec![(None, FusionStrategy::parse(fusion, depth)?)]),
    }
}

/// Writes `probe.json` and returns the report. The caller decides the exit
/// status from [`ProbeReport::all_passed`].
pub fn cmd_probe(config: &PipelineConfig) -> Result<ProbeReport> {
    let trunk = init_trunk(config.trunk)?;
    let embeddings = trunk.embed(&probe_patches(&config.trunk, config.seed))?;
    let mut strategies = Vec::new();
    for (label, strategy) in probe_strategies(&config.fusion, trunk.depth())? {
        let mut probe = probe_strategy(
            &trunk,
            &embeddings,
            &strategy,
            config.projector_hidden,
            config.projector_out,
            config.seed,
            true,
        )?;
        probe.label = label;
        strategies.push(probe);
    }
    let report = ProbeReport {
        trunk: config.trunk,
        trunk_parameters: trunk.parameter_count(),
        projector_hidden: config.projector_hidden,
        projector_out: config.projector_out,
        all_passed: strategies.iter().all(StrategyProbe::passed),
        strategies,
    };
    ensure_dir(&config.out)?;
    write_json(&report, &config.out.join(PROBE_FILE))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn ablation_probe_passes_and_reports_equal_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let config = PipelineConfig {
            fusion: "ablation".into(),
            out: dir.path().to_path_buf(),
            ..PipelineConfig::default()
        };
        let report = cmd_probe(&config).unwrap();
        assert!(report.all_passed, "{:?}", report.failed());
        assert_eq!(report.strategies.len(), 5);
        let shapes: BTreeSet<_> = report.strategies.iter().map(|s| s.output_shape).collect();
        assert_eq!(shapes.len(), 1);
        let text = std::fs::read_to_string(dir.path().join(PROBE_FILE)).unwrap();
        let back: ProbeReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn singleton_mean_is_marked_exact() {
        let config = PipelineConfig::default();
        let trunk = init_trunk(config.trunk).unwrap();
        let emb = trunk.embed(&probe_patches(&config.trunk, 0)).unwrap();
        let s = FusionStrategy::parse("mean:middle", trunk.depth()).unwrap();
        let probe = probe_strategy(&trunk, &emb, &s, 16, 8, 0, false).unwrap();
        let eq = probe
            .assertions
            .iter()
            .find(|a| a.name == "mean:4 equals layer:4")
            .unwrap();
        assert!(eq.passed && eq.detail == "exact");
    }

    #[test]
    fn bad_strategy_is_an_error() {
        assert!(probe_strategies("layer:99", 8).is_err());
        assert!(probe_strategies("median:2", 8).is_err());
        assert_eq!(
            probe_strategies("ablation combine=add", 8).unwrap().len(),
            5
        );
    }
}
