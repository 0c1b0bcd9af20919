use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which intermediate layers feed the fusion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionVariant {
    LastOnly,
    SingleLayer(usize),
    MultiLayerMean(Vec<usize>),
}

/// How the tapped features are merged with the final map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CombineMode {
    /// `tap + final`.
    Additive,
    /// `[tap | final] * W`, with `W` of shape `2d x d`.
    #[default]
    ConcatProject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionStrategy {
    pub variant: FusionVariant,
    pub combine: CombineMode,
}

/// The five layer-selection rows of the ablation, as `(row name, strategy text)`.
/// Layers 8/16/24 of a 32-block encoder map to the depth-relative aliases.
pub const LAYER_SELECTIONS: [(&str, &str); 5] = [
    ("w/o layer selection", "last"),
    ("layer16_24_mean", "mean:middle,deep"),
    ("layer_8_16_24_mean", "mean:shallow,middle,deep"),
    ("layer_24", "layer:deep"),
    ("layer_16", "layer:middle"),
];

/// Depth-relative layer names: `shallow`, `middle`, `deep` sit at a quarter,
/// half, and three quarters of the trunk (rounded up).
pub fn resolve_layer(name: &str, depth: usize) -> Result<usize> {
    let quarter = |k: usize| (k * depth).div_ceil(4);
    match name.trim() {
        "shallow" => Ok(quarter(1)),
        "middle" => Ok(quarter(2)),
        "deep" => Ok(quarter(3)),
        other => other
            .parse()
            .map_err(|_| Error::param(format!("unknown layer `{other}`"))),
    }
}

impl FusionStrategy {
    pub fn last_only() -> Self {
        FusionStrategy {
            variant: FusionVariant::LastOnly,
            combine: CombineMode::default(),
        }
    }

    pub fn with_combine(mut self, combine: CombineMode) -> Self {
        self.combine = combine;
        self
    }

    /// Parses `last`, `layer:<k>`, or `mean:<k1,k2,...>`, optionally followed
    /// by `combine=add|concat` (separated by whitespace or `;`). Layer names
    /// may be numbers or `shallow`/`middle`/`deep`.
    pub fn parse(text: &str, depth: usize) -> Result<Self> {
        let mut variant = None;
        let mut combine = CombineMode::default();
        for token in text
            .split(|c: char| c.is_whitespace() || c == ';')
            .filter(|t| !t.is_empty())
        {
            if let Some(mode) = token.strip_prefix("combine=") {
                combine = match mode {
                    "add" => CombineMode::Additive,
                    "concat" => CombineMode::ConcatProject,
                    other => return Err(Error::param(format!("unknown combine mode `{other}`"))),
                };
                continue;
            }
            if variant.is_some() {
                return Err(Error::param(format!(
                    "more than one layer selection in `{text}`"
                )));
            }
            variant = Some(if token == "last" {
                FusionVariant::LastOnly
            } else if let Some(k) = token.strip_prefix("layer:") {
                FusionVariant::SingleLayer(resolve_layer(k, depth)?)
            } else if let Some(list) = token.strip_prefix("mean:") {
                FusionVariant::MultiLayerMean(
                    list.split(',')
                        .map(|k| resolve_layer(k, depth))
                        .collect::<Result<_>>()?,
                )
            } else {
                return Err(Error::param(format!("unrecognised fusion token `{token}`")));
            });
        }
        let strategy = FusionStrategy {
            variant: variant
                .ok_or_else(|| Error::param(format!("no layer selection in `{text}`")))?,
            combine,
        };
        strategy.validate(depth)?;
        Ok(strategy)
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        let check = |k: usize| {
            if (1..=depth).contains(&k) {
                Ok(())
            } else {
                Err(Error::param(format!("layer {k} outside [1, {depth}]")))
            }
        };
        match &self.variant {
            FusionVariant::LastOnly => Ok(()),
            FusionVariant::SingleLayer(k) => check(*k),
            FusionVariant::MultiLayerMean(layers) => {
                if layers.is_empty() {
                    return Err(Error::param("mean over an empty layer set"));
                }
                let mut seen = BTreeSet::new();
                for &k in layers {
                    check(k)?;
                    if !seen.insert(k) {
                        return Err(Error::param(format!("layer {k} listed twice")));
                    }
                }
                Ok(())
            }
        }
    }

    /// Layers the trunk has to tap for this strategy.
    pub fn required_taps(&self) -> BTreeSet<usize> {
        match &self.variant {
            FusionVariant::LastOnly => BTreeSet::new(),
            FusionVariant::SingleLayer(k) => BTreeSet::from([*k]),
            FusionVariant::MultiLayerMean(layers) => layers.iter().copied().collect(),
        }
    }

    pub fn has_combine_weight(&self) -> bool {
        self.variant != FusionVariant::LastOnly && self.combine == CombineMode::ConcatProject
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.variant {
            FusionVariant::LastOnly => write!(f, "last")?,
            FusionVariant::SingleLayer(k) => write!(f, "layer:{k}")?,
            FusionVariant::MultiLayerMean(layers) => {
                let list: Vec<String> = layers.iter().map(|k| k.to_string()).collect();
                write!(f, "mean:{}", list.join(","))?
            }
        }
        let mode = match self.combine {
            CombineMode::Additive => "add",
            CombineMode::ConcatProject => "concat",
        };
        write!(f, " combine={mode}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aliases_follow_depth_fractions() {
        // 8/16/24 of 32 blocks.
        assert_eq!(resolve_layer("shallow", 32).unwrap(), 8);
        assert_eq!(resolve_layer("middle", 32).unwrap(), 16);
        assert_eq!(resolve_layer("deep", 32).unwrap(), 24);
        assert_eq!(
            ["shallow", "middle", "deep"].map(|n| resolve_layer(n, 8).unwrap()),
            [2, 4, 6]
        );
        assert_eq!(
            ["shallow", "middle", "deep"].map(|n| resolve_layer(n, 5).unwrap()),
            [2, 3, 4]
        );
        assert!(resolve_layer("top", 8).is_err());
    }

    #[test]
    fn parses_config_text() {
        let s = FusionStrategy::parse("layer:middle", 8).unwrap();
        assert_eq!(s.variant, FusionVariant::SingleLayer(4));
        assert_eq!(s.combine, CombineMode::ConcatProject);

        let s = FusionStrategy::parse("mean:middle,deep combine=add", 8).unwrap();
        assert_eq!(s.variant, FusionVariant::MultiLayerMean(vec![4, 6]));
        assert_eq!(s.combine, CombineMode::Additive);

        let s = FusionStrategy::parse("combine=concat;mean:2,3", 8).unwrap();
        assert_eq!(s.to_string(), "mean:2,3 combine=concat");
        assert_eq!(FusionStrategy::parse(&s.to_string(), 8).unwrap(), s);

        assert_eq!(
            FusionStrategy::parse("last", 8).unwrap(),
            FusionStrategy::last_only()
        );
    }

    #[test]
    fn rejects_invalid_strategies() {
        for bad in [
            "",
            "layer:0",
            "layer:9",
            "mean:",
            "mean:3,3",
            "last layer:2",
            "combine=mul last",
            "pool:2",
        ] {
            assert!(FusionStrategy::parse(bad, 8).is_err(), "{bad}");
        }
        // Aliases collide on a two-block trunk.
        assert!(FusionStrategy::parse("mean:shallow,middle,deep", 2).is_err());
    }

    #[test]
    fn ablation_rows_parse_at_default_depth() {
        for (_, text) in LAYER_SELECTIONS {
            FusionStrategy::parse(text, 8).unwrap();
        }
    }

    #[test]
    fn required_taps() {
        let s = FusionStrategy::parse("mean:shallow,middle,deep", 8).unwrap();
        assert_eq!(s.required_taps(), BTreeSet::from([2, 4, 6]));
        assert!(FusionStrategy::last_only().required_taps().is_empty());
        assert!(!FusionStrategy::last_only().has_combine_weight());
    }
}
