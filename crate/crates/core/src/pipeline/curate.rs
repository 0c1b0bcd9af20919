use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::record::{
    read_losses, read_samples, write_losses, write_manifest, DatasetManifest, SampleRecord,
};
use crate::scorer::{import_external_losses, score_dataset, train_bigram};
use crate::stats::{filter_dataset, outlier_threshold, FilterConfig, FilterReport};

use super::config::{PipelineConfig, ScorerSelection};
use super::{ensure_dir, HISTOGRAM_FILE, MANIFEST_FILE, REPORT_FILE};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreSummary {
    pub scorer_id: String,
    pub count: usize,
    pub path: PathBuf,
}

fn input_path(config: &PipelineConfig) -> Result<&Path> {
    config
        .input
        .as_deref()
        .ok_or_else(|| Error::Config("no `input` samples file configured".into()))
}

/// Writes one loss per input sample to `<out>/losses.jsonl`, in input order.
pub fn cmd_score(config: &PipelineConfig) -> Result<ScoreSummary> {
    let samples = read_samples(input_path(config)?)?;
    let records = match &config.scorer {
        ScorerSelection::ToyBigram => {
            let model = match &config.scorer_corpus {
                Some(path) => train_bigram(&read_samples(path)?)?,
                None => train_bigram(&samples)?,
            };
            score_dataset(&samples, &model)?
        }
        ScorerSelection::External(path) => {
            let ids: HashSet<String> = samples.iter().map(|s| s.id.clone()).collect();
            let mut by_id: HashMap<String, _> = import_external_losses(path, &ids)?
                .into_iter()
                .map(|r| (r.sample_id.clone(), r))
                .collect();
            samples
                .iter()
                .map(|s| by_id.remove(&s.id).expect("import checked coverage"))
                .collect()
        }
    };
    ensure_dir(&config.out)?;
    let path = config.losses_path();
    write_losses(&records, &path)?;
    Ok(ScoreSummary {
        scorer_id: records
            .first()
            .map(|r| r.scorer_id.clone())
            .unwrap_or_default(),
        count: records.len(),
        path,
    })
}

/// `SOURCE_DATE_EPOCH` if set, otherwise the modification time of `source`,
/// so reruns on unchanged inputs produce identical manifests.
pub fn creation_timestamp(source: &Path) -> Result<String> {
    let time: DateTime<Utc> = match std::env::var("SOURCE_DATE_EPOCH") {
        Ok(v) => {
            let secs: i64 = v.trim().parse().map_err(|_| {
                Error::Config(format!("SOURCE_DATE_EPOCH is not an integer: `{v}`"))
            })?;
            DateTime::from_timestamp(secs, 0)
                .ok_or_else(|| Error::Config(format!("SOURCE_DATE_EPOCH out of range: {secs}")))?
        }
        Err(_) => std::fs::metadata(source)
            .and_then(|m| m.modified())
            .map_err(|e| Error::io(source, e))?
            .into(),
    };
    Ok(time.to_rfc3339_opts(SecondsFormat::Secs, true))
}

fn resolve_scorer_id(
    config: &PipelineConfig,
    losses_path: &Path,
    ids: &BTreeSet<&str>,
) -> Result<String> {
    if let Some(id) = &config.scorer_id {
        return Ok(id.clone());
    }
    match ids.len() {
        1 => Ok(ids.iter().next().unwrap().to_string()),
        0 => Err(Error::Config(format!(
            "{} holds no loss records",
            losses_path.display()
        ))),
        _ => Err(Error::Config(format!(
            "{} mixes scorers ({}); set `scorer_id`",
            losses_path.display(),
            ids.iter().copied().collect::<Vec<_>>().join(", ")
        ))),
    }
}

/// Fits, thresholds, and writes the kept-sample manifest, the report, and
/// the histogram.
pub fn cmd_filter(config: &PipelineConfig) -> Result<(DatasetManifest, FilterReport)> {
    let input = input_path(config)?;
    let samples: Vec<SampleRecord> = read_samples(input)?;
    let losses_path = config.losses_path();
    let losses = read_losses(&losses_path)?;
    let scorer_ids: BTreeSet<&str> = losses.iter().map(|r| r.scorer_id.as_str()).collect();
    let scorer_id = resolve_scorer_id(config, &losses_path, &scorer_ids)?;

    let filter = FilterConfig::new(config.n, scorer_id)?;
    let (kept, report) = filter_dataset(&samples, &losses, &filter)?;

    // Postconditions; a failure here is a bug, not bad input.
    if report.kept_count + report.discarded_count != samples.len() {
        return Err(Error::param("kept + discarded does not cover the input"));
    }
    if report.threshold != outlier_threshold(&report.stats, report.n)? {
        return Err(Error::param("report threshold disagrees with its stats"));
    }

    let manifest = DatasetManifest {
        name: config.manifest_name.clone(),
        sample_ids: kept.iter().map(|s| s.id.clone()).collect(),
        source_uri: input.display().to_string(),
        created_at: creation_timestamp(input)?,
        provenance: Some(REPORT_FILE.to_string()),
    };
    manifest.verify(&samples)?;

    ensure_dir(&config.out)?;
    write_manifest(&manifest, config.out.join(MANIFEST_FILE))?;
    report.write_json(config.out.join(REPORT_FILE))?;
    report.write_histogram_csv(config.out.join(HISTOGRAM_FILE))?;
    Ok((manifest, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::{write_samples, LossRecord};

    fn setup(dir: &Path) -> PipelineConfig {
        let samples: Vec<SampleRecord> = (0..30)
            .map(|i| {
                let answer = if i == 7 {
                    "zq#@!xv%~"
                } else {
                    "the total is 12 dollars"
                };
                SampleRecord::new(format!("s{i:02}"), "what is the total?", answer)
            })
            .collect();
        write_samples(&samples, dir.join("samples.jsonl")).unwrap();
        PipelineConfig {
            input: Some(dir.join("samples.jsonl")),
            out: dir.join("out"),
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn score_then_filter_drops_the_garbled_answer() {
        let dir = tempfile::tempdir().unwrap();
        let config = setup(dir.path());
        let summary = cmd_score(&config).unwrap();
        assert_eq!(summary.count, 30);
        let (manifest, report) = cmd_filter(&config).unwrap();
        assert_eq!(report.discarded_ids, vec!["s07".to_string()]);
        assert_eq!(manifest.sample_ids.len(), 29);
        assert_eq!(manifest.provenance.as_deref(), Some(REPORT_FILE));
        for file in [MANIFEST_FILE, REPORT_FILE, HISTOGRAM_FILE] {
            assert!(config.out.join(file).exists(), "{file}");
        }
    }

    #[test]
    fn missing_input_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let config = PipelineConfig {
            input: Some(dir.path().join("nope.jsonl")),
            ..PipelineConfig::default()
        };
        let err = cmd_score(&config).unwrap_err().to_string();
        assert!(err.contains("nope.jsonl"), "{err}");
    }

    #[test]
    fn filter_rejects_losses_for_unknown_ids() {
        let dir = tempfile::tempdir().unwrap();
        let config = setup(dir.path());
        cmd_score(&config).unwrap();
        let mut losses = read_losses(config.losses_path()).unwrap();
        losses.push(LossRecord::new("ghost", 1.0, losses[0].scorer_id.clone()));
        write_losses(&losses, config.losses_path()).unwrap();
        let err = cmd_filter(&config).unwrap_err().to_string();
        assert!(err.contains("ghost"), "{err}");
    }

    #[test]
    fn external_scores_are_reordered_to_sample_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = setup(dir.path());
        let mut records: Vec<LossRecord> = (0..30)
            .map(|i| LossRecord::new(format!("s{i:02}"), i as f64 / 10.0, "ext-model"))
            .collect();
        records.reverse();
        write_losses(&records, dir.path().join("ext.jsonl")).unwrap();
        config.scorer = ScorerSelection::External(dir.path().join("ext.jsonl"));
        cmd_score(&config).unwrap();
        let written = read_losses(config.losses_path()).unwrap();
        assert_eq!(written[0].sample_id, "s00");
        assert_eq!(written[29].loss, 2.9);
        let (_, report) = cmd_filter(&config).unwrap();
        assert_eq!(report.scorer_id, "ext-model");
    }

    #[test]
    fn mixed_scorers_need_an_explicit_choice() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = setup(dir.path());
        cmd_score(&config).unwrap();
        let mut losses = read_losses(config.losses_path()).unwrap();
        let extra: Vec<_> = losses
            .iter()
            .map(|r| LossRecord::new(r.sample_id.clone(), 0.5, "other"))
            .collect();
        losses.extend(extra);
        write_losses(&losses, config.losses_path()).unwrap();
        assert!(cmd_filter(&config).is_err());
        config.scorer_id = Some("other".into());
        let (_, report) = cmd_filter(&config).unwrap();
        assert_eq!(report.discarded_count, 0);
    }
}
