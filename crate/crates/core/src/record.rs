//! Sample, loss, and manifest records plus their line-delimited JSON files.
//!
//! Samples and losses are stored one JSON object per line. Blank lines and
//! lines starting with `#` are skipped, so external evaluators may put a
//! header comment at the top of a losses file.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One multimodal training sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl SampleRecord {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        answer: impl Into<String>,
    ) -> Self {
        SampleRecord {
            id: id.into(),
            question: question.into(),
            answer: answer.into(),
            image_ref: None,
            metadata: BTreeMap::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.answer.is_empty() {
            return Err(Error::EmptyField(self.id.clone()));
        }
        Ok(())
    }
}

/// Per-sample loss produced by a scorer, in nats per answer token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub sample_id: String,
    pub loss: f64,
    pub scorer_id: String,
}

impl LossRecord {
    pub fn new(sample_id: impl Into<String>, loss: f64, scorer_id: impl Into<String>) -> Self {
        LossRecord {
            sample_id: sample_id.into(),
            loss,
            scorer_id: scorer_id.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.loss.is_finite() || self.loss < 0.0 {
            return Err(Error::InvalidLoss {
                id: self.sample_id.clone(),
                value: self.loss,
            });
        }
        Ok(())
    }
}

/// An ordered id list describing a (filtered) dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub sample_ids: Vec<String>,
    pub source_uri: String,
    pub created_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

impl DatasetManifest {
    /// Checks that every id exists in `samples`, appears once, and follows
    /// the source order.
    pub fn verify(&self, samples: &[SampleRecord]) -> Result<()> {
        let position: HashMap<&str, usize> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect();
        let mut seen = HashSet::new();
        let mut last = None;
        for id in &self.sample_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
            let pos = *position
                .get(id.as_str())
                .ok_or_else(|| Error::DanglingId(id.clone()))?;
            if last.is_some_and(|prev| pos < prev) {
                return Err(Error::ManifestOrder(id.clone()));
            }
            last = Some(pos);
        }
        Ok(())
    }
}

fn for_each_record<T, F>(path: &Path, mut f: F) -> Result<()>
where
    T: DeserializeOwned,
    F: FnMut(usize, T) -> Result<()>,
{
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let record = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        f(idx + 1, record)?;
    }
    Ok(())
}

fn write_lines<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record).expect("records always serialize");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a samples file in file order, rejecting duplicate ids and empty answers.
pub fn read_samples(path: impl AsRef<Path>) -> Result<Vec<SampleRecord>> {
    let path = path.as_ref();
    let mut seen = HashSet::new();
    let mut samples = Vec::new();
    for_each_record(path, |_, sample: SampleRecord| {
        sample.validate()?;
        if !seen.insert(sample.id.clone()) {
            return Err(Error::DuplicateId(sample.id));
        }
        samples.push(sample);
        Ok(())
    })?;
    Ok(samples)
}

pub fn write_samples(samples: &[SampleRecord], path: impl AsRef<Path>) -> Result<()> {
    write_lines(path.as_ref(), samples)
}

/// Writes a losses file. Every record is validated before anything is written.
pub fn write_losses(records: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    for record in records {
        record.validate()?;
    }
    write_lines(path.as_ref(), records)
}

/// Reads a losses file, rejecting invalid losses and repeated
/// `(sample_id, scorer_id)` pairs.
pub fn read_losses(path: impl AsRef<Path>) -> Result<Vec<LossRecord>> {
    let path = path.as_ref();
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for_each_record(path, |line, record: LossRecord| {
        if let Err(e) = record.validate() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: e.to_string(),
            });
        }
        if !seen.insert((record.sample_id.clone(), record.scorer_id.clone())) {
            return Err(Error::DuplicateLoss(record.sample_id));
        }
        records.push(record);
        Ok(())
    })?;
    Ok(records)
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(manifest).expect("manifest always serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        std::fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn reads_samples_in_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            &dir,
            "s.jsonl",
            r#"{"id":"s2","question":"q","answer":"a"}
{"id":"s1","question":"q","answer":"b","image_ref":"img/1.png"}

{"id":"s3","question":"q","answer":"c","metadata":{"src":"x"}}
"#,
        );
        let samples = read_samples(&path).unwrap();
        let ids: Vec<_> = samples.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["s2", "s1", "s3"]);
        assert_eq!(samples[1].image_ref.as_deref(), Some("img/1.png"));
        assert_eq!(samples[2].metadata["src"], "x");
    }

    #[test]
    fn duplicate_sample_id_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            &dir,
            "s.jsonl",
            "{\"id\":\"s1\",\"question\":\"q\",\"answer\":\"a\"}\n{\"id\":\"s1\",\"question\":\"q\",\"answer\":\"b\"}\n",
        );
        let err = read_samples(&path).unwrap_err();
        assert!(
            matches!(&err, Error::DuplicateId(id) if id == "s1"),
            "{err}"
        );
    }

    #[test]
    fn empty_answer_and_malformed_lines_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            &dir,
            "a.jsonl",
            "{\"id\":\"s9\",\"question\":\"q\",\"answer\":\"\"}\n",
        );
        assert!(matches!(read_samples(&path), Err(Error::EmptyField(id)) if id == "s9"));

        let path = write(
            &dir,
            "b.jsonl",
            "{\"id\":\"s1\",\"question\":\"q\",\"answer\":\"a\"}\n{\"id\":\n",
        );
        match read_samples(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, "e.jsonl", "");
        assert!(read_samples(&path).unwrap().is_empty());
    }

    #[test]
    fn loss_round_trip_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.jsonl");
        let records = vec![LossRecord::new("s1", 0.5, "toy")];
        write_losses(&records, &path).unwrap();
        assert_eq!(read_losses(&path).unwrap(), records);

        let bad = vec![LossRecord::new("s1", f64::INFINITY, "toy")];
        assert!(matches!(
            write_losses(&bad, &path),
            Err(Error::InvalidLoss { .. })
        ));

        let path = write(
            &dir,
            "inf.jsonl",
            "# header\n{\"sample_id\":\"s1\",\"loss\":0.1,\"scorer_id\":\"t\"}\n{\"sample_id\":\"s2\",\"loss\":\"inf\",\"scorer_id\":\"t\"}\n",
        );
        match read_losses(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }

        let path = write(
            &dir,
            "neg.jsonl",
            "{\"sample_id\":\"s1\",\"loss\":-0.5,\"scorer_id\":\"t\"}\n",
        );
        assert!(matches!(
            read_losses(&path),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn manifest_verification() {
        let samples: Vec<_> = ["a", "b", "c"]
            .iter()
            .map(|id| SampleRecord::new(*id, "q", "x"))
            .collect();
        let mut manifest = DatasetManifest {
            name: "m".into(),
            sample_ids: vec!["a".into(), "c".into()],
            source_uri: "s.jsonl".into(),
            created_at: "1970-01-01T00:00:00Z".into(),
            provenance: None,
        };
        manifest.verify(&samples).unwrap();

        manifest.sample_ids = vec!["c".into(), "a".into()];
        assert!(matches!(manifest.verify(&samples), Err(Error::ManifestOrder(id)) if id == "a"));

        manifest.sample_ids = vec!["a".into(), "zz".into()];
        assert!(matches!(manifest.verify(&samples), Err(Error::DanglingId(id)) if id == "zz"));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        manifest.provenance = Some("report.json".into());
        write_manifest(&manifest, &path).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), manifest);
    }

    fn arb_sample() -> impl Strategy<Value = SampleRecord> {
        (
            "\\PC{1,12}",
            "\\PC{0,40}",
            "\\PC{1,40}",
            proptest::option::of("[a-z/]{1,10}\\.png"),
            proptest::collection::btree_map("[a-z]{1,5}", "\\PC{0,8}", 0..3),
        )
            .prop_map(|(id, question, answer, image_ref, metadata)| SampleRecord {
                id,
                question,
                answer,
                image_ref,
                metadata,
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn samples_round_trip(samples in proptest::collection::vec(arb_sample(), 0..20)) {
            let mut seen = HashSet::new();
            let samples: Vec<_> = samples.into_iter().filter(|s| seen.insert(s.id.clone())).collect();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("s.jsonl");
            write_samples(&samples, &path).unwrap();
            prop_assert_eq!(read_samples(&path).unwrap(), samples);
        }
    }

    #[test]
    fn thousand_random_losses_round_trip_exactly() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let records: Vec<_> = (0..1000)
            .map(|i| {
                // Mix magnitudes so the decimal text exercises long mantissas.
                let loss = rng.random::<f64>() * 10f64.powi(rng.random_range(-8..8));
                LossRecord::new(format!("s{i}"), loss, "toy-bigram-v1")
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.jsonl");
        write_losses(&records, &path).unwrap();
        let back = read_losses(&path).unwrap();
        for (a, b) in records.iter().zip(&back) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        }
        assert_eq!(back, records);
    }
}
