//! Loss producers: a character-bigram cross-entropy scorer that needs no
//! external model, and validation for losses computed elsewhere.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::record::{read_losses, LossRecord, SampleRecord};

pub const TOY_SCORER_ID: &str = "toy-bigram-v1";

/// Bigram vocabulary entry. `Start` opens every answer; `Unknown` stands in
/// for characters the model never saw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Symbol {
    Start,
    Char(char),
    Unknown,
}

/// Add-one smoothed character bigram model over answer text.
#[derive(Debug, Clone, PartialEq)]
pub struct BigramModel {
    alphabet: BTreeSet<Symbol>,
    counts: BTreeMap<(Symbol, Symbol), u64>,
    context_totals: BTreeMap<Symbol, u64>,
}

impl BigramModel {
    /// Start marker plus every character seen in training answers.
    pub fn alphabet(&self) -> &BTreeSet<Symbol> {
        &self.alphabet
    }

    /// Size of the next-symbol support: the alphabet plus `Unknown`.
    pub fn vocab_size(&self) -> usize {
        self.alphabet.len() + 1
    }

    pub fn count(&self, context: Symbol, next: Symbol) -> u64 {
        self.counts.get(&(context, next)).copied().unwrap_or(0)
    }

    pub fn context_total(&self, context: Symbol) -> u64 {
        self.context_totals.get(&context).copied().unwrap_or(0)
    }

    pub fn scorer_id(&self) -> &'static str {
        TOY_SCORER_ID
    }

    fn symbol(&self, c: char) -> Symbol {
        let s = Symbol::Char(c);
        if self.alphabet.contains(&s) {
            s
        } else {
            Symbol::Unknown
        }
    }

    /// Smoothed `P(next | context)`.
    pub fn prob(&self, context: Symbol, next: Symbol) -> f64 {
        let (context, next) = (self.canonical(context), self.canonical(next));
        (self.count(context, next) + 1) as f64
            / (self.context_total(context) + self.vocab_size() as u64) as f64
    }

    fn canonical(&self, s: Symbol) -> Symbol {
        match s {
            Symbol::Char(c) => self.symbol(c),
            other => other,
        }
    }

    /// Every symbol that can follow a context (including the never-observed
    /// `Start`, which keeps the support size equal to `vocab_size`).
    pub fn support(&self) -> impl Iterator<Item = Symbol> + '_ {
        self.alphabet
            .iter()
            .copied()
            .chain(std::iter::once(Symbol::Unknown))
    }

    /// Mean negative log-likelihood per answer character, in nats.
    pub fn score_sample(&self, sample: &SampleRecord) -> Result<LossRecord> {
        if sample.answer.is_empty() {
            return Err(Error::EmptyField(sample.id.clone()));
        }
        let mut context = Symbol::Start;
        let mut total = 0.0;
        let mut positions = 0usize;
        for c in sample.answer.chars() {
            let next = self.symbol(c);
            total -= self.prob(context, next).ln();
            positions += 1;
            context = next;
        }
        Ok(LossRecord::new(
            sample.id.clone(),
            total / positions as f64,
            TOY_SCORER_ID,
        ))
    }
}

pub fn train_bigram(corpus: &[SampleRecord]) -> Result<BigramModel> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut alphabet = BTreeSet::from([Symbol::Start]);
    let mut counts = BTreeMap::new();
    let mut context_totals = BTreeMap::new();
    for sample in corpus {
        if sample.answer.is_empty() {
            return Err(Error::EmptyField(sample.id.clone()));
        }
        let mut context = Symbol::Start;
        for c in sample.answer.chars() {
            let next = Symbol::Char(c);
            alphabet.insert(next);
            *counts.entry((context, next)).or_insert(0) += 1;
            *context_totals.entry(context).or_insert(0) += 1;
            context = next;
        }
    }
    Ok(BigramModel {
        alphabet,
        counts,
        context_totals,
    })
}

pub fn score_sample(model: &BigramModel, sample: &SampleRecord) -> Result<LossRecord> {
    model.score_sample(sample)
}

/// Scores every sample, in input order. Runs on the current rayon pool;
/// each score is a pure function of `(model, sample)`, so the output does
/// not depend on the worker count.
pub fn score_dataset(samples: &[SampleRecord], model: &BigramModel) -> Result<Vec<LossRecord>> {
    samples.par_iter().map(|s| model.score_sample(s)).collect()
}

/// Loads losses written by an external evaluator and checks that they cover
/// `expected_ids` exactly once each.
pub fn import_external_losses(
    path: impl AsRef<Path>,
    expected_ids: &HashSet<String>,
) -> Result<Vec<LossRecord>> {
    let records = read_losses(path)?;
    let mut seen = HashSet::with_capacity(records.len());
    for record in &records {
        if !expected_ids.contains(&record.sample_id) {
            return Err(Error::UnknownLoss(record.sample_id.clone()));
        }
        if !seen.insert(record.sample_id.as_str()) {
            return Err(Error::DuplicateLoss(record.sample_id.clone()));
        }
    }
    let mut missing: Vec<_> = expected_ids
        .iter()
        .filter(|id| !seen.contains(id.as_str()))
        .collect();
    missing.sort();
    if let Some(id) = missing.first() {
        return Err(Error::MissingLoss((*id).clone()));
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus(answers: &[&str]) -> Vec<SampleRecord> {
        answers
            .iter()
            .enumerate()
            .map(|(i, a)| SampleRecord::new(format!("s{i}"), "q", *a))
            .collect()
    }

    fn ch(c: char) -> Symbol {
        Symbol::Char(c)
    }

    #[test]
    fn tally_single_answer() {
        let model = train_bigram(&corpus(&["aa"])).unwrap();
        assert_eq!(
            model.alphabet().iter().copied().collect::<Vec<_>>(),
            [Symbol::Start, ch('a')]
        );
        assert_eq!(model.count(Symbol::Start, ch('a')), 1);
        assert_eq!(model.count(ch('a'), ch('a')), 1);
        assert_eq!(model.vocab_size(), 3);
    }

    #[test]
    fn tally_two_answers() {
        let model = train_bigram(&corpus(&["ab", "ba"])).unwrap();
        assert_eq!(model.count(ch('a'), ch('b')), 1);
        assert_eq!(model.count(ch('b'), ch('a')), 1);
        assert_eq!(model.count(Symbol::Start, ch('a')), 1);
        assert_eq!(model.count(Symbol::Start, ch('b')), 1);
        assert_eq!(model.count(ch('a'), ch('a')), 0);
        assert_eq!(model.context_total(Symbol::Start), 2);
    }

    #[test]
    fn training_is_deterministic() {
        let c = corpus(&["hello", "world", "文档问答"]);
        assert_eq!(train_bigram(&c).unwrap(), train_bigram(&c).unwrap());
        assert!(matches!(train_bigram(&[]), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn hand_scored_answers() {
        // Corpus {"ab","ba"}, V = |{start,a,b,unk}| = 4.
        // P(a|start) = 2/6, P(b|a) = 2/5.
        let model = train_bigram(&corpus(&["ab", "ba"])).unwrap();
        let loss = model
            .score_sample(&SampleRecord::new("x", "", "ab"))
            .unwrap()
            .loss;
        let expected = ((3.0f64).ln() + (2.5f64).ln()) / 2.0;
        assert!((loss - expected).abs() < 1e-15);
        assert!((loss - 1.007_451_510_271_132_6).abs() < 1e-15);

        // Corpus {"aaaa"}: V = 3, P(a|start) = 2/4, P(a|a) = 4/6.
        let model = train_bigram(&corpus(&["aaaa"])).unwrap();
        let rec = model
            .score_sample(&SampleRecord::new("y", "", "aaaa"))
            .unwrap();
        assert!((rec.loss - 0.477_385_626_221_109_6).abs() < 1e-15);
        assert!(rec.loss > 0.0);
        assert_eq!(rec.scorer_id, TOY_SCORER_ID);
    }

    #[test]
    fn unseen_contexts_are_uniform() {
        let model = train_bigram(&corpus(&["ab"])).unwrap();
        let v = model.vocab_size() as f64;
        // `b` never precedes anything and `Unknown` is never a context.
        for context in [ch('b'), Symbol::Unknown, ch('z')] {
            for next in model.support() {
                assert_eq!(-model.prob(context, next).ln(), v.ln());
            }
        }
    }

    #[test]
    fn unknown_characters_map_to_unknown() {
        let model = train_bigram(&corpus(&["ab"])).unwrap();
        assert_eq!(
            model.prob(ch('a'), ch('#')),
            model.prob(ch('a'), Symbol::Unknown)
        );
        let rec = model
            .score_sample(&SampleRecord::new("x", "", "##"))
            .unwrap();
        assert!(rec.loss.is_finite() && rec.loss > 0.0);
    }

    #[test]
    fn empty_dataset_and_empty_answer() {
        let model = train_bigram(&corpus(&["ab"])).unwrap();
        assert!(score_dataset(&[], &model).unwrap().is_empty());
        let bad = SampleRecord::new("e", "q", "");
        assert!(matches!(model.score_sample(&bad), Err(Error::EmptyField(id)) if id == "e"));
    }

    #[test]
    fn scoring_training_corpus_stays_below_uniform() {
        let c = corpus(&[
            "The total amount is 12,450.00 CNY.",
            "Contract signed on 2023-04-18.",
            "Net profit rose 8.2% year over year.",
            "The seal belongs to the finance department.",
        ]);
        let model = train_bigram(&c).unwrap();
        let ln_v = (model.vocab_size() as f64).ln();
        for rec in score_dataset(&c, &model).unwrap() {
            assert!(rec.loss >= 0.0 && rec.loss <= ln_v, "{rec:?}");
        }
    }

    fn write(dir: &tempfile::TempDir, text: &str) -> std::path::PathBuf {
        let path = dir.path().join("ext.jsonl");
        std::fs::write(&path, text).unwrap();
        path
    }

    fn ids(list: &[&str]) -> HashSet<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn import_validates_coverage() {
        let dir = tempfile::tempdir().unwrap();
        let good = "# prompt template: answer-only\n{\"sample_id\":\"s1\",\"loss\":0.4,\"scorer_id\":\"m\"}\n{\"sample_id\":\"s2\",\"loss\":1.5,\"scorer_id\":\"m\"}\n";
        let path = write(&dir, good);
        let records = import_external_losses(&path, &ids(&["s1", "s2"])).unwrap();
        assert_eq!(
            records,
            vec![
                LossRecord::new("s1", 0.4, "m"),
                LossRecord::new("s2", 1.5, "m")
            ]
        );

        let err = import_external_losses(&path, &ids(&["s1", "s2", "s7"])).unwrap_err();
        assert!(
            matches!(&err, Error::MissingLoss(id) if id == "s7"),
            "{err}"
        );

        let err = import_external_losses(&path, &ids(&["s1"])).unwrap_err();
        assert!(
            matches!(&err, Error::UnknownLoss(id) if id == "s2"),
            "{err}"
        );

        let path = write(&dir, "{\"sample_id\":\"s1\",\"loss\":0.4,\"scorer_id\":\"m\"}\n{\"sample_id\":\"s1\",\"loss\":0.4,\"scorer_id\":\"other\"}\n");
        let err = import_external_losses(&path, &ids(&["s1"])).unwrap_err();
        assert!(
            matches!(&err, Error::DuplicateLoss(id) if id == "s1"),
            "{err}"
        );

        let path = write(
            &dir,
            "{\"sample_id\":\"s1\",\"loss\":NaN,\"scorer_id\":\"m\"}\n",
        );
        assert!(import_external_losses(&path, &ids(&["s1"])).is_err());
    }

    fn answers() -> impl Strategy<Value = Vec<String>> {
        proptest::collection::vec("[a-e 。数据]{1,20}", 1..30)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn conditionals_sum_to_one(texts in answers()) {
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let model = train_bigram(&corpus(&refs)).unwrap();
            for context in model.support() {
                let total: f64 = model.support().map(|next| model.prob(context, next)).sum();
                prop_assert!((total - 1.0).abs() <= 1e-12);
                let counted: u64 = model.support().map(|next| model.count(context, next)).sum();
                prop_assert_eq!(counted, model.context_total(context));
            }
        }

        #[test]
        fn losses_bounded_and_repeatable(texts in answers(), probe in "[a-z#]{1,20}") {
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let c = corpus(&refs);
            let model = train_bigram(&c).unwrap();
            let v = model.vocab_size() as u64;
            let worst = model.support().map(|a| ((model.context_total(a) + v) as f64).ln()).fold(0.0, f64::max);
            let mut samples = c.clone();
            samples.push(SampleRecord::new("probe", "", probe));
            let first = score_dataset(&samples, &model).unwrap();
            let second = score_dataset(&samples, &model).unwrap();
            for (a, b) in first.iter().zip(&second) {
                prop_assert_eq!(a.loss.to_bits(), b.loss.to_bits());
                prop_assert!(a.loss > 0.0 && a.loss <= worst);
            }
            let order: Vec<_> = first.iter().map(|r| r.sample_id.clone()).collect();
            let expected: Vec<_> = samples.iter().map(|s| s.id.clone()).collect();
            prop_assert_eq!(order, expected);
        }
    }

    #[test]
    fn parallel_scoring_matches_sequential() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<_> = (0..100)
            .map(|i| {
                let len = rng.random_range(1..40);
                let answer: String = (0..len).map(|_| rng.random_range('a'..='k')).collect();
                SampleRecord::new(format!("r{i}"), "q", answer)
            })
            .collect();
        let model = train_bigram(&samples[..50]).unwrap();
        let sequential: Vec<_> = samples
            .iter()
            .map(|s| model.score_sample(s).unwrap())
            .collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap();
        let parallel = pool.install(|| score_dataset(&samples, &model)).unwrap();
        assert_eq!(sequential, parallel);
        assert_eq!(parallel, score_dataset(&samples, &model).unwrap());
    }
}
