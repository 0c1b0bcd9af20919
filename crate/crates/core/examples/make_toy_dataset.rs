//! Regenerates `data/toy_samples.jsonl`, the bundled 200-sample doc-QA set.
//!
//! ```text
//! cargo run --example make_toy_dataset [-- <output path>]
//! ```
//!
//! The output is committed; rerunning with the same seed reproduces it.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use beecurate::record::{write_samples, SampleRecord};

const SEED: u64 = 20250601;
const COUNT: usize = 200;
/// Positions whose answers are replaced by scanner garbage.
const NOISY: [usize; 8] = [17, 42, 77, 101, 123, 150, 168, 191];

const COMPANIES: [&str; 8] = [
    "Northwind Traders",
    "Blue Harbor Logistics",
    "Maple Leaf Printing",
    "Summit Office Supply",
    "Riverbend Foods",
    "Crescent Tools",
    "Golden Field Seeds",
    "Harborview Clinic",
];
const ITEMS: [&str; 8] = [
    "paper",
    "toner",
    "desk lamps",
    "folders",
    "staplers",
    "ink",
    "labels",
    "envelopes",
];
const MONTHS: [&str; 12] = [
    "January",
    "February",
    "March",
    "April",
    "May",
    "June",
    "July",
    "August",
    "September",
    "October",
    "November",
    "December",
];
const CITIES: [&str; 6] = [
    "Springfield",
    "Lakeside",
    "Fairview",
    "Greenville",
    "Riverton",
    "Oakdale",
];

fn make(rng: &mut ChaCha8Rng) -> (String, String, &'static str) {
    let company = *COMPANIES.choose(rng).unwrap();
    let item = *ITEMS.choose(rng).unwrap();
    let month = *MONTHS.choose(rng).unwrap();
    let city = *CITIES.choose(rng).unwrap();
    let amount = rng.random_range(10..5000);
    let day = rng.random_range(1..29);
    let year = rng.random_range(2018..2025);
    match rng.random_range(0..6) {
        0 => (
            "What is the total amount due on this invoice?".into(),
            format!("The total amount due is {amount} dollars."),
            "invoice",
        ),
        1 => (
            "Which company issued this receipt?".into(),
            format!("The receipt was issued by {company}."),
            "receipt",
        ),
        2 => (
            format!("According to the table, how many units of {item} were ordered in {month}?"),
            format!(
                "{} units of {item} were ordered in {month}.",
                amount % 300 + 1
            ),
            "table",
        ),
        3 => (
            "What name appears on the red seal?".into(),
            format!("The seal reads {company}."),
            "seal",
        ),
        4 => (
            format!("In the bar chart, which month has the highest sales for {item}?"),
            format!("{month} has the highest sales for {item}."),
            "chart",
        ),
        _ => (
            "When and where was this form signed?".into(),
            format!("The form was signed in {city} on {month} {day}, {year}."),
            "form",
        ),
    }
}

fn garble(rng: &mut ChaCha8Rng) -> String {
    const JUNK: &[char] = &[
        '#', '~', '|', '^', '%', '{', '}', '\\', '@', '¤', '§', 'Ø', 'ß', 'Ж', 'ξ', '¿', '0', '1',
        'l', 'I',
    ];
    let len = rng.random_range(24..48);
    (0..len).map(|_| *JUNK.choose(rng).unwrap()).collect()
}

fn main() -> anyhow::Result<()> {
    let out = std::env::args_os()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| {
            PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/toy_samples.jsonl")
        });
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let samples: Vec<SampleRecord> = (0..COUNT)
        .map(|i| {
            let (question, mut answer, category) = make(&mut rng);
            let noisy = NOISY.contains(&i);
            if noisy {
                answer = garble(&mut rng);
            }
            let mut metadata = BTreeMap::new();
            metadata.insert("category".to_string(), category.into());
            if noisy {
                metadata.insert("ocr_quality".to_string(), "poor".into());
            }
            SampleRecord {
                id: format!("doc-{i:04}"),
                question,
                answer,
                image_ref: Some(format!("images/doc-{i:04}.png")),
                metadata,
            }
        })
        .collect();
    write_samples(&samples, &out)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}
