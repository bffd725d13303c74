//! Synthetic fact-paragraph corpus standing in for scraped abstracts.
//!
//! Each record is a sequence of entity–attribute–value sentences drawn from
//! a small template grammar. Entity identifiers encode the generator seed
//! and a running ordinal injectively, so different seeds can never produce
//! colliding entities, which is what makes the train/test split hygiene
//! checkable by exact string audits.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::tokenize;
use crate::{Error, Result};

/// Length buckets used to group regeneration tests.
pub const LENGTH_BUCKETS: [usize; 5] = [96, 192, 288, 384, 480];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    /// Stand-in for the source publication window of each split.
    pub fn epoch_tag(self) -> &'static str {
        match self {
            Split::Train => "pre-2023-07",
            Split::Dev | Split::Test => "2024-01",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusRecord {
    pub id: String,
    pub text: String,
    pub token_length: usize,
    pub bucket: usize,
    pub split: Split,
    pub epoch_tag: String,
}

/// One entity–attribute–value statement recoverable from a record's text.
#[derive(Debug, Clone, PartialEq)]
pub struct Fact {
    pub entity: String,
    pub attribute: String,
    pub value: String,
}

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "qu", "th",
];
const NUCLEI: [&str; 8] = ["a", "e", "i", "o", "u", "ar", "el", "or"];

const ATTRIBUTES: [&str; 16] = [
    "flux density",
    "thermal margin",
    "orbital period",
    "signal gain",
    "mass index",
    "drift rate",
    "charge ratio",
    "spin factor",
    "albedo score",
    "pulse width",
    "field strength",
    "decay constant",
    "phase offset",
    "torque limit",
    "vapor pressure",
    "boundary depth",
];

/// Mixed-radix syllable encoding of `x`; injective for a fixed minimum
/// syllable count.
fn syllable_word(mut x: u64, min_syllables: usize) -> String {
    let mut s = String::new();
    let mut count = 0;
    loop {
        let onset = (x % 16) as usize;
        x /= 16;
        let nucleus = (x % 8) as usize;
        x /= 8;
        s.push_str(ONSETS[onset]);
        s.push_str(NUCLEI[nucleus]);
        count += 1;
        if x == 0 && count >= min_syllables {
            break;
        }
    }
    s
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

/// Proper-noun-like identifier, injective in (seed, ordinal).
pub fn entity_name(seed: u64, ordinal: u64) -> String {
    format!(
        "{}-{}",
        capitalize(&syllable_word(seed, 2)),
        capitalize(&syllable_word(ordinal, 2))
    )
}

fn render_sentence(template: usize, fact: &Fact, cycle: u32) -> String {
    let Fact {
        entity: e,
        attribute: a,
        value: v,
    } = fact;
    match template {
        0 => format!("{e} recorded a {a} of {v}."),
        1 => format!("The {a} measured for {e} was {v}."),
        2 => format!("{e} reached a {a} of {v} during the survey."),
        3 => format!("Analysts logged the {a} of {e} at {v}."),
        4 => format!("{e} reported {v} for its {a}."),
        5 => format!("In cycle {cycle}, {e} held a {a} of {v}."),
        6 => format!("The registry lists {e} with a {a} of {v}."),
        _ => format!("{e} maintained a {a} near {v} throughout the cycle."),
    }
}

const N_TEMPLATES: usize = 8;

/// Recover the fact stated by one generated sentence, if it matches the
/// grammar. The QA generator runs on serialized text, so extraction parses
/// rather than trusting in-memory state.
pub fn parse_sentence(sentence: &str) -> Option<Fact> {
    let s = sentence.trim().strip_suffix('.')?;
    let fact = |entity: &str, attribute: &str, value: &str| {
        Some(Fact {
            entity: entity.to_string(),
            attribute: attribute.to_string(),
            value: value.to_string(),
        })
    };
    if let Some(rest) = s.strip_prefix("Analysts logged the ") {
        let (a, rest) = rest.split_once(" of ")?;
        let (e, v) = rest.split_once(" at ")?;
        return fact(e, a, v);
    }
    if let Some(rest) = s.strip_prefix("The registry lists ") {
        let (e, rest) = rest.split_once(" with a ")?;
        let (a, v) = rest.split_once(" of ")?;
        return fact(e, a, v);
    }
    if let Some(rest) = s.strip_prefix("The ") {
        let (a, rest) = rest.split_once(" measured for ")?;
        let (e, v) = rest.split_once(" was ")?;
        return fact(e, a, v);
    }
    if let Some(rest) = s.strip_prefix("In cycle ") {
        let (_, rest) = rest.split_once(", ")?;
        let (e, rest) = rest.split_once(" held a ")?;
        let (a, v) = rest.split_once(" of ")?;
        return fact(e, a, v);
    }
    if let Some((e, rest)) = s.split_once(" recorded a ") {
        let (a, v) = rest.split_once(" of ")?;
        return fact(e, a, v);
    }
    if let Some((e, rest)) = s.split_once(" reached a ") {
        let (a, v) = rest.split_once(" of ")?;
        let v = v.strip_suffix(" during the survey")?;
        return fact(e, a, v);
    }
    if let Some((e, rest)) = s.split_once(" reported ") {
        let (v, a) = rest.split_once(" for its ")?;
        return fact(e, a, v);
    }
    if let Some((e, rest)) = s.split_once(" maintained a ") {
        let (a, v) = rest.split_once(" near ")?;
        let v = v.strip_suffix(" throughout the cycle")?;
        return fact(e, a, v);
    }
    None
}

/// All facts recoverable from a record's text, in sentence order.
pub fn parse_facts(text: &str) -> Vec<Fact> {
    text.split_inclusive('.')
        .filter_map(parse_sentence)
        .collect()
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic sub-stream seed for (seed, lane).
pub(crate) fn derive_seed(seed: u64, lane: u64) -> u64 {
    splitmix64(seed ^ splitmix64(lane.wrapping_add(1)))
}

/// Generate `n` records, cycling through `buckets`, deterministically per
/// seed. Records carry enough distinct facts to support the default QA
/// density (five pairs per 96 tokens).
pub fn build_synthetic_corpus(
    n: usize,
    buckets: &[usize],
    seed: u64,
    split: Split,
) -> Result<Vec<CorpusRecord>> {
    if n == 0 {
        return Err(Error::Contract("corpus size must be at least 1".into()));
    }
    if buckets.is_empty() || buckets.iter().any(|&b| b == 0) {
        return Err(Error::Config(format!("invalid bucket list {buckets:?}")));
    }
    let mut entity_ordinal: u64 = 0;
    let mut records = Vec::with_capacity(n);
    for index in 0..n {
        let bucket = buckets[index % buckets.len()];
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, index as u64));
        // Distinct attributes per record keep value questions unambiguous.
        let mut attrs: Vec<&str> = ATTRIBUTES.to_vec();
        attrs.shuffle(&mut rng);
        // Five pairs per 96 tokens, two question forms per fact.
        let needed_facts = (5 * bucket).div_ceil(96).div_ceil(2) + 1;
        if needed_facts > attrs.len() {
            return Err(Error::Config(format!(
                "bucket {bucket} needs {needed_facts} facts but only {} attributes exist",
                attrs.len()
            )));
        }
        let mut sentences: Vec<String> = Vec::new();
        let mut text_len = 0usize;
        let mut facts = 0usize;
        while text_len < bucket || facts < needed_facts {
            let fact = Fact {
                entity: entity_name(seed, entity_ordinal),
                attribute: attrs[facts % attrs.len()].to_string(),
                value: rng.gen_range(100u32..100_000).to_string(),
            };
            entity_ordinal += 1;
            let template = rng.gen_range(0..N_TEMPLATES);
            let cycle = rng.gen_range(2u32..99);
            let sentence = render_sentence(template, &fact, cycle);
            text_len += sentence.len() + usize::from(!sentences.is_empty());
            sentences.push(sentence);
            facts += 1;
        }
        let text = sentences.join(" ");
        let token_length = tokenize(&text).len();
        records.push(CorpusRecord {
            id: format!("{}-{:x}-{}", split.as_str(), seed, index),
            text,
            token_length,
            bucket,
            split,
            epoch_tag: split.epoch_tag().to_string(),
        });
    }
    Ok(records)
}

/// Train/dev/test corpora from disjoint seed lanes of one base seed.
pub fn build_split_corpora(
    n_train: usize,
    n_dev: usize,
    n_test: usize,
    buckets: &[usize],
    seed: u64,
) -> Result<(Vec<CorpusRecord>, Vec<CorpusRecord>, Vec<CorpusRecord>)> {
    let train = build_synthetic_corpus(n_train, buckets, seed.wrapping_mul(4).wrapping_add(1), Split::Train)?;
    let dev = build_synthetic_corpus(n_dev, buckets, seed.wrapping_mul(4).wrapping_add(2), Split::Dev)?;
    let test = build_synthetic_corpus(n_test, buckets, seed.wrapping_mul(4).wrapping_add(3), Split::Test)?;
    Ok((train, dev, test))
}

/// Largest bucket not exceeding `len`, if any.
pub fn bucket_for_length(len: usize, buckets: &[usize]) -> Option<usize> {
    let mut sorted: Vec<usize> = buckets.to_vec();
    sorted.sort_unstable();
    sorted.into_iter().rev().find(|&b| b <= len)
}

/// Stable grouping by bucket; records shorter than the smallest bucket are
/// discarded.
pub fn bucket_by_length(
    records: Vec<CorpusRecord>,
    buckets: &[usize],
) -> Vec<(usize, Vec<CorpusRecord>)> {
    let mut sorted: Vec<usize> = buckets.to_vec();
    sorted.sort_unstable();
    let mut groups: Vec<(usize, Vec<CorpusRecord>)> =
        sorted.iter().map(|&b| (b, Vec::new())).collect();
    for mut rec in records {
        if let Some(bucket) = bucket_for_length(rec.token_length, &sorted) {
            rec.bucket = bucket;
            let slot = groups.iter_mut().find(|(b, _)| *b == bucket).expect("bucket exists");
            slot.1.push(rec);
        }
    }
    groups
}

#[derive(Serialize, Deserialize)]
struct FileRecord {
    id: String,
    text: String,
    bucket: usize,
    split: Split,
}

/// JSON-lines serialization with fields {id, text, bucket, split}.
pub fn write_corpus_jsonl<W: Write>(records: &[CorpusRecord], mut w: W) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(&FileRecord {
            id: r.id.clone(),
            text: r.text.clone(),
            bucket: r.bucket,
            split: r.split,
        })
        .map_err(|e| Error::Format(format!("corpus serialization: {e}")))?;
        writeln!(w, "{line}").map_err(|e| Error::Format(format!("corpus write: {e}")))?;
    }
    Ok(())
}

pub fn read_corpus_jsonl<R: BufRead>(r: R) -> Result<Vec<CorpusRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::Format(format!("corpus read: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let fr: FileRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("corpus line {}: {e}", lineno + 1)))?;
        let token_length = tokenize(&fr.text).len();
        if token_length < fr.bucket {
            return Err(Error::DataValidation(format!(
                "record {} has {} tokens, below its bucket {}",
                fr.id, token_length, fr.bucket
            )));
        }
        out.push(CorpusRecord {
            id: fr.id,
            text: fr.text,
            token_length,
            bucket: fr.bucket,
            split: fr.split,
            epoch_tag: fr.split.epoch_tag().to_string(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn corpus_meets_bucket_length_contract() {
        let records = build_synthetic_corpus(5, &[96], 42, Split::Train).unwrap();
        assert_eq!(records.len(), 5);
        for r in &records {
            assert!(r.token_length >= 96, "record {} too short", r.id);
            assert_eq!(r.bucket, 96);
        }
    }

    #[test]
    fn seeds_one_and_two_share_no_entities() {
        let a = build_synthetic_corpus(20, &[96], 1, Split::Train).unwrap();
        let b = build_synthetic_corpus(20, &[96], 2, Split::Train).unwrap();
        let entities = |recs: &[CorpusRecord]| -> HashSet<String> {
            recs.iter()
                .flat_map(|r| parse_facts(&r.text))
                .map(|f| f.entity)
                .collect()
        };
        let (ea, eb) = (entities(&a), entities(&b));
        assert!(!ea.is_empty() && !eb.is_empty());
        assert!(ea.is_disjoint(&eb), "entity collision across seeds");
    }

    #[test]
    fn split_lanes_share_no_sentences() {
        let (train, _dev, test) = build_split_corpora(30, 5, 10, &[96, 192], 7).unwrap();
        let sentences = |recs: &[CorpusRecord]| -> HashSet<String> {
            recs.iter()
                .flat_map(|r| r.text.split_inclusive('.').map(|s| s.trim().to_string()))
                .filter(|s| !s.is_empty())
                .collect()
        };
        let (st, ss) = (sentences(&train), sentences(&test));
        assert!(st.is_disjoint(&ss), "shared sentence across splits");
        // exact-text audit as well
        let texts: HashSet<&str> = train.iter().map(|r| r.text.as_str()).collect();
        assert!(test.iter().all(|r| !texts.contains(r.text.as_str())));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = build_synthetic_corpus(8, &LENGTH_BUCKETS, 5, Split::Train).unwrap();
        let b = build_synthetic_corpus(8, &LENGTH_BUCKETS, 5, Split::Train).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn every_sentence_parses_back() {
        let records = build_synthetic_corpus(10, &[96, 480], 9, Split::Train).unwrap();
        for r in &records {
            let n_sentences = r.text.split_inclusive('.').filter(|s| !s.trim().is_empty()).count();
            let facts = parse_facts(&r.text);
            assert_eq!(facts.len(), n_sentences, "unparseable sentence in {}", r.text);
        }
    }

    #[test]
    fn bucket_rules_match_examples() {
        assert_eq!(bucket_for_length(100, &LENGTH_BUCKETS), Some(96));
        assert_eq!(bucket_for_length(480, &LENGTH_BUCKETS), Some(480));
        assert_eq!(bucket_for_length(95, &LENGTH_BUCKETS), None);

        let mk = |len: usize| CorpusRecord {
            id: format!("r{len}"),
            text: "x".repeat(len),
            token_length: len,
            bucket: 0,
            split: Split::Test,
            epoch_tag: String::new(),
        };
        let groups = bucket_by_length(vec![mk(100), mk(480), mk(95), mk(200)], &LENGTH_BUCKETS);
        let count: usize = groups.iter().map(|(_, v)| v.len()).sum();
        assert_eq!(count, 3, "length-95 record should be discarded");
        let g96 = groups.iter().find(|(b, _)| *b == 96).unwrap();
        assert_eq!(g96.1.len(), 1);
        let g480 = groups.iter().find(|(b, _)| *b == 480).unwrap();
        assert_eq!(g480.1.len(), 1);
    }

    #[test]
    fn jsonl_round_trip() {
        let records = build_synthetic_corpus(4, &[96], 11, Split::Dev).unwrap();
        let mut buf = Vec::new();
        write_corpus_jsonl(&records, &mut buf).unwrap();
        let back = read_corpus_jsonl(buf.as_slice()).unwrap();
        assert_eq!(records, back);
    }

    #[test]
    fn entity_names_are_injective_samples() {
        let mut seen = HashSet::new();
        for seed in 0..8u64 {
            for ord in 0..64u64 {
                assert!(seen.insert(entity_name(seed, ord)), "collision at {seed},{ord}");
            }
        }
    }
}
