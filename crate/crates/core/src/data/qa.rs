//! Rule-based extractive QA generation over the synthetic corpus.
//!
//! Answers are exact spans of the context by construction: the value
//! question asks for a fact's value, the entity question asks which entity
//! carries a given value, and both strings appear verbatim in the text.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{derive_seed, parse_facts, CorpusRecord};
use super::tokenizer::tokenize;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub context_id: String,
}

/// Number of QA pairs for a bucket: five per 96 tokens, proportional.
pub fn pairs_for_bucket(pairs_per_96: usize, bucket: usize) -> usize {
    (pairs_per_96 * bucket).div_ceil(96)
}

/// Generate `⌈pairs_per_96·bucket/96⌉` QA pairs per record by parsing its
/// facts back out of the text. Deterministic per seed.
pub fn build_synthetic_qa(
    corpus: &[CorpusRecord],
    pairs_per_96: usize,
    seed: u64,
) -> Result<Vec<QaRecord>> {
    if corpus.is_empty() {
        return Err(Error::Contract("QA generation needs a non-empty corpus".into()));
    }
    let mut out = Vec::new();
    for (rec_idx, rec) in corpus.iter().enumerate() {
        let facts = parse_facts(&rec.text);
        if facts.is_empty() {
            return Err(Error::DataValidation(format!(
                "record {} has no parseable facts",
                rec.id
            )));
        }
        let wanted = pairs_for_bucket(pairs_per_96, rec.bucket);
        // (fact, form) candidates: form 0 asks for the value, form 1 for
        // the entity.
        let mut candidates: Vec<(usize, u8)> = (0..facts.len())
            .flat_map(|i| [(i, 0u8), (i, 1u8)])
            .collect();
        if candidates.len() < wanted {
            return Err(Error::DataValidation(format!(
                "record {} supports {} QA pairs, {} requested",
                rec.id,
                candidates.len(),
                wanted
            )));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, rec_idx as u64));
        candidates.shuffle(&mut rng);
        for (j, &(fact_idx, form)) in candidates.iter().take(wanted).enumerate() {
            let fact = &facts[fact_idx];
            let (question, answer) = match form {
                0 => (
                    format!("What is the {} of {}?", fact.attribute, fact.entity),
                    fact.value.clone(),
                ),
                _ => (
                    format!("Which entity has a {} of {}?", fact.attribute, fact.value),
                    fact.entity.clone(),
                ),
            };
            let record = QaRecord {
                id: format!("{}-q{}", rec.id, j),
                question,
                answer,
                context_id: rec.id.clone(),
            };
            validate_qa(&record, &rec.text)?;
            out.push(record);
        }
    }
    Ok(out)
}

/// Span and containment contracts for one QA record against its context.
pub fn validate_qa(qa: &QaRecord, context: &str) -> Result<()> {
    if qa.answer.is_empty() {
        return Err(Error::DataValidation(format!("QA {} has empty answer", qa.id)));
    }
    if !is_token_span(&tokenize(&qa.answer), &tokenize(context)) {
        return Err(Error::DataValidation(format!(
            "QA {} answer {:?} is not a span of its context",
            qa.id, qa.answer
        )));
    }
    if qa.question.contains(&qa.answer) {
        return Err(Error::DataValidation(format!(
            "QA {} answer appears inside the question",
            qa.id
        )));
    }
    Ok(())
}

/// Contiguous-subsequence check on token ids.
pub fn is_token_span(needle: &[u32], haystack: &[u32]) -> bool {
    if needle.is_empty() {
        return false;
    }
    haystack.windows(needle.len()).any(|w| w == needle)
}

/// Instruction prompt used for the instructed full-context gold standard.
pub fn instruct_prompt(context: &str, question: &str) -> String {
    format!(
        "Please finish the extractive question answering task. Just output the answer. Context: {context} Question: {question} Answer: "
    )
}

/// Bare full-context prompt for the zero-shot gold standard.
pub fn zero_shot_prompt(context: &str, question: &str) -> String {
    format!("Context: {context} Question: {question} Answer: ")
}

/// JSON array of {"id", "question", "answer", "context_id"}.
pub fn write_qa_json<W: Write>(records: &[QaRecord], w: W) -> Result<()> {
    serde_json::to_writer_pretty(w, records)
        .map_err(|e| Error::Format(format!("QA serialization: {e}")))
}

pub fn read_qa_json<R: Read>(r: R) -> Result<Vec<QaRecord>> {
    serde_json::from_reader(r).map_err(|e| Error::Format(format!("QA parse: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::{build_synthetic_corpus, Split, LENGTH_BUCKETS};

    #[test]
    fn bucket_96_gets_five_pairs_and_192_gets_ten() {
        assert_eq!(pairs_for_bucket(5, 96), 5);
        assert_eq!(pairs_for_bucket(5, 192), 10);
        assert_eq!(pairs_for_bucket(5, 288), 15);
        assert_eq!(pairs_for_bucket(5, 480), 25);
    }

    #[test]
    fn generated_pairs_match_proportional_counts() {
        let corpus = build_synthetic_corpus(10, &LENGTH_BUCKETS, 21, Split::Train).unwrap();
        let qa = build_synthetic_qa(&corpus, 5, 3).unwrap();
        for rec in &corpus {
            let count = qa.iter().filter(|q| q.context_id == rec.id).count();
            assert_eq!(count, pairs_for_bucket(5, rec.bucket), "record {}", rec.id);
        }
    }

    #[test]
    fn every_answer_is_a_span_and_not_in_question() {
        let corpus = build_synthetic_corpus(20, &[96, 288], 13, Split::Test).unwrap();
        let qa = build_synthetic_qa(&corpus, 5, 1).unwrap();
        assert!(!qa.is_empty());
        for q in &qa {
            let ctx = corpus.iter().find(|r| r.id == q.context_id).unwrap();
            assert!(ctx.text.contains(&q.answer));
            validate_qa(q, &ctx.text).unwrap();
        }
    }

    #[test]
    fn qa_generation_is_deterministic() {
        let corpus = build_synthetic_corpus(6, &[96], 2, Split::Train).unwrap();
        let a = build_synthetic_qa(&corpus, 5, 9).unwrap();
        let b = build_synthetic_qa(&corpus, 5, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn json_round_trip() {
        let corpus = build_synthetic_corpus(3, &[96], 4, Split::Dev).unwrap();
        let qa = build_synthetic_qa(&corpus, 5, 4).unwrap();
        let mut buf = Vec::new();
        write_qa_json(&qa, &mut buf).unwrap();
        let back = read_qa_json(buf.as_slice()).unwrap();
        assert_eq!(qa, back);
    }

    #[test]
    fn token_span_check_is_contiguous() {
        assert!(is_token_span(&[2, 3], &[1, 2, 3, 4]));
        assert!(!is_token_span(&[2, 4], &[1, 2, 3, 4]));
        assert!(!is_token_span(&[], &[1]));
    }
}
