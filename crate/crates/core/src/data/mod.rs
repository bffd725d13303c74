//! Byte tokenizer, synthetic corpus and QA generation, deterministic
//! batching, and the JSON file formats for both.

mod batch;
mod corpus;
mod qa;
mod tokenizer;

pub use batch::{batch_indices, batch_iter};
pub use corpus::{
    bucket_by_length, bucket_for_length, build_split_corpora, build_synthetic_corpus, entity_name,
    parse_facts, parse_sentence, read_corpus_jsonl, write_corpus_jsonl, CorpusRecord, Fact, Split,
    LENGTH_BUCKETS,
};
pub use qa::{
    build_synthetic_qa, instruct_prompt, is_token_span, pairs_for_bucket, read_qa_json,
    validate_qa, write_qa_json, zero_shot_prompt, QaRecord,
};
pub use tokenizer::{
    detokenize, detokenize_bytes, detokenize_lossy, tokenize, tokenize_bytes, BYTE_VOCAB,
};
