//! Regeneration metrics (ROUGE-L-F, BLEU) and extractive-QA metrics
//! (token-overlap F1, exact match) with SQuAD-style answer normalization.
//! Regeneration is scored on token sequences, QA on normalized words.

use std::collections::HashMap;
use std::hash::Hash;

use crate::{Error, Result};

/// Aggregate metric table for one evaluated configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub rouge_l_f: f64,
    pub bleu: f64,
    pub f1: f64,
    pub em: f64,
    pub items: usize,
}

impl MetricReport {
    /// Macro-average per-item (rouge, bleu) and (f1, em) pairs. Either list
    /// may be empty; its aggregates are then zero.
    pub fn from_items(regen: &[(f64, f64)], qa: &[(f64, bool)]) -> MetricReport {
        let mean = |xs: &[f64]| {
            if xs.is_empty() {
                0.0
            } else {
                xs.iter().sum::<f64>() / xs.len() as f64
            }
        };
        let rouge: Vec<f64> = regen.iter().map(|r| r.0).collect();
        let bleu: Vec<f64> = regen.iter().map(|r| r.1).collect();
        let f1: Vec<f64> = qa.iter().map(|q| q.0).collect();
        let em: Vec<f64> = qa.iter().map(|q| if q.1 { 1.0 } else { 0.0 }).collect();
        MetricReport {
            rouge_l_f: mean(&rouge),
            bleu: mean(&bleu),
            f1: mean(&f1),
            em: mean(&em),
            items: regen.len().max(qa.len()),
        }
    }
}

/// Length of the longest common subsequence, O(n·m) with a rolling row.
fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let m = b.len();
    let mut prev = vec![0usize; m + 1];
    let mut curr = vec![0usize; m + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            curr[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
        curr[0] = 0;
    }
    prev[m]
}

/// ROUGE-L F-measure: F = 2PR/(P+R) over LCS precision and recall.
pub fn rouge_l_f<T: PartialEq>(candidate: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Contract("rouge_l_f needs a non-empty reference".into()));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let lcs = lcs_length(candidate, reference) as f64;
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    if p + r == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * p * r / (p + r))
}

const BLEU_SMOOTH_EPS: f64 = 1e-9;

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// BLEU with clipped n-gram precision up to `max_n`, add-epsilon smoothing
/// for empty counts, and the usual brevity penalty.
pub fn bleu<T: Eq + Hash + Clone>(candidate: &[T], reference: &[T], max_n: usize) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Contract("bleu needs a non-empty reference".into()));
    }
    if max_n == 0 {
        return Err(Error::Contract("bleu needs max_n >= 1".into()));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0f64;
    for n in 1..=max_n {
        let cand = ngram_counts(candidate, n);
        let refc = ngram_counts(reference, n);
        let total: usize = cand.values().sum();
        let clipped: usize = cand
            .iter()
            .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if total == 0 || clipped == 0 {
            BLEU_SMOOTH_EPS
        } else {
            clipped as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let geo_mean = (log_sum / max_n as f64).exp();
    let bp = (1.0 - reference.len() as f64 / candidate.len() as f64).min(0.0).exp();
    Ok(bp * geo_mean)
}

/// SQuAD-convention normalization: lowercase, strip punctuation, drop the
/// articles {a, an, the}, collapse whitespace, split into words.
pub fn normalize_answer(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let stripped: String = lowered
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    stripped
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

/// Bag-of-words F1 and exact match over normalized answers.
pub fn qa_f1_em(predicted: &str, gold: &str) -> Result<(f64, bool)> {
    if gold.is_empty() {
        return Err(Error::Contract("qa_f1_em needs a non-empty gold answer".into()));
    }
    let pred = normalize_answer(predicted);
    let gold = normalize_answer(gold);
    let em = pred == gold;
    if pred.is_empty() || gold.is_empty() {
        // SQuAD convention: degenerate normalizations score on equality only.
        let score = if em { 1.0 } else { 0.0 };
        return Ok((score, em));
    }
    let mut gold_counts: HashMap<&str, usize> = HashMap::new();
    for w in &gold {
        *gold_counts.entry(w.as_str()).or_insert(0) += 1;
    }
    let mut common = 0usize;
    for w in &pred {
        if let Some(c) = gold_counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return Ok((0.0, em));
    }
    let p = common as f64 / pred.len() as f64;
    let r = common as f64 / gold.len() as f64;
    Ok((2.0 * p * r / (p + r), em))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// Plain recursive LCS with memoization; the independent oracle for the
    /// rolling-row implementation.
    fn lcs_oracle(a: &[u32], b: &[u32]) -> usize {
        fn go(
            a: &[u32],
            b: &[u32],
            i: usize,
            j: usize,
            memo: &mut HashMap<(usize, usize), usize>,
        ) -> usize {
            if i == a.len() || j == b.len() {
                return 0;
            }
            if let Some(&v) = memo.get(&(i, j)) {
                return v;
            }
            let v = if a[i] == b[j] {
                1 + go(a, b, i + 1, j + 1, memo)
            } else {
                go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
            };
            memo.insert((i, j), v);
            v
        }
        go(a, b, 0, 0, &mut HashMap::new())
    }

    fn rouge_via_oracle(cand: &[u32], reference: &[u32]) -> f64 {
        if cand.is_empty() {
            return 0.0;
        }
        let l = lcs_oracle(cand, reference) as f64;
        let p = l / cand.len() as f64;
        let r = l / reference.len() as f64;
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    #[test]
    fn rouge_identical_is_one() {
        let s = [1u32, 2, 3, 4];
        assert_eq!(rouge_l_f(&s, &s).unwrap(), 1.0);
    }

    #[test]
    fn rouge_hand_case_two_thirds() {
        // "a b c" vs "a c d": LCS = 2, P = R = 2/3, F = 2/3
        let cand = ["a", "b", "c"];
        let refr = ["a", "c", "d"];
        let f = rouge_l_f(&cand, &refr).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_empty_candidate_is_zero_empty_reference_errors() {
        assert_eq!(rouge_l_f::<u32>(&[], &[1]).unwrap(), 0.0);
        assert!(rouge_l_f::<u32>(&[1], &[]).is_err());
    }

    #[test]
    fn rouge_matches_dp_oracle_on_100_random_pairs() {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        for _ in 0..100 {
            let n = rng.gen_range(1..30);
            let m = rng.gen_range(1..30);
            let a: Vec<u32> = (0..n).map(|_| rng.gen_range(0..6)).collect();
            let b: Vec<u32> = (0..m).map(|_| rng.gen_range(0..6)).collect();
            let got = rouge_l_f(&a, &b).unwrap();
            let want = rouge_via_oracle(&a, &b);
            assert_eq!(got, want, "mismatch on {a:?} vs {b:?}");
        }
    }

    #[test]
    fn bleu_identical_is_one() {
        let s = [5u32, 6, 7, 8, 9];
        assert!((bleu(&s, &s, 4).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_brevity_hand_case() {
        // cand "a b", ref "a b c d", max_n 2: p1 = p2 = 1, BP = e^{1-2}
        let cand = ["a", "b"];
        let refr = ["a", "b", "c", "d"];
        let got = bleu(&cand, &refr, 2).unwrap();
        assert!((got - (-1.0f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn bleu_disjoint_is_at_smoothing_floor() {
        let cand = [1u32, 2, 3];
        let refr = [7u32, 8, 9];
        assert!(bleu(&cand, &refr, 4).unwrap() <= BLEU_SMOOTH_EPS * 1.01);
    }

    #[test]
    fn normalize_answer_cases() {
        assert_eq!(normalize_answer("Perfect Field!"), vec!["perfect", "field"]);
        assert_eq!(normalize_answer("a reciprocity sheaf"), vec!["reciprocity", "sheaf"]);
        assert_eq!(normalize_answer(""), Vec::<String>::new());
    }

    #[test]
    fn qa_exact_match() {
        let (f1, em) = qa_f1_em("the same answer", "same answer").unwrap();
        assert_eq!(f1, 1.0);
        assert!(em);
    }

    #[test]
    fn qa_paper_example_scores_point_eight() {
        let (f1, em) = qa_f1_em("a reciprocity sheaf", "Every reciprocity sheaf.").unwrap();
        assert!((f1 - 0.8).abs() < 1e-12, "got {f1}");
        assert!(!em);
    }

    #[test]
    fn qa_disjoint_is_zero() {
        let (f1, em) = qa_f1_em("alpha beta", "gamma delta").unwrap();
        assert_eq!(f1, 0.0);
        assert!(!em);
    }

    #[test]
    fn qa_em_implies_f1_one() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let words = ["flux", "margin", "the", "Vekor", "812", "a", "entity"];
        for _ in 0..200 {
            let pick = |rng: &mut ChaCha20Rng| {
                let n = rng.gen_range(1..5);
                (0..n)
                    .map(|_| words[rng.gen_range(0..words.len())])
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            let pred = pick(&mut rng);
            let gold = pick(&mut rng);
            let (f1, em) = qa_f1_em(&pred, &gold).unwrap();
            assert!((0.0..=1.0).contains(&f1));
            if em {
                assert_eq!(f1, 1.0);
            }
        }
    }

    /// Independent normalization built as a character walk rather than a
    /// split/filter pipeline; the brute-force oracle.
    fn normalize_oracle(text: &str) -> Vec<String> {
        let mut words: Vec<String> = Vec::new();
        let mut current = String::new();
        for ch in text.chars() {
            if ch.is_whitespace() {
                if !current.is_empty() {
                    words.push(std::mem::take(&mut current));
                }
            } else if !ch.is_ascii_punctuation() {
                current.extend(ch.to_lowercase());
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
        words.retain(|w| w != "a" && w != "an" && w != "the");
        words
    }

    #[test]
    fn normalization_matches_oracle_on_100_random_pairs() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let alphabet: Vec<char> = "abcThe! .-,AN09()".chars().collect();
        for _ in 0..100 {
            let n = rng.gen_range(0..40);
            let s: String = (0..n).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect();
            assert_eq!(normalize_answer(&s), normalize_oracle(&s), "on {s:?}");
        }
    }

    #[test]
    fn report_macro_averages() {
        let report = MetricReport::from_items(
            &[(1.0, 0.5), (0.0, 0.5)],
            &[(1.0, true), (0.5, false), (0.0, false)],
        );
        assert!((report.rouge_l_f - 0.5).abs() < 1e-12);
        assert!((report.bleu - 0.5).abs() < 1e-12);
        assert!((report.f1 - 0.5).abs() < 1e-12);
        assert!((report.em - 1.0 / 3.0).abs() < 1e-12);
    }
}
