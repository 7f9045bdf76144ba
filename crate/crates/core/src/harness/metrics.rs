//! Extractive QA scoring.
//!
//! Normalization is lowercase plus whitespace tokenization, matching the
//! tokenizer. Articles and punctuation are kept: tokens never carry attached
//! punctuation, so nothing needs stripping.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub fn normalize_answer(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// 1.0 when `pred` equals any gold answer after normalization, else 0.0.
pub fn exact_match<S: AsRef<str>>(pred: &str, golds: &[S]) -> f64 {
    let p = normalize_answer(pred);
    if golds.iter().any(|g| normalize_answer(g.as_ref()) == p) {
        1.0
    } else {
        0.0
    }
}

fn f1_single(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for g in gold {
        *counts.entry(g).or_default() += 1;
    }
    let mut common = 0usize;
    for p in pred {
        if let Some(c) = counts.get_mut(p.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Best token-multiset F1 against any gold answer.
pub fn token_f1<S: AsRef<str>>(pred: &str, golds: &[S]) -> f64 {
    let p = normalize_answer(pred);
    golds
        .iter()
        .map(|g| f1_single(&p, &normalize_answer(g.as_ref())))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QaScores {
    pub exact_match: f64,
    pub f1: f64,
    pub count: usize,
}

/// Mean EM and F1 (as percentages) over `(prediction, golds)` items.
pub fn score_predictions<S: AsRef<str>>(items: &[(String, Vec<S>)]) -> QaScores {
    if items.is_empty() {
        return QaScores::default();
    }
    let n = items.len() as f64;
    let em: f64 = items.iter().map(|(p, g)| exact_match(p, g)).sum();
    let f1: f64 = items.iter().map(|(p, g)| token_f1(p, g)).sum();
    QaScores { exact_match: 100.0 * em / n, f1: 100.0 * f1 / n, count: items.len() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(exact_match("the cat", &["cat"]), 0.0);
        assert!((token_f1("the cat", &["cat"]) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(exact_match("Marie Curie", &["marie  curie"]), 1.0);
        assert_eq!(token_f1("marie curie", &["marie curie"]), 1.0);
        assert_eq!(exact_match("", &["x"]), 0.0);
        assert_eq!(token_f1("", &["x"]), 0.0);
        assert_eq!(token_f1("a b", &["c", "b a"]), 1.0);
    }

    #[test]
    fn aggregate() {
        let s = score_predictions(&[("a".to_string(), vec!["a"]), ("b c".to_string(), vec!["c"])]);
        assert_eq!(s.count, 2);
        assert!((s.exact_match - 50.0).abs() < 1e-12);
        assert!((s.f1 - 100.0 * (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }
}
