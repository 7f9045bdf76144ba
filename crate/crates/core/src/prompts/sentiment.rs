//! Zero-shot sentiment from a pair of questions, with content-free
//! calibration and answer-span rationales.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::SentimentPrompt;
use crate::corpus::dataset::{parse_jsonl, write_jsonl};
use crate::corpus::{detokenize_ids, tokenize_words, Span, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::student::{encode_passage, question_embed, QuestionEmbedding, StudentModel};
use crate::synth::SentimentRecord;

/// Parses labeled-sentence JSONL: `{"tokens": [...], "label": 0|1}` per line.
pub fn parse_sentiment_data(text: &str) -> Result<Vec<SentimentRecord>> {
    let records: Vec<SentimentRecord> = parse_jsonl(text)?;
    for (i, r) in records.iter().enumerate() {
        if r.tokens.is_empty() {
            return Err(Error::Validation(format!("sentiment record {}: no tokens", i + 1)));
        }
        if r.label > 1 {
            return Err(Error::Validation(format!("sentiment record {}: label must be 0 or 1", i + 1)));
        }
    }
    Ok(records)
}

pub fn read_sentiment_data(path: &Path) -> Result<Vec<SentimentRecord>> {
    parse_sentiment_data(&std::fs::read_to_string(path)?)
}

pub fn write_sentiment_data(path: &Path, records: &[SentimentRecord]) -> Result<()> {
    write_jsonl(path, records)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `max_i r_i·f_start + max_i r_i·f_end` over every row, `[BOS]` included.
pub fn score_reps(reps: &Matrix, qe: &QuestionEmbedding) -> f64 {
    let best = |f: &[f64]| (0..reps.rows()).map(|i| dot(reps.row(i), f)).fold(f64::NEG_INFINITY, f64::max);
    best(&qe.f_start) + best(&qe.f_end)
}

pub fn sentiment_score(model: &StudentModel, x: &TokenSequence, q: &TokenSequence) -> Result<f64> {
    if x.len() < 2 {
        return Err(Error::invalid("sentiment input has no tokens"));
    }
    Ok(score_reps(&encode_passage(model, x)?, &question_embed(model, q)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConstants {
    pub c0: f64,
    pub c1: f64,
    /// Digest of the sorted word list.
    pub word_list_id: String,
}

/// Order-independent mean: scores are summed in sorted order.
fn stable_mean(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn word_list_id<S: AsRef<str>>(words: &[S]) -> String {
    let mut sorted: Vec<&str> = words.iter().map(AsRef::as_ref).collect();
    sorted.sort_unstable();
    hex::encode(&Sha256::digest(sorted.join("\n").as_bytes())[..8])
}

/// `C_y` is the mean score of `q_y` over the single-word inputs `W`.
pub fn compute_calibration<S: AsRef<str>>(model: &StudentModel, vocab: &Vocabulary, prompt: &SentimentPrompt, words: &[S]) -> Result<CalibrationConstants> {
    if words.is_empty() {
        return Err(Error::invalid("calibration word list is empty"));
    }
    let q0 = question_embed(model, &tokenize_words(&prompt.q0, vocab))?;
    let q1 = question_embed(model, &tokenize_words(&prompt.q1, vocab))?;
    let mut s0 = Vec::with_capacity(words.len());
    let mut s1 = Vec::with_capacity(words.len());
    for w in words {
        let reps = encode_passage(model, &tokenize_words([w.as_ref()], vocab))?;
        s0.push(score_reps(&reps, &q0));
        s1.push(score_reps(&reps, &q1));
    }
    Ok(CalibrationConstants { c0: stable_mean(s0), c1: stable_mean(s1), word_list_id: word_list_id(words) })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentimentDecision {
    pub label: u8,
    /// `(S1 − C1) − (S0 − C0)`.
    pub margin: f64,
}

/// Label 1 only when the calibrated positive score is strictly higher.
pub fn decide(s0: f64, s1: f64, c0: f64, c1: f64) -> SentimentDecision {
    let margin = (s1 - c1) - (s0 - c0);
    SentimentDecision { label: u8::from(margin > 0.0), margin }
}

pub fn predict_sentiment(model: &StudentModel, vocab: &Vocabulary, x: &TokenSequence, prompt: &SentimentPrompt, c: &CalibrationConstants) -> Result<SentimentDecision> {
    if x.len() < 2 {
        return Err(Error::invalid("sentiment input has no tokens"));
    }
    let reps = encode_passage(model, x)?;
    let s0 = score_reps(&reps, &question_embed(model, &tokenize_words(&prompt.q0, vocab))?);
    let s1 = score_reps(&reps, &question_embed(model, &tokenize_words(&prompt.q1, vocab))?);
    Ok(decide(s0, s1, c.c0, c.c1))
}

/// Best `(i, j)` under `start[i] + end[j]` with `1 <= i <= j < i + max_tokens`;
/// ties keep the smaller `i`, then the smaller `j`.
pub fn best_span(start: &[f64], end: &[f64], max_tokens: usize) -> Result<(Span, f64)> {
    if max_tokens == 0 {
        return Err(Error::invalid("max_tokens must be at least 1"));
    }
    if start.len() != end.len() || start.len() < 2 {
        return Err(Error::invalid("need equal-length scores with at least one token after [BOS]"));
    }
    let mut best: Option<(Span, f64)> = None;
    for i in 1..start.len() {
        for j in i..start.len().min(i + max_tokens) {
            let v = start[i] + end[j];
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((Span { start: i, end: j }, v));
            }
        }
    }
    Ok(best.expect("at least one span"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rationale {
    pub span: Span,
    pub score: f64,
    pub text: String,
}

pub fn extract_rationale(model: &StudentModel, vocab: &Vocabulary, x: &TokenSequence, q: &TokenSequence, max_tokens: usize) -> Result<Rationale> {
    let reps = encode_passage(model, x)?;
    let qe = question_embed(model, q)?;
    let start: Vec<f64> = (0..reps.rows()).map(|i| dot(reps.row(i), &qe.f_start)).collect();
    let end: Vec<f64> = (0..reps.rows()).map(|i| dot(reps.row(i), &qe.f_end)).collect();
    let (span, score) = best_span(&start, &end, max_tokens)?;
    Ok(Rationale { span, score, text: detokenize_ids(&x.ids()[span.start..=span.end], vocab) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptResult {
    pub prompt: usize,
    pub accuracy: f64,
    pub calibration: CalibrationConstants,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentimentReport {
    pub mean_accuracy: f64,
    pub per_prompt: Vec<PromptResult>,
    /// Rationale for the first input under the first prompt's winning question.
    pub example_rationale: Option<Rationale>,
}

pub fn evaluate_sentiment<S: AsRef<str>>(
    model: &StudentModel,
    vocab: &Vocabulary,
    prompts: &[SentimentPrompt],
    data: &[SentimentRecord],
    words: &[S],
) -> Result<SentimentReport> {
    if prompts.is_empty() || data.is_empty() {
        return Err(Error::invalid("need at least one prompt and one input"));
    }
    let inputs: Vec<TokenSequence> = data.iter().map(|r| tokenize_words(&r.tokens, vocab)).collect();
    let mut per_prompt = Vec::with_capacity(prompts.len());
    let mut example_rationale = None;
    for (k, prompt) in prompts.iter().enumerate() {
        prompt.validate()?;
        let c = compute_calibration(model, vocab, prompt, words)?;
        let mut correct = 0;
        for (i, (x, r)) in inputs.iter().zip(data).enumerate() {
            let d = predict_sentiment(model, vocab, x, prompt, &c)?;
            correct += usize::from(d.label == r.label);
            if k == 0 && i == 0 {
                let q = if d.label == 1 { &prompt.q1 } else { &prompt.q0 };
                example_rationale = Some(extract_rationale(model, vocab, x, &tokenize_words(q, vocab), 5)?);
            }
        }
        per_prompt.push(PromptResult { prompt: k, accuracy: correct as f64 / data.len() as f64, calibration: c });
    }
    let mean_accuracy = per_prompt.iter().map(|p| p.accuracy).sum::<f64>() / per_prompt.len() as f64;
    Ok(SentimentReport { mean_accuracy, per_prompt, example_rationale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, MIN_POSITIONS};
    use crate::prompts::{bundled_sentiment_prompts, CALIBRATION_WORDS};
    use crate::synth::world_vocabulary;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (StudentModel, Vocabulary) {
        let vocab = world_vocabulary();
        let cfg = EncoderConfig { d_model: 8, n_layers: 2, n_heads: 2, ffn_width: 12, max_positions: MIN_POSITIONS, dropout: 0.0, vocab_size: vocab.len() };
        (StudentModel::new(&cfg, 4).unwrap(), vocab)
    }

    fn brute(start: &[f64], end: &[f64], max: usize) -> Span {
        let mut all = Vec::new();
        for i in 1..start.len() {
            for j in i..start.len() {
                if j - i < max {
                    all.push((start[i] + end[j], i, j));
                }
            }
        }
        let best = all.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
        let &(_, i, j) = all.iter().find(|t| t.0 == best).unwrap();
        Span { start: i, end: j }
    }

    #[test]
    fn best_span_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..500 {
            let n = rng.random_range(2..15);
            let max = rng.random_range(1..7);
            // small integer grid so ties occur
            let start: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(-3i32..4))).collect();
            let end: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(-3i32..4))).collect();
            let (span, _) = best_span(&start, &end, max).unwrap();
            assert_eq!(span, brute(&start, &end, max));
            assert!(span.start >= 1);
        }
        let (one, _) = best_span(&[9.0, 1.0, 3.0, 2.0], &[9.0, 1.0, 0.5, 2.5], 1).unwrap();
        assert_eq!(one, Span { start: 3, end: 3 });
    }

    #[test]
    fn score_is_additive() {
        let reps = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![-1.0, 1.0]]);
        let qe = QuestionEmbedding { f_start: vec![1.0, 1.0], f_end: vec![-1.0, 0.5] };
        assert_eq!(score_reps(&reps, &qe), 2.0 + 1.5);
    }

    #[test]
    fn calibration_properties() {
        let (model, vocab) = setup();
        let prompt = &bundled_sentiment_prompts()[0];
        let c = compute_calibration(&model, &vocab, prompt, &CALIBRATION_WORDS).unwrap();
        let mut rev = CALIBRATION_WORDS.to_vec();
        rev.reverse();
        assert_eq!(c, compute_calibration(&model, &vocab, prompt, &rev).unwrap());
        let q1 = tokenize_words(&prompt.q1, &vocab);
        let dev: f64 = CALIBRATION_WORDS
            .iter()
            .map(|w| sentiment_score(&model, &tokenize_words([*w], &vocab), &q1).unwrap() - c.c1)
            .sum::<f64>()
            / 10.0;
        assert!(dev.abs() <= 1e-9);
        assert!(compute_calibration::<&str>(&model, &vocab, prompt, &[]).is_err());
    }

    #[test]
    fn decisions() {
        assert_eq!(decide(1.0, 2.0, 0.0, 0.0).label, 1);
        assert_eq!(decide(1.0, 1.0, 0.5, 0.5).label, 0);
        let d = decide(0.3, 0.9, 0.1, 0.2);
        let k = 17.5;
        assert_eq!(decide(0.3 + k, 0.9 + k, 0.1, 0.2).label, d.label);
        assert_eq!(decide(0.9, 0.3, 0.2, 0.1).margin, -d.margin);
    }

    #[test]
    fn end_to_end_runs() {
        let (model, vocab) = setup();
        let prompts: Vec<_> = bundled_sentiment_prompts().iter().map(|p| p.substitute("movie", "product")).collect();
        let data = vec![
            SentimentRecord { tokens: vec!["great".into(), "product".into()], label: 1 },
            SentimentRecord { tokens: vec!["awful".into(), "product".into()], label: 0 },
        ];
        let r = evaluate_sentiment(&model, &vocab, &prompts, &data, &CALIBRATION_WORDS).unwrap();
        assert_eq!(r.per_prompt.len(), 6);
        let rat = r.example_rationale.unwrap();
        assert!(rat.span.start >= 1 && rat.span.end - rat.span.start < 5);
    }

    #[test]
    fn sentiment_jsonl() {
        let recs = parse_sentiment_data("{\"tokens\": [\"great\"], \"label\": 1}\n\n").unwrap();
        assert_eq!(recs.len(), 1);
        assert!(matches!(parse_sentiment_data("{\"tokens\": [\"x\"], \"label\": 2}"), Err(Error::Validation(_))));
        assert!(matches!(parse_sentiment_data("{\"tokens\": [], \"label\": 0}"), Err(Error::Validation(_))));
        assert!(matches!(parse_sentiment_data("{\"tokens\": 3}"), Err(Error::Parse { line: 1, .. })));
    }
}
