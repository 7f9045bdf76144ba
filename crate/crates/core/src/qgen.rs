//! Question–answer synthesis: rule-based templates, cloze-noise pseudo
//! questions, and nucleus sampling for generative backends.

use std::collections::{BTreeSet, HashMap};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{split_sentences, Passage, PassageRecord, QaEntry, Span, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::ProbabilityVector;
use crate::seed::rng_for;

pub const DEFAULT_QUESTIONS_PER_PASSAGE: usize = 10;
pub const DEFAULT_NUCLEUS_P: f64 = 0.6;
pub const DEFAULT_CLOZE_DROP: f64 = 0.2;

const FUNCTION_WORDS: [&str; 4] = ["in", "the", "a", "an"];
const DETERMINERS: [&str; 3] = ["the", "a", "an"];
const STOPWORDS: [&str; 20] = [
    "the", "a", "an", "of", "and", "to", "in", "on", "at", "by", "for", "with", "from", "that", "be",
    "have", "i", "is", "was", "it",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    #[default]
    Rule,
    Cloze,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub questions_per_passage: usize,
    pub nucleus_p: f64,
    #[serde(skip)]
    pub seed: u64,
    /// Keep at most one candidate per distinct answer string.
    pub dedup_answers: bool,
    pub cloze_drop: f64,
    pub max_question_tokens: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            questions_per_passage: DEFAULT_QUESTIONS_PER_PASSAGE,
            nucleus_p: DEFAULT_NUCLEUS_P,
            seed: 0,
            dedup_answers: false,
            cloze_drop: DEFAULT_CLOZE_DROP,
            max_question_tokens: crate::corpus::dataset::DEFAULT_MAX_QUESTION_TOKENS,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.questions_per_passage == 0 {
            return Err(Error::config("questions_per_passage must be at least 1"));
        }
        if !(self.nucleus_p > 0.0 && self.nucleus_p <= 1.0) {
            return Err(Error::config(format!("nucleus_p {} outside (0, 1]", self.nucleus_p)));
        }
        if !(0.0..=1.0).contains(&self.cloze_drop) {
            return Err(Error::config(format!("cloze_drop {} outside [0, 1]", self.cloze_drop)));
        }
        if self.max_question_tokens < 2 {
            return Err(Error::config("max_question_tokens must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedQA {
    pub passage_id: String,
    /// Question words, without `[BOS]`.
    pub question: Vec<String>,
    pub answer_text: String,
    pub answer_span: Option<Span>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AnswerType {
    Who,
    What,
    When,
}

impl AnswerType {
    pub fn wh_word(self) -> &'static str {
        match self {
            AnswerType::Who => "who",
            AnswerType::What => "what",
            AnswerType::When => "when",
        }
    }
}

/// A candidate answer: passage-sequence span (1-based, `[BOS]` at 0).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Candidate {
    pub start: usize,
    pub end: usize,
    pub kind: AnswerType,
    pub sentence: usize,
}

fn is_capitalized(w: &str) -> bool {
    w.chars().next().is_some_and(char::is_uppercase)
}

fn is_numeric(w: &str) -> bool {
    !w.is_empty() && w.chars().all(|c| c.is_ascii_digit())
}

/// Candidate answer spans in passage order.
pub fn candidates(words: &[String]) -> Vec<Candidate> {
    let mut out = BTreeSet::new();
    for (si, range) in split_sentences(words).into_iter().enumerate() {
        let mut i = range.start;
        while i < range.end {
            let w = &words[i];
            if is_capitalized(w) {
                let mut j = i;
                while j + 1 < range.end && is_capitalized(&words[j + 1]) {
                    j += 1;
                }
                let mut s = i;
                while s <= j && FUNCTION_WORDS.contains(&words[s].to_lowercase().as_str()) {
                    s += 1;
                }
                if s <= j {
                    out.insert(Candidate { start: s + 1, end: j + 1, kind: AnswerType::Who, sentence: si });
                    i = j + 1;
                    continue;
                }
            }
            if is_numeric(w) {
                out.insert(Candidate { start: i + 1, end: i + 1, kind: AnswerType::When, sentence: si });
            } else if DETERMINERS.contains(&w.to_lowercase().as_str()) && i + 1 < range.end {
                let next = &words[i + 1];
                if next.chars().all(char::is_alphabetic)
                    && !is_capitalized(next)
                    && !STOPWORDS.contains(&next.as_str())
                {
                    out.insert(Candidate { start: i + 2, end: i + 2, kind: AnswerType::What, sentence: si });
                }
            }
            i += 1;
        }
    }
    out.into_iter().collect()
}

fn lower(words: &[String]) -> Vec<String> {
    words.iter().map(|w| w.to_lowercase()).collect()
}

/// The unique occurrence of `answer` in `words`, as a passage-sequence span.
pub fn unique_span(words: &[String], answer: &[String]) -> Option<Span> {
    if answer.is_empty() || answer.len() > words.len() {
        return None;
    }
    let lw = lower(words);
    let mut hits = lw.windows(answer.len()).enumerate().filter(|(_, w)| *w == answer);
    let (first, _) = hits.next()?;
    if hits.next().is_some() {
        return None;
    }
    Some(Span { start: first + 1, end: first + answer.len() })
}

fn select(cands: Vec<Candidate>, words: &[String], config: &GeneratorConfig, passage_id: &str) -> Vec<Candidate> {
    let mut cands = cands;
    if config.dedup_answers {
        let mut seen = BTreeSet::new();
        cands.retain(|c| seen.insert(lower(&words[c.start - 1..c.end])));
    }
    let n = config.questions_per_passage.min(cands.len());
    let mut rng = rng_for(config.seed, passage_id);
    let mut picked: Vec<usize> = sample(&mut rng, cands.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| cands[i]).collect()
}

fn check_passage(passage: &Passage) -> Result<()> {
    if passage.words.len() < 3 {
        return Err(Error::invalid(format!(
            "passage {:?} has {} tokens; at least 3 are required",
            passage.id,
            passage.words.len()
        )));
    }
    Ok(())
}

fn finish(passage: &Passage, c: &Candidate, question: Vec<String>) -> GeneratedQA {
    let answer = lower(&passage.words[c.start - 1..c.end]);
    let span = unique_span(&passage.words, &answer);
    if span.is_none() {
        log::debug!("passage {}: answer {:?} is ambiguous; no span", passage.id, answer.join(" "));
    }
    GeneratedQA { passage_id: passage.id.clone(), question, answer_text: answer.join(" "), answer_span: span }
}

/// Template questions: the wh-word followed by the rest of the answer's
/// sentence, lowercased, with terminal punctuation replaced by `?`.
pub fn generate_rule_based(passage: &Passage, config: &GeneratorConfig) -> Result<Vec<GeneratedQA>> {
    config.validate()?;
    check_passage(passage)?;
    let cands = candidates(&passage.words);
    if cands.is_empty() {
        log::info!("passage {}: no answer candidates", passage.id);
        return Ok(Vec::new());
    }
    let sentences = split_sentences(&passage.words);
    let out = select(cands, &passage.words, config, &passage.id)
        .into_iter()
        .map(|c| {
            let range = sentences[c.sentence].clone();
            let mut q = vec![c.kind.wh_word().to_string()];
            q.extend(
                range
                    .filter(|&i| i + 1 < c.start || i + 1 > c.end)
                    .map(|i| passage.words[i].to_lowercase())
                    .filter(|w| !matches!(w.as_str(), "." | "!" | "?")),
            );
            q.truncate(config.max_question_tokens - 1);
            q.push("?".into());
            finish(passage, &c, q)
        })
        .collect();
    Ok(out)
}

/// UnsupervisedQA-style pseudo questions: the answer's sentence with the span
/// replaced by `[BLANK]` and every other token dropped with `cloze_drop`.
pub fn generate_cloze_noise(passage: &Passage, config: &GeneratorConfig) -> Result<Vec<GeneratedQA>> {
    config.validate()?;
    check_passage(passage)?;
    let cands = candidates(&passage.words);
    if cands.is_empty() {
        log::info!("passage {}: no answer candidates", passage.id);
        return Ok(Vec::new());
    }
    let sentences = split_sentences(&passage.words);
    let mut rng = rng_for(config.seed, &format!("cloze:{}", passage.id));
    let out = select(cands, &passage.words, config, &passage.id)
        .into_iter()
        .map(|c| {
            let mut q = Vec::new();
            for i in sentences[c.sentence].clone() {
                let pos = i + 1;
                if pos == c.start {
                    q.push(crate::corpus::vocab::BLANK.to_string());
                } else if (pos < c.start || pos > c.end) && rng.random::<f64>() >= config.cloze_drop {
                    q.push(passage.words[i].to_lowercase());
                }
            }
            q.truncate(config.max_question_tokens);
            finish(passage, &c, q)
        })
        .collect();
    Ok(out)
}

pub fn generate(kind: GeneratorKind, passage: &Passage, config: &GeneratorConfig) -> Result<Vec<GeneratedQA>> {
    match kind {
        GeneratorKind::Rule => generate_rule_based(passage, config),
        GeneratorKind::Cloze => generate_cloze_noise(passage, config),
    }
}

/// Dataset records for generated questions; qids are `<passage>-g<k>`.
pub fn to_record(passage: &Passage, qas: &[GeneratedQA]) -> PassageRecord {
    PassageRecord {
        id: passage.id.clone(),
        context: passage.words.clone(),
        qas: qas
            .iter()
            .enumerate()
            .map(|(k, qa)| QaEntry {
                qid: format!("{}-g{k}", passage.id),
                question: qa.question.clone(),
                answers: vec![qa.answer_text.clone()],
                span: qa.answer_span.map(|s| [s.start, s.end]),
            })
            .collect(),
    }
}

/// Top-p filtering: keep the smallest highest-probability prefix with mass at
/// least `p` (ties by lower index), then renormalize.
pub fn nucleus_filter(probs: &ProbabilityVector, p: f64) -> Result<ProbabilityVector> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(format!("nucleus p {p} outside (0, 1]")));
    }
    let v = probs.as_slice();
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    let mut keep = Vec::new();
    let mut mass = 0.0;
    for &i in &order {
        keep.push(i);
        mass += v[i];
        if mass >= p {
            break;
        }
    }
    if keep.len() == v.len() || v.iter().enumerate().all(|(i, &x)| x == 0.0 || keep.contains(&i)) {
        return Ok(probs.clone());
    }
    let mut out = vec![0.0; v.len()];
    for &i in &keep {
        out[i] = v[i] / mass;
    }
    ProbabilityVector::new(out)
}

/// A generative model decoding `answer [SEP] question` given a passage.
pub trait SequenceBackend {
    fn next_token_distribution(&self, passage: &Passage, prefix: &[TokenId]) -> Result<ProbabilityVector>;
}

/// Nucleus-samples one `answer [SEP] question` sequence and splits it.
/// Returns `None` when the sample has no separator or an empty part.
pub fn sample_with_backend<B: SequenceBackend + ?Sized, R: Rng + ?Sized>(
    backend: &B,
    passage: &Passage,
    vocab: &Vocabulary,
    config: &GeneratorConfig,
    max_tokens: usize,
    end_token: TokenId,
    rng: &mut R,
) -> Result<Option<GeneratedQA>> {
    let mut prefix: Vec<TokenId> = Vec::new();
    while prefix.len() < max_tokens {
        let dist = nucleus_filter(&backend.next_token_distribution(passage, &prefix)?, config.nucleus_p)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = dist.argmax();
        for (i, &q) in dist.as_slice().iter().enumerate() {
            acc += q;
            if q > 0.0 && u < acc {
                pick = i;
                break;
            }
        }
        let tok = TokenId(pick as u32);
        if tok == end_token {
            break;
        }
        prefix.push(tok);
    }
    let Some(sep) = prefix.iter().position(|&t| t == TokenId::SEP) else {
        return Ok(None);
    };
    let word = |t: &TokenId| vocab.token(*t).unwrap_or(crate::corpus::vocab::UNK).to_string();
    let answer: Vec<String> = prefix[..sep].iter().map(word).collect();
    let question: Vec<String> = prefix[sep + 1..].iter().map(word).collect();
    if answer.is_empty() || question.is_empty() {
        return Ok(None);
    }
    let span = unique_span(&passage.words, &answer);
    Ok(Some(GeneratedQA {
        passage_id: passage.id.clone(),
        question,
        answer_text: answer.join(" "),
        answer_span: span,
    }))
}

/// Counts generated items per passage id.
pub fn per_passage_counts(qas: &[GeneratedQA]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for qa in qas {
        *m.entry(qa.passage_id.as_str()).or_insert(0) += 1;
    }
    m
}
