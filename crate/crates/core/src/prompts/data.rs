//! Prompt tables shipped with the crate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Content-free calibration inputs.
pub const CALIBRATION_WORDS: [&str; 10] = ["the", "be", "to", "of", "and", "a", "in", "that", "have", "I"];

const SENTIMENT_JSON: &str = include_str!("../../data/sentiment_prompts.json");
const NER_CONLL_JSON: &str = include_str!("../../data/ner_prompts_conll.json");
const NER_WNUT_JSON: &str = include_str!("../../data/ner_prompts_wnut.json");

/// A pair of questions asking why the input is good (`q1`) or bad (`q0`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SentimentPrompt {
    #[serde(rename = "negative")]
    pub q0: Vec<String>,
    #[serde(rename = "positive")]
    pub q1: Vec<String>,
}

impl SentimentPrompt {
    pub fn validate(&self) -> Result<()> {
        if self.q0.is_empty() || self.q1.is_empty() {
            return Err(Error::Validation("sentiment prompt question is empty".into()));
        }
        let lower = |q: &[String]| q.iter().map(|w| w.to_lowercase()).collect::<Vec<_>>();
        if lower(&self.q0) == lower(&self.q1) {
            return Err(Error::Validation("sentiment prompt questions must differ".into()));
        }
        Ok(())
    }

    /// Literal token replacement, e.g. `movie` → `product`.
    pub fn substitute(&self, from: &str, to: &str) -> Self {
        let sub = |q: &[String]| {
            q.iter()
                .map(|w| if w.eq_ignore_ascii_case(from) { to.to_string() } else { w.clone() })
                .collect()
        };
        Self { q0: sub(&self.q0), q1: sub(&self.q1) }
    }
}

/// Entity type (or `O`) → question tokens.
pub type PromptMap = BTreeMap<String, Vec<String>>;

pub fn parse_sentiment_prompts(text: &str) -> Result<Vec<SentimentPrompt>> {
    let prompts: Vec<SentimentPrompt> =
        serde_json::from_str(text).map_err(|e| Error::Parse { line: e.line(), message: e.to_string() })?;
    if prompts.is_empty() {
        return Err(Error::Validation("no sentiment prompts".into()));
    }
    for p in &prompts {
        p.validate()?;
    }
    Ok(prompts)
}

pub fn parse_prompt_map(text: &str) -> Result<PromptMap> {
    let map: PromptMap =
        serde_json::from_str(text).map_err(|e| Error::Parse { line: e.line(), message: e.to_string() })?;
    if let Some((k, _)) = map.iter().find(|(_, q)| q.is_empty()) {
        return Err(Error::Validation(format!("prompt for {k:?} is empty")));
    }
    Ok(map)
}

pub fn bundled_sentiment_prompts() -> Vec<SentimentPrompt> {
    parse_sentiment_prompts(SENTIMENT_JSON).expect("bundled sentiment prompts are valid")
}

pub fn bundled_conll_prompts() -> PromptMap {
    parse_prompt_map(NER_CONLL_JSON).expect("bundled CoNLL prompts are valid")
}

pub fn bundled_wnut_prompts() -> PromptMap {
    parse_prompt_map(NER_WNUT_JSON).expect("bundled WNUT prompts are valid")
}

/// Every word used by the bundled prompt tables, including the product
/// substitution.
pub fn bundled_prompt_words() -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    for p in bundled_sentiment_prompts() {
        words.extend(p.q0.into_iter().chain(p.q1));
    }
    for q in bundled_conll_prompts().into_values().chain(bundled_wnut_prompts().into_values()) {
        words.extend(q);
    }
    words.push("product".into());
    words.into_iter().map(|w| w.to_lowercase()).collect()
}
