//! Question-prompt consumers: prompt-initialized BIO NER and calibrated
//! zero-shot sentiment.

pub mod data;
pub mod ner;
pub mod sentiment;

pub use data::{
    bundled_conll_prompts, bundled_prompt_words, bundled_sentiment_prompts, bundled_wnut_prompts,
    parse_prompt_map, parse_sentiment_prompts, PromptMap, SentimentPrompt, CALIBRATION_WORDS,
};
