use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocabulary};
use crate::error::{Error, Result};

/// Token ids with `[BOS]` at position 0.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Result<Self> {
        if ids.first() != Some(&TokenId::BOS) {
            return Err(Error::invalid("token sequence must start with [BOS]"));
        }
        Ok(Self { ids })
    }

    /// Prepends `[BOS]` to `body`.
    pub fn from_body(body: impl IntoIterator<Item = TokenId>) -> Self {
        let ids = std::iter::once(TokenId::BOS).chain(body).collect();
        Self { ids }
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    /// Ids without the leading `[BOS]`.
    pub fn body(&self) -> &[TokenId] {
        &self.ids[1..]
    }

    pub fn indices(&self) -> Vec<usize> {
        self.ids.iter().map(|t| t.index()).collect()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn ensure_max_len(&self, max: usize) -> Result<()> {
        if self.ids.len() > max {
            return Err(Error::invalid(format!(
                "sequence of length {} exceeds the maximum of {max}",
                self.ids.len()
            )));
        }
        Ok(())
    }
}

/// Inclusive token span that never covers the `[BOS]` position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    /// Validates `0 < start <= end < seq_len`.
    pub fn new(start: usize, end: usize, seq_len: usize) -> Result<Self> {
        if start == 0 || start > end || end >= seq_len {
            return Err(Error::invalid(format!(
                "span [{start}, {end}] invalid for sequence of length {seq_len}"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Splits on whitespace, lowercases, maps to ids and prepends `[BOS]`.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> TokenSequence {
    tokenize_words(text.split_whitespace(), vocab)
}

/// Like [`tokenize`] for text that is already split into words.
pub fn tokenize_words<I, S>(words: I, vocab: &Vocabulary) -> TokenSequence
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    TokenSequence::from_body(words.into_iter().map(|w| vocab.lookup(w.as_ref())))
}

/// Space-joined tokens without `[BOS]`.
pub fn detokenize(seq: &TokenSequence, vocab: &Vocabulary) -> String {
    detokenize_ids(seq.body(), vocab)
}

pub fn detokenize_ids(ids: &[TokenId], vocab: &Vocabulary) -> String {
    ids.iter()
        .map(|id| vocab.token(*id).unwrap_or(super::vocab::UNK))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Lowercased whitespace tokens; the normalization shared by tokenization and
/// answer comparison.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Token ranges of sentences, split after `.`, `!` or `?`. A trailing run
/// without terminal punctuation forms the last sentence.
pub fn split_sentences<S: AsRef<str>>(tokens: &[S]) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, t) in tokens.iter().enumerate() {
        if matches!(t.as_ref(), "." | "!" | "?") {
            out.push(start..i + 1);
            start = i + 1;
        }
    }
    if start < tokens.len() {
        out.push(start..tokens.len());
    }
    out
}

/// Greedy passage construction: each chunk takes consecutive sentences while
/// the running token total stays within `max_len`.
pub fn chunk_passages(sentence_lengths: &[usize], max_len: usize) -> Result<Vec<Vec<usize>>> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let mut chunks: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut total = 0;
    for (i, &len) in sentence_lengths.iter().enumerate() {
        if len > max_len {
            return Err(Error::OversizedSentence { index: i, len, max: max_len });
        }
        if !current.is_empty() && total + len > max_len {
            chunks.push(std::mem::take(&mut current));
            total = 0;
        }
        current.push(i);
        total += len;
    }
    if !current.is_empty() {
        chunks.push(current);
    }
    Ok(chunks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["the", "cat", "sat", "on", "mat"])
    }

    #[test]
    fn tokenize_examples() {
        let v = vocab();
        assert_eq!(tokenize("", &v).ids(), &[TokenId::BOS]);
        assert_eq!(tokenize("the cat", &v).ids(), &[TokenId::BOS, v.id("the"), v.id("cat")]);
        assert_eq!(tokenize("The zzzqx", &v).ids(), &[TokenId::BOS, v.id("the"), TokenId::UNK]);
        assert_eq!(tokenize("cat [BLANK]", &v).ids(), &[TokenId::BOS, v.id("cat"), TokenId::BLANK]);
    }

    #[test]
    fn chunk_examples() {
        assert_eq!(chunk_passages(&[200, 200, 100], 456).unwrap(), vec![vec![0, 1], vec![2]]);
        assert_eq!(chunk_passages(&[456], 456).unwrap(), vec![vec![0]]);
        assert_eq!(
            chunk_passages(&[100, 100, 100, 100, 100], 456).unwrap(),
            vec![vec![0, 1, 2, 3], vec![4]]
        );
        assert!(matches!(
            chunk_passages(&[10, 457], 456),
            Err(Error::OversizedSentence { index: 1, .. })
        ));
    }

    #[test]
    fn span_rejects_bos_and_out_of_range() {
        assert!(Span::new(0, 0, 5).is_err());
        assert!(Span::new(2, 1, 5).is_err());
        assert!(Span::new(1, 5, 5).is_err());
        assert_eq!(Span::new(1, 4, 5).unwrap().len(), 4);
    }

    #[test]
    fn sentences_split_on_terminal_punctuation() {
        let toks = ["a", "b", ".", "c", "?", "d"];
        assert_eq!(split_sentences(&toks), vec![0..3, 3..5, 5..6]);
    }

    proptest! {
        #[test]
        fn detokenize_round_trips_in_vocab_text(words in proptest::collection::vec(0usize..5, 0..20)) {
            let v = vocab();
            let pool = ["the", "cat", "sat", "on", "mat"];
            let text = words.iter().map(|&i| pool[i]).collect::<Vec<_>>().join(" ");
            prop_assert_eq!(detokenize(&tokenize(&text, &v), &v), text);
        }

        #[test]
        fn chunks_respect_limit_and_order(lens in proptest::collection::vec(1usize..50, 0..40), max in 50usize..120) {
            let chunks = chunk_passages(&lens, max).unwrap();
            let flat: Vec<usize> = chunks.iter().flatten().copied().collect();
            prop_assert_eq!(flat, (0..lens.len()).collect::<Vec<_>>());
            for c in &chunks {
                prop_assert!(c.iter().map(|&i| lens[i]).sum::<usize>() <= max);
            }
            // maximality: the next sentence would not have fit
            for w in chunks.windows(2) {
                let total: usize = w[0].iter().map(|&i| lens[i]).sum();
                prop_assert!(total + lens[w[1][0]] > max);
            }
        }
    }
}
