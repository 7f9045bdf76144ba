//! BIO tagging with an output layer that can start from question prompts.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::PromptMap;
use crate::corpus::dataset::{parse_jsonl, write_jsonl};
use crate::corpus::{tokenize_words, TokenSequence, Vocabulary};
use crate::encoder::{Encoder, Mode, INIT_STD};
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Matrix, ParamId, ParamStore, ParamVars, Tape, Var};
use crate::student::{encode_passage, question_embed, StudentModel};
use crate::synth::NerRecord;

pub const OUTSIDE: &str = "O";

/// Ordered BIO tags; index 0 is always `O`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagSet {
    tags: Vec<String>,
}

impl TagSet {
    /// `O` followed by `B-t`, `I-t` for each type in order.
    pub fn from_types<S: AsRef<str>>(types: &[S]) -> Self {
        let mut tags = vec![OUTSIDE.to_string()];
        for t in types {
            tags.push(format!("B-{}", t.as_ref()));
            tags.push(format!("I-{}", t.as_ref()));
        }
        Self { tags }
    }

    pub fn new(tags: Vec<String>) -> Result<Self> {
        if tags.first().map(String::as_str) != Some(OUTSIDE) {
            return Err(Error::config("tag set must start with O"));
        }
        let set: BTreeSet<&str> = tags.iter().map(String::as_str).collect();
        if set.len() != tags.len() {
            return Err(Error::config("duplicate tags"));
        }
        for t in &tags[1..] {
            match split_tag(t) {
                Some(('I', ty)) if !set.contains(format!("B-{ty}").as_str()) => {
                    return Err(Error::config(format!("{t} has no matching B-{ty}")));
                }
                Some(_) => {}
                None => return Err(Error::config(format!("malformed tag {t:?}"))),
            }
        }
        Ok(Self { tags })
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn index(&self, tag: &str) -> Option<usize> {
        self.tags.iter().position(|t| t == tag)
    }

    /// Entity type of a tag, `None` for `O`.
    pub fn entity_type(&self, index: usize) -> Option<&str> {
        split_tag(&self.tags[index]).map(|(_, ty)| ty)
    }

    pub fn entity_types(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for i in 0..self.len() {
            if let Some(t) = self.entity_type(i) {
                if !out.contains(&t) {
                    out.push(t);
                }
            }
        }
        out
    }
}

/// `B-x` → (`B`, `x`); `None` for `O` or malformed tags.
pub fn split_tag(tag: &str) -> Option<(char, &str)> {
    let (prefix, ty) = tag.split_once('-')?;
    match prefix {
        "B" if !ty.is_empty() => Some(('B', ty)),
        "I" if !ty.is_empty() => Some(('I', ty)),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Entity {
    pub kind: String,
    pub start: usize,
    pub end: usize,
}

/// Entities of a tag sequence. An `I-x` that does not continue an `x`
/// entity starts a new one, so every sequence decodes.
pub fn bio_decode<S: AsRef<str>>(tags: &[S]) -> Vec<Entity> {
    let mut out: Vec<Entity> = Vec::new();
    let mut open: Option<Entity> = None;
    for (i, tag) in tags.iter().enumerate() {
        match split_tag(tag.as_ref()) {
            Some(('I', ty)) if open.as_ref().is_some_and(|e| e.kind == ty) => {
                open.as_mut().expect("open entity").end = i;
            }
            Some((_, ty)) => {
                out.extend(open.take());
                open = Some(Entity { kind: ty.to_string(), start: i, end: i });
            }
            None => out.extend(open.take()),
        }
    }
    out.extend(open);
    out
}

/// Tags for non-overlapping entities over `len` tokens.
pub fn bio_encode(entities: &[Entity], len: usize) -> Result<Vec<String>> {
    let mut tags = vec![OUTSIDE.to_string(); len];
    for e in entities {
        if e.start > e.end || e.end >= len {
            return Err(Error::invalid(format!("entity {e:?} outside {len} tokens")));
        }
        if tags[e.start..=e.end].iter().any(|t| t != OUTSIDE) {
            return Err(Error::invalid("entities overlap"));
        }
        tags[e.start] = format!("B-{}", e.kind);
        for t in &mut tags[e.start + 1..=e.end] {
            *t = format!("I-{}", e.kind);
        }
    }
    Ok(tags)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrfScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Entity-level scores over exact `(type, start, end)` matches.
pub fn entity_f1(pred: &[Entity], gold: &[Entity]) -> PrfScores {
    let p: BTreeSet<&Entity> = pred.iter().collect();
    let g: BTreeSet<&Entity> = gold.iter().collect();
    counts_to_prf(p.intersection(&g).count(), p.len(), g.len())
}

fn counts_to_prf(tp: usize, n_pred: usize, n_gold: usize) -> PrfScores {
    let precision = if n_pred == 0 { 0.0 } else { tp as f64 / n_pred as f64 };
    let recall = if n_gold == 0 { 0.0 } else { tp as f64 / n_gold as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    PrfScores { precision, recall, f1 }
}

fn validate_record(r: &NerRecord, line: usize) -> Result<()> {
    if r.tokens.len() != r.tags.len() {
        return Err(Error::Validation(format!("sentence {line}: {} tokens but {} tags", r.tokens.len(), r.tags.len())));
    }
    if r.tokens.is_empty() {
        return Err(Error::Validation(format!("sentence {line}: no tokens")));
    }
    for t in &r.tags {
        if t != OUTSIDE && split_tag(t).is_none() {
            return Err(Error::Validation(format!("sentence {line}: malformed tag {t:?}")));
        }
    }
    Ok(())
}

pub fn parse_ner(text: &str) -> Result<Vec<NerRecord>> {
    let records: Vec<NerRecord> = parse_jsonl(text)?;
    for (i, r) in records.iter().enumerate() {
        validate_record(r, i + 1)?;
    }
    Ok(records)
}

pub fn read_ner(path: &Path) -> Result<Vec<NerRecord>> {
    parse_ner(&std::fs::read_to_string(path)?)
}

pub fn write_ner(path: &Path, records: &[NerRecord]) -> Result<()> {
    write_jsonl(path, records)
}

/// A tokenized sentence with one tag index per token after `[BOS]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaggedSentence {
    pub tokens: TokenSequence,
    pub tags: Vec<usize>,
}

impl TaggedSentence {
    /// Rejects unknown tags and `I-x` tags that do not continue an `x` entity.
    pub fn from_record(r: &NerRecord, vocab: &Vocabulary, tags: &TagSet) -> Result<Self> {
        validate_record(r, 0)?;
        let mut ids = Vec::with_capacity(r.tags.len());
        let mut prev: Option<&str> = None;
        for t in &r.tags {
            let i = tags.index(t).ok_or_else(|| Error::Validation(format!("unknown tag {t:?}")))?;
            if let Some(('I', ty)) = split_tag(t) {
                if prev != Some(ty) {
                    return Err(Error::Validation(format!("{t} does not continue a {ty} entity")));
                }
            }
            prev = tags.entity_type(i);
            ids.push(i);
        }
        Ok(Self { tokens: tokenize_words(&r.tokens, vocab), tags: ids })
    }
}

fn prompt_for<'a>(prompts: &'a PromptMap, key: &str) -> Result<&'a [String]> {
    prompts
        .get(key)
        .map(Vec::as_slice)
        .ok_or_else(|| Error::config(format!("no prompt question for {key:?}")))
}

/// Output matrix whose row for each tag is the unit-normalized start
/// embedding of the tag type's question; `B-x` and `I-x` share a row value.
pub fn init_output_from_prompts(model: &StudentModel, vocab: &Vocabulary, tags: &TagSet, prompts: &PromptMap) -> Result<Matrix> {
    let d = model.config().d_model;
    let mut m = Matrix::zeros(tags.len(), d);
    for i in 0..tags.len() {
        let key = tags.entity_type(i).unwrap_or(OUTSIDE);
        let q = tokenize_words(prompt_for(prompts, key)?, vocab);
        let f = question_embed(model, &q)?.f_start;
        let norm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::degenerate(format!("prompt for {key:?} has a zero start embedding")));
        }
        for (dst, v) in m.row_mut(i).iter_mut().zip(&f) {
            *dst = v / norm;
        }
    }
    Ok(m)
}

/// Scaled-normal output matrix (the default initialization).
pub fn random_output(tags: &TagSet, d: usize, seed: u64) -> Matrix {
    Matrix::random_normal(tags.len(), d, INIT_STD, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Per-token tag distributions (rows of an L × T matrix). The `[BOS]` row is
/// fixed to `O`.
pub fn ner_forward(reps: &Matrix, m: &Matrix) -> Result<Matrix> {
    if reps.cols() != m.cols() {
        return Err(Error::invalid("representation and output widths differ"));
    }
    let logits = Matrix::matmul_t(reps, false, m, true);
    let mut out = Matrix::zeros(reps.rows(), m.rows());
    out.set(0, 0, 1.0);
    for i in 1..reps.rows() {
        let p = crate::numerics::softmax(logits.row(i))?;
        out.row_mut(i).copy_from_slice(p.as_slice());
    }
    Ok(out)
}

fn row_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Student encoder plus the trainable T × d output matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct NerModel {
    pub encoder: Encoder,
    pub store: ParamStore,
    pub output: ParamId,
    pub tags: TagSet,
}

impl NerModel {
    pub fn new(student: &StudentModel, output: Matrix, tags: TagSet) -> Result<Self> {
        if output.shape() != (tags.len(), student.config().d_model) {
            return Err(Error::invalid("output matrix shape does not match tags × d"));
        }
        let mut store = ParamStore::new();
        for id in student.store.ids() {
            let name = student.store.name(id);
            if name.starts_with("encoder.") {
                store.add(name, student.store.get(id).clone());
            }
        }
        let output = store.add("ner.output", output);
        let encoder = Encoder::bind(student.config(), &store, "encoder.")?;
        Ok(Self { encoder, store, output, tags })
    }

    /// Summed token cross-entropy over the tokens after `[BOS]`.
    pub fn loss(&self, tape: &Tape<'_>, vars: &ParamVars, s: &TaggedSentence, mode: &mut Mode<'_>) -> Result<Var> {
        if s.tags.len() + 1 != s.tokens.len() {
            return Err(Error::invalid("tag count does not match sentence length"));
        }
        let layers = self.encoder.forward(tape, vars, &s.tokens.indices(), mode)?;
        let reps = *layers.last().expect("encoder output");
        let body = tape.slice_rows(reps, 1, s.tags.len());
        let logits = tape.matmul_t(body, false, vars.var(self.output), true);
        let lp = tape.log_softmax_rows(logits);
        Ok(tape.sparse_nll(lp, s.tags.iter().enumerate().map(|(r, &t)| (r, t, 1.0)).collect()))
    }

    pub fn probabilities(&self, tokens: &TokenSequence) -> Result<Matrix> {
        let reps = self.encoder.represent(&self.store, &tokens.indices())?;
        ner_forward(reps.last(), self.store.get(self.output))
    }

    /// Argmax tag per token after `[BOS]`.
    pub fn predict(&self, tokens: &TokenSequence) -> Result<Vec<usize>> {
        let p = self.probabilities(tokens)?;
        Ok((1..p.rows()).map(|i| row_argmax(p.row(i))).collect())
    }

    pub fn mean_loss(&self, data: &[TaggedSentence]) -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0;
        for s in data {
            let tape = Tape::new();
            let vars = self.store.register(&tape);
            let l = self.loss(&tape, &vars, s, &mut Mode::Eval)?;
            total += tape.scalar(l);
            n += s.tags.len();
        }
        Ok(total / n.max(1) as f64)
    }

    pub fn evaluate(&self, data: &[TaggedSentence]) -> Result<PrfScores> {
        let (mut tp, mut np, mut ng) = (0, 0, 0);
        for s in data {
            let names = |ids: &[usize]| ids.iter().map(|&i| self.tags.tags()[i].clone()).collect::<Vec<_>>();
            let pred: BTreeSet<Entity> = bio_decode(&names(&self.predict(&s.tokens)?)).into_iter().collect();
            let gold: BTreeSet<Entity> = bio_decode(&names(&s.tags)).into_iter().collect();
            tp += pred.intersection(&gold).count();
            np += pred.len();
            ng += gold.len();
        }
        Ok(counts_to_prf(tp, np, ng))
    }
}

/// Tag per token after `[BOS]` by scoring each token directly against the
/// normalized start embeddings of the tag questions.
pub fn direct_question_tags(model: &StudentModel, vocab: &Vocabulary, tags: &TagSet, prompts: &PromptMap, tokens: &TokenSequence) -> Result<Vec<usize>> {
    let reps = encode_passage(model, tokens)?;
    let mut out = Vec::new();
    for i in 1..reps.rows() {
        let mut scores = Vec::with_capacity(tags.len());
        for t in 0..tags.len() {
            let key = tags.entity_type(t).unwrap_or(OUTSIDE);
            let f = question_embed(model, &tokenize_words(prompt_for(prompts, key)?, vocab))?.f_start;
            let norm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
            scores.push(reps.row(i).iter().zip(&f).map(|(r, v)| r * (v / norm)).sum::<f64>());
        }
        out.push(row_argmax(&scores));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NerHyper {
    pub epochs: usize,
    pub lr: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for NerHyper {
    fn default() -> Self {
        Self { epochs: 10, lr: 1e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NerReport {
    /// Mean per-token loss before training.
    pub initial_loss: f64,
    /// Mean per-token loss (eval mode) after each epoch.
    pub epoch_loss: Vec<f64>,
}

/// Trains encoder and output matrix together, one sentence per step.
pub fn train_ner(model: &mut NerModel, data: &[TaggedSentence], hp: &NerHyper) -> Result<NerReport> {
    if data.is_empty() {
        return Err(Error::invalid("no NER training sentences"));
    }
    if hp.epochs == 0 {
        return Err(Error::config("epochs must be at least 1"));
    }
    let mut opt = Adam::new(&model.store, AdamConfig { lr: hp.lr, ..AdamConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let dropout = model.encoder.config().dropout;
    let mut report = NerReport { initial_loss: model.mean_loss(data)?, epoch_loss: Vec::new() };
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..hp.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let grads = {
                let tape = Tape::new();
                let vars = model.store.register(&tape);
                let l = model.loss(&tape, &vars, &data[i], &mut Mode::Train { rng: &mut rng, dropout })?;
                let mean = tape.scale(l, 1.0 / data[i].tags.len() as f64);
                vars.gradients(&model.store, tape.backward(mean))
            };
            if !grads.is_finite() {
                return Err(Error::Evaluation("non-finite NER gradient".into()));
            }
            opt.step(&mut model.store, &grads);
        }
        report.epoch_loss.push(model.mean_loss(data)?);
    }
    Ok(report)
}
