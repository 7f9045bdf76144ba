//! Bi-encoder student: passages and questions are encoded independently and
//! answers are scored by inner products.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{detokenize_ids, Span, TokenSequence, Vocabulary};
use crate::encoder::checkpoint::check_vocab;
use crate::encoder::{load_checkpoint, save_checkpoint, Activation, CheckpointHeader, Encoder, EncoderConfig, Mlp, Mode};
use crate::error::{Error, Result};
use crate::labels::{SpanDistributionPair, SparseSpanLabels};
use crate::numerics::{softmax, warmup_linear_decay, Adam, AdamConfig, Matrix, ParamStore, ParamVars, Tape, Var};

pub const KIND: &str = "student";
pub const DEFAULT_MAX_ANSWER_LEN: usize = 30;

#[derive(Clone, Debug, PartialEq)]
pub struct StudentModel {
    pub encoder: Encoder,
    pub h_start: Mlp,
    pub h_end: Mlp,
    pub store: ParamStore,
    /// Calls to [`StudentModel::passage_reps`] so far.
    pub passage_encodes: EncodeCounter,
}

/// Shared-reference call counter; ignored by equality.
#[derive(Debug, Default)]
pub struct EncodeCounter(AtomicUsize);

impl EncodeCounter {
    pub fn get(&self) -> usize {
        self.0.load(Ordering::Relaxed)
    }

    fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }
}

impl Clone for EncodeCounter {
    fn clone(&self) -> Self {
        Self(AtomicUsize::new(self.get()))
    }
}

impl PartialEq for EncodeCounter {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

#[derive(Serialize, Deserialize)]
struct Extra {
    activation: Activation,
}

impl StudentModel {
    pub fn new(config: &EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::init(config, &mut store, "encoder.", &mut rng)?;
        let d = config.d_model;
        let h_start = Mlp::init(&mut store, "h_start", (d, d, d), Activation::Gelu, &mut rng);
        let h_end = Mlp::init(&mut store, "h_end", (d, d, d), Activation::Gelu, &mut rng);
        Ok(Self { encoder, h_start, h_end, store, passage_encodes: EncodeCounter::default() })
    }

    /// Student whose heads compute the identity map (linear activation,
    /// identity weights, zero biases).
    pub fn with_identity_heads(config: &EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::init(config, &mut store, "encoder.", &mut rng)?;
        let d = config.d_model;
        let h_start = Mlp::init_identity(&mut store, "h_start", d, Activation::Identity);
        let h_end = Mlp::init_identity(&mut store, "h_end", d, Activation::Identity);
        Ok(Self { encoder, h_start, h_end, store, passage_encodes: EncodeCounter::default() })
    }

    pub fn config(&self) -> &EncoderConfig {
        self.encoder.config()
    }

    /// Copies every encoder tensor from `other`, whose encoder must share this
    /// configuration.
    pub fn copy_encoder_from(&mut self, other_store: &ParamStore, other: &Encoder) -> Result<()> {
        if other.config() != self.config() {
            return Err(Error::config("encoder configurations differ"));
        }
        for id in self.store.ids().collect::<Vec<_>>() {
            let name = self.store.name(id).to_string();
            if name.starts_with("encoder.") {
                let src = other_store
                    .find(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
                *self.store.get_mut(id) = other_store.get(src).clone();
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            kind: KIND.into(),
            encoder: self.config().clone(),
            extra: serde_json::to_value(Extra { activation: self.h_start.activation })?,
        };
        save_checkpoint(path, &self.store, &header)
    }

    pub fn load(path: &Path, vocab_size: usize) -> Result<Self> {
        let (store, header) = load_checkpoint(path)?;
        Self::from_parts(store, header, vocab_size)
    }

    pub fn from_parts(store: ParamStore, header: CheckpointHeader, vocab_size: usize) -> Result<Self> {
        if header.kind != KIND {
            return Err(Error::Checkpoint(format!("expected a {KIND} checkpoint, found {:?}", header.kind)));
        }
        check_vocab(&header, vocab_size)?;
        let extra: Extra = serde_json::from_value(header.extra.clone())
            .map_err(|e| Error::Checkpoint(format!("bad student header: {e}")))?;
        let d = header.encoder.d_model;
        Ok(Self {
            encoder: Encoder::bind(&header.encoder, &store, "encoder.")?,
            h_start: Mlp::bind(&store, "h_start", d, d, extra.activation)?,
            h_end: Mlp::bind(&store, "h_end", d, d, extra.activation)?,
            store,
            passage_encodes: EncodeCounter::default(),
        })
    }

    /// Final-layer passage representations, L × d.
    pub fn passage_reps(&self, tape: &Tape<'_>, vars: &ParamVars, c: &TokenSequence, mode: &mut Mode<'_>) -> Result<Var> {
        self.passage_encodes.bump();
        let layers = self.encoder.forward(tape, vars, &c.indices(), mode)?;
        Ok(*layers.last().expect("encoder output"))
    }

    /// `(f_start, f_end)`, each 1 × d, from the question's `[BOS]` row.
    pub fn question_vecs(&self, tape: &Tape<'_>, vars: &ParamVars, q: &TokenSequence, mode: &mut Mode<'_>) -> Result<(Var, Var)> {
        let layers = self.encoder.forward(tape, vars, &q.indices(), mode)?;
        let cls = tape.slice_rows(*layers.last().expect("encoder output"), 0, 1);
        Ok((self.h_start.forward(tape, vars, cls), self.h_end.forward(tape, vars, cls)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionEmbedding {
    pub f_start: Vec<f64>,
    pub f_end: Vec<f64>,
}

pub fn question_embed(model: &StudentModel, q: &TokenSequence) -> Result<QuestionEmbedding> {
    let tape = Tape::new();
    let vars = model.store.register(&tape);
    let (s, e) = model.question_vecs(&tape, &vars, q, &mut Mode::Eval)?;
    let f_start = tape.value(s).as_slice().to_vec();
    let f_end = tape.value(e).as_slice().to_vec();
    Ok(QuestionEmbedding { f_start, f_end })
}

/// Final-layer representations of a passage in eval mode.
pub fn encode_passage(model: &StudentModel, c: &TokenSequence) -> Result<Matrix> {
    let tape = Tape::new();
    let vars = model.store.register(&tape);
    let r = model.passage_reps(&tape, &vars, c, &mut Mode::Eval)?;
    let out = tape.value(r).clone();
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax over every passage position of `r(c)_i · f`.
pub fn score_reps(reps: &Matrix, qe: &QuestionEmbedding) -> Result<SpanDistributionPair> {
    if qe.f_start.len() != reps.cols() || qe.f_end.len() != reps.cols() {
        return Err(Error::invalid("question embedding width does not match representations"));
    }
    let logits = |f: &[f64]| (0..reps.rows()).map(|i| dot(reps.row(i), f)).collect::<Vec<_>>();
    Ok(SpanDistributionPair { start: softmax(&logits(&qe.f_start))?, end: softmax(&logits(&qe.f_end))? })
}

pub fn score_passage(model: &StudentModel, c: &TokenSequence, qe: &QuestionEmbedding) -> Result<SpanDistributionPair> {
    score_reps(&encode_passage(model, c)?, qe)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Soft,
    Hard,
}

/// One passage with every question asked about it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub passage: TokenSequence,
    pub questions: Vec<(TokenSequence, SparseSpanLabels)>,
}

impl TrainBatch {
    pub fn validate(&self) -> Result<()> {
        if self.questions.is_empty() {
            return Err(Error::invalid("batch has no questions"));
        }
        for (_, labels) in &self.questions {
            if labels.max_index() >= self.passage.len() {
                return Err(Error::invalid(format!(
                    "qid {:?}: label index {} outside passage of length {}",
                    labels.qid,
                    labels.max_index(),
                    self.passage.len()
                )));
            }
        }
        Ok(())
    }
}

fn entries(labels: &[(usize, f64)]) -> Vec<(usize, usize, f64)> {
    labels.iter().filter(|e| e.1 > 0.0).map(|&(i, p)| (0, i, p)).collect()
}

/// Summed loss of every question in the batch against a single encoding of
/// the passage.
pub fn batch_loss(model: &StudentModel, tape: &Tape<'_>, vars: &ParamVars, batch: &TrainBatch, loss: LossKind, mode: &mut Mode<'_>) -> Result<Var> {
    batch.validate()?;
    let reps = model.passage_reps(tape, vars, &batch.passage, mode)?;
    let mut total: Option<Var> = None;
    for (q, labels) in &batch.questions {
        let labels = match loss {
            LossKind::Soft => labels.clone(),
            LossKind::Hard => labels.to_hard(),
        };
        let (fs, fe) = model.question_vecs(tape, vars, q, mode)?;
        let ls = tape.log_softmax_rows(tape.matmul_t(fs, false, reps, true));
        let le = tape.log_softmax_rows(tape.matmul_t(fe, false, reps, true));
        let l = tape.add(tape.sparse_nll(ls, entries(&labels.start)), tape.sparse_nll(le, entries(&labels.end)));
        total = Some(match total {
            Some(t) => tape.add(t, l),
            None => l,
        });
    }
    Ok(total.expect("at least one question"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillHyper {
    pub epochs: usize,
    pub lr: f64,
    #[serde(skip)]
    pub seed: u64,
    pub loss: LossKind,
    pub clip_norm: f64,
    /// Linear warmup steps; the learning rate then decays linearly to the
    /// end of training.
    pub warmup_steps: usize,
}

impl Default for DistillHyper {
    fn default() -> Self {
        Self { epochs: 2, lr: 1e-3, seed: 0, loss: LossKind::Soft, clip_norm: 1.0, warmup_steps: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    /// Mean per-question loss of each epoch.
    pub epoch_mean_loss: Vec<f64>,
    /// Passage encodings performed in each epoch.
    pub passage_encodings: Vec<usize>,
    pub batches_per_epoch: usize,
    pub steps: u64,
}

pub fn train_distill(model: &mut StudentModel, batches: &[TrainBatch], hp: &DistillHyper) -> Result<DistillReport> {
    if batches.is_empty() {
        return Err(Error::invalid("no training batches"));
    }
    if hp.epochs == 0 {
        return Err(Error::config("epochs must be at least 1"));
    }
    for b in batches {
        b.validate()?;
    }
    let mut opt = Adam::new(&model.store, AdamConfig { lr: hp.lr, clip_norm: Some(hp.clip_norm), ..AdamConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let dropout = model.config().dropout;
    let mut report = DistillReport { epoch_mean_loss: Vec::new(), passage_encodings: Vec::new(), batches_per_epoch: batches.len(), steps: 0 };
    let n_questions: usize = batches.iter().map(|b| b.questions.len()).sum();
    let mut order: Vec<usize> = (0..batches.len()).collect();
    let total_steps = hp.epochs * batches.len();
    let mut step = 0;
    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let encodes_before = model.passage_encodes.get();
        for &bi in &order {
            step += 1;
            opt.set_lr(hp.lr * warmup_linear_decay(step, hp.warmup_steps, total_steps));
            let batch = &batches[bi];
            let grads = {
                let tape = Tape::new();
                let vars = model.store.register(&tape);
                let mut mode = Mode::Train { rng: &mut rng, dropout };
                let sum = batch_loss(model, &tape, &vars, batch, hp.loss, &mut mode)?;
                total += tape.scalar(sum);
                let mean = tape.scale(sum, 1.0 / batch.questions.len() as f64);
                vars.gradients(&model.store, tape.backward(mean))
            };
            if !grads.is_finite() {
                return Err(Error::Evaluation("non-finite student gradient".into()));
            }
            opt.step(&mut model.store, &grads);
        }
        let mean = total / n_questions as f64;
        log::info!("distill epoch {}: mean loss {mean:.4}", epoch + 1);
        report.epoch_mean_loss.push(mean);
        report.passage_encodings.push(model.passage_encodes.get() - encodes_before);
    }
    report.steps = opt.steps();
    Ok(report)
}

/// Fraction of questions whose student argmax start equals the label argmax start.
pub fn start_agreement(model: &StudentModel, batches: &[TrainBatch]) -> Result<f64> {
    let mut hits = 0usize;
    let mut n = 0usize;
    for b in batches {
        let reps = encode_passage(model, &b.passage)?;
        for (q, labels) in &b.questions {
            let pred = score_reps(&reps, &question_embed(model, q)?)?;
            hits += usize::from(pred.start.argmax() == labels.start_argmax());
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("no questions to compare"));
    }
    Ok(hits as f64 / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    /// `None` when the unanswerable slot wins.
    pub span: Option<Span>,
    pub score: f64,
}

/// Maximizes `ln p_start(i) + ln p_end(j)` over `1 <= i <= j < i + max_len`;
/// `(0, 0)` is the unanswerable alternative and wins only when strictly
/// better. Ties prefer smaller `i`, then smaller `j`.
pub fn decode_span(pred: &SpanDistributionPair, max_len: usize) -> Result<Decoded> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let ps = pred.start.as_slice();
    let pe = pred.end.as_slice();
    if ps.len() != pe.len() {
        return Err(Error::invalid("start and end distributions differ in length"));
    }
    let ln = |p: f64| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY };
    let null = ln(ps[0]) + ln(pe[0]);
    let mut best: Option<(Span, f64)> = None;
    for i in 1..ps.len() {
        let si = ln(ps[i]);
        for j in i..ps.len().min(i + max_len) {
            let v = si + ln(pe[j]);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((Span { start: i, end: j }, v));
            }
        }
    }
    Ok(match best {
        Some((span, v)) if !(null > v) => Decoded { span: Some(span), score: v },
        _ => Decoded { span: None, score: null },
    })
}

/// Span and detokenized answer text; unanswerable yields `(None, "")`.
pub fn answer_question(model: &StudentModel, c: &TokenSequence, q: &TokenSequence, vocab: &Vocabulary, max_len: usize) -> Result<(Option<Span>, String)> {
    let pred = score_passage(model, c, &question_embed(model, q)?)?;
    let d = decode_span(&pred, max_len)?;
    let text = d.span.map_or_else(String::new, |s| detokenize_ids(&c.ids()[s.start..=s.end], vocab));
    Ok((d.span, text))
}
