//! Cross-encoder QA teacher over `[BOS] context [SEP] question`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Span, TokenId, TokenSequence};
use crate::encoder::checkpoint::check_vocab;
use crate::encoder::{load_checkpoint, save_checkpoint, Activation, CheckpointHeader, Encoder, EncoderConfig, Mlp, Mode};
use crate::error::{Error, Result};
use crate::labels::{SpanDistributionPair, SparseSpanLabels};
use crate::numerics::{Adam, AdamConfig, ParamStore, ParamVars, ProbabilityVector, Tape, Var};

pub const KIND: &str = "teacher";

/// Concatenated input. Positions `0..context_len` are `[BOS]` plus the
/// context, so they coincide with positions in the passage sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ConcatInput {
    pub tokens: TokenSequence,
    pub context_len: usize,
}

impl ConcatInput {
    pub fn sep_index(&self) -> usize {
        self.context_len
    }
}

pub fn concat_input(c: &TokenSequence, q: &TokenSequence, max_positions: usize) -> Result<ConcatInput> {
    let len = c.len() + 1 + q.body().len();
    if len > max_positions {
        return Err(Error::invalid(format!(
            "concatenated input of length {len} exceeds max_positions {max_positions}"
        )));
    }
    let body = c.body().iter().copied().chain([TokenId::SEP]).chain(q.body().iter().copied());
    Ok(ConcatInput { tokens: TokenSequence::from_body(body), context_len: c.len() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherModel {
    pub encoder: Encoder,
    pub start_head: Mlp,
    pub end_head: Mlp,
    pub store: ParamStore,
    pub temperature: f64,
}

#[derive(Serialize, Deserialize)]
struct Extra {
    temperature: f64,
}

impl TeacherModel {
    pub fn new(config: &EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::init(config, &mut store, "encoder.", &mut rng)?;
        let d = config.d_model;
        let start_head = Mlp::init(&mut store, "start_head", (d, d, 1), Activation::Gelu, &mut rng);
        let end_head = Mlp::init(&mut store, "end_head", (d, d, 1), Activation::Gelu, &mut rng);
        Ok(Self { encoder, start_head, end_head, store, temperature: 1.0 })
    }

    pub fn config(&self) -> &EncoderConfig {
        self.encoder.config()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            kind: KIND.into(),
            encoder: self.config().clone(),
            extra: serde_json::to_value(Extra { temperature: self.temperature })?,
        };
        save_checkpoint(path, &self.store, &header)
    }

    pub fn load(path: &Path, vocab_size: usize) -> Result<Self> {
        let (store, header) = load_checkpoint(path)?;
        if header.kind != KIND {
            return Err(Error::Checkpoint(format!("expected a {KIND} checkpoint, found {:?}", header.kind)));
        }
        check_vocab(&header, vocab_size)?;
        let extra: Extra = serde_json::from_value(header.extra.clone())
            .map_err(|e| Error::Checkpoint(format!("bad teacher header: {e}")))?;
        let d = header.encoder.d_model;
        Ok(Self {
            encoder: Encoder::bind(&header.encoder, &store, "encoder.")?,
            start_head: Mlp::bind(&store, "start_head", d, 1, Activation::Gelu)?,
            end_head: Mlp::bind(&store, "end_head", d, 1, Activation::Gelu)?,
            store,
            temperature: extra.temperature,
        })
    }

    /// Start/end log-probabilities over the context positions (1 × context_len each).
    pub fn log_probs(&self, tape: &Tape<'_>, vars: &ParamVars, input: &ConcatInput, mode: &mut Mode<'_>) -> Result<(Var, Var)> {
        let layers = self.encoder.forward(tape, vars, &input.tokens.indices(), mode)?;
        let last = *layers.last().expect("encoder output");
        let ctx = tape.slice_rows(last, 0, input.context_len);
        let head = |mlp: &Mlp| {
            let logits = tape.transpose(mlp.forward(tape, vars, ctx));
            let logits = if self.temperature == 1.0 { logits } else { tape.scale(logits, 1.0 / self.temperature) };
            tape.log_softmax_rows(logits)
        };
        Ok((head(&self.start_head), head(&self.end_head)))
    }
}

fn full_length(log_probs: &[f64], total: usize) -> Result<ProbabilityVector> {
    let mut p: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
    p.resize(total, 0.0);
    ProbabilityVector::new(p)
}

/// Distributions over every position of the concatenated input; `[SEP]` and
/// question positions get exactly zero.
pub fn teacher_predict(model: &TeacherModel, c: &TokenSequence, q: &TokenSequence) -> Result<SpanDistributionPair> {
    let input = concat_input(c, q, model.config().max_positions)?;
    let tape = Tape::new();
    let vars = model.store.register(&tape);
    let (s, e) = model.log_probs(&tape, &vars, &input, &mut Mode::Eval)?;
    let n = input.tokens.len();
    let start = full_length(tape.value(s).as_slice(), n)?;
    let end = full_length(tape.value(e).as_slice(), n)?;
    Ok(SpanDistributionPair { start, end })
}

/// A supervised example; unanswerable questions point at position 0.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherExample {
    pub input: ConcatInput,
    pub start: usize,
    pub end: usize,
}

impl TeacherExample {
    pub fn new(c: &TokenSequence, q: &TokenSequence, span: Option<Span>, max_positions: usize) -> Result<Self> {
        let input = concat_input(c, q, max_positions)?;
        let (start, end) = span.map_or((0, 0), |s| (s.start, s.end));
        if end >= input.context_len {
            return Err(Error::invalid(format!("span end {end} outside context of length {}", input.context_len)));
        }
        Ok(Self { input, start, end })
    }
}

/// Examples for every question of a gold dataset.
pub fn examples_from_dataset(data: &Dataset, max_positions: usize) -> Result<Vec<TeacherExample>> {
    data.iter()
        .flat_map(|(p, qas)| qas.iter().map(move |qa| TeacherExample::new(&p.tokens, &qa.question, qa.answer_span, max_positions)))
        .collect()
}

/// Summed start and end cross-entropy for one example.
pub fn teacher_loss(model: &TeacherModel, tape: &Tape<'_>, vars: &ParamVars, ex: &TeacherExample, mode: &mut Mode<'_>) -> Result<Var> {
    let (s, e) = model.log_probs(tape, vars, &ex.input, mode)?;
    let ls = tape.sparse_nll(s, vec![(0, ex.start, 1.0)]);
    let le = tape.sparse_nll(e, vec![(0, ex.end, 1.0)]);
    Ok(tape.add(ls, le))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherHyper {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TeacherHyper {
    fn default() -> Self {
        Self { epochs: 8, lr: 1e-3, batch_size: 8, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    /// Mean held-out loss before training.
    pub initial_heldout_loss: Option<f64>,
    pub epoch_train_loss: Vec<f64>,
    pub epoch_heldout_loss: Vec<f64>,
    pub steps: u64,
}

pub fn mean_loss(model: &TeacherModel, examples: &[TeacherExample]) -> Result<Option<f64>> {
    if examples.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for ex in examples {
        let tape = Tape::new();
        let vars = model.store.register(&tape);
        let l = teacher_loss(model, &tape, &vars, ex, &mut Mode::Eval)?;
        total += tape.scalar(l);
    }
    Ok(Some(total / examples.len() as f64))
}

pub fn train_teacher(
    model: &mut TeacherModel,
    train: &[TeacherExample],
    heldout: &[TeacherExample],
    hp: &TeacherHyper,
) -> Result<TeacherReport> {
    if train.is_empty() {
        return Err(Error::invalid("teacher training set is empty"));
    }
    if hp.batch_size == 0 || hp.epochs == 0 {
        return Err(Error::config("teacher epochs and batch_size must be positive"));
    }
    let mut opt = Adam::new(&model.store, AdamConfig { lr: hp.lr, ..AdamConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let dropout = model.config().dropout;
    let mut report = TeacherReport {
        initial_heldout_loss: mean_loss(model, heldout)?,
        epoch_train_loss: Vec::new(),
        epoch_heldout_loss: Vec::new(),
        steps: 0,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(hp.batch_size) {
            let grads = {
                let tape = Tape::new();
                let vars = model.store.register(&tape);
                let mut mode = Mode::Train { rng: &mut rng, dropout };
                let mut losses = Vec::with_capacity(batch.len());
                for &i in batch {
                    losses.push(teacher_loss(model, &tape, &vars, &train[i], &mut mode)?);
                }
                let sum = losses[1..].iter().fold(losses[0], |acc, &l| tape.add(acc, l));
                total += tape.scalar(sum);
                let mean = tape.scale(sum, 1.0 / batch.len() as f64);
                vars.gradients(&model.store, tape.backward(mean))
            };
            if !grads.is_finite() {
                return Err(Error::Evaluation("non-finite teacher gradient".into()));
            }
            opt.step(&mut model.store, &grads);
        }
        let train_loss = total / train.len() as f64;
        report.epoch_train_loss.push(train_loss);
        if let Some(h) = mean_loss(model, heldout)? {
            report.epoch_heldout_loss.push(h);
        }
        log::info!("teacher epoch {}: train loss {train_loss:.4}", epoch + 1);
    }
    report.steps = opt.steps();
    Ok(report)
}

/// Sparse teacher targets for every question of `data`, in dataset order.
pub fn relabel(model: &TeacherModel, data: &Dataset, k: usize, renormalize: bool) -> Result<Vec<SparseSpanLabels>> {
    let mut out = Vec::new();
    for (passage, qas) in data {
        for qa in qas {
            let pred = teacher_predict(model, &passage.tokens, &qa.question)?;
            let ctx = passage.tokens.len();
            let trimmed = SpanDistributionPair {
                start: ProbabilityVector::new(pred.start.as_slice()[..ctx].to_vec())?,
                end: ProbabilityVector::new(pred.end.as_slice()[..ctx].to_vec())?,
            };
            out.push(SparseSpanLabels::from_distributions(qa.qid.clone(), &trimmed, k, renormalize)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::MIN_POSITIONS;
    use crate::numerics::grad_check;

    fn tiny(vocab: usize) -> EncoderConfig {
        EncoderConfig { d_model: 8, n_layers: 2, n_heads: 2, ffn_width: 12, max_positions: MIN_POSITIONS, dropout: 0.0, vocab_size: vocab }
    }

    fn seq(ids: &[u32]) -> TokenSequence {
        TokenSequence::from_body(ids.iter().map(|&i| TokenId(i)))
    }

    #[test]
    fn concat_layout() {
        let x = concat_input(&seq(&[5, 6, 7]), &seq(&[8, 9]), 512).unwrap();
        assert_eq!(x.tokens.len(), 7);
        assert_eq!(x.tokens.ids()[4], TokenId::SEP);
        assert_eq!(x.context_len, 4);
        let e = concat_input(&seq(&[5, 6, 7]), &seq(&[]), 512).unwrap();
        assert_eq!(e.tokens.ids(), &[TokenId::BOS, TokenId(5), TokenId(6), TokenId(7), TokenId::SEP]);
        let long = concat_input(&seq(&vec![5; 456]), &seq(&vec![6; 50]), 508).unwrap();
        assert_eq!(long.tokens.len(), 508);
        assert!(concat_input(&seq(&vec![5; 456]), &seq(&vec![6; 51]), 508).is_err());
    }

    #[test]
    fn predictions_are_masked_and_normalized() {
        let m = TeacherModel::new(&tiny(12), 1).unwrap();
        let p = teacher_predict(&m, &seq(&[5, 6, 7]), &seq(&[8, 9])).unwrap();
        for d in [&p.start, &p.end] {
            assert_eq!(d.len(), 7);
            assert!((d.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(d.as_slice()[4..].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn permutation_covariance_without_positions() {
        let mut m = TeacherModel::new(&tiny(12), 2).unwrap();
        let pos = m.encoder.position_embedding_id();
        let shape = m.store.get(pos).shape();
        *m.store.get_mut(pos) = crate::numerics::Matrix::zeros(shape.0, shape.1);
        let a = teacher_predict(&m, &seq(&[5, 6, 7, 10]), &seq(&[8, 9])).unwrap();
        let b = teacher_predict(&m, &seq(&[5, 10, 7, 6]), &seq(&[8, 9])).unwrap();
        for (x, y) in [(&a.start, &b.start), (&a.end, &b.end)] {
            assert!((x.as_slice()[2] - y.as_slice()[4]).abs() < 1e-12);
            assert!((x.as_slice()[4] - y.as_slice()[2]).abs() < 1e-12);
            assert!((x.as_slice()[3] - y.as_slice()[3]).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let mut m = TeacherModel::new(&tiny(12), 1).unwrap();
        assert!(matches!(train_teacher(&mut m, &[], &[], &TeacherHyper::default()), Err(Error::InvalidArgument(_))));
    }

    const SCALE: f64 = 3.0;

    #[test]
    fn teacher_loss_passes_grad_check() {
        for seed in 0..3 {
            let mut m = TeacherModel::new(&tiny(12), seed).unwrap();
            m.store.scale_all(SCALE);
            let ex = TeacherExample::new(&seq(&[5, 6]), &seq(&[8]), Some(Span { start: 1, end: 2 }), MIN_POSITIONS).unwrap();
            let report = grad_check(|t, v| teacher_loss(&m, t, v, &ex, &mut Mode::Eval), &m.store, 1e-3).unwrap();
            assert!(report.passes(1e-4), "{report:?}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = TeacherModel::new(&tiny(12), 1).unwrap();
        m.temperature = 2.0;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        m.save(&path).unwrap();
        assert_eq!(TeacherModel::load(&path, 12).unwrap(), m);
        assert!(matches!(TeacherModel::load(&path, 13), Err(Error::Configuration(_))));
    }
}
