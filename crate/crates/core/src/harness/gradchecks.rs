//! Gradient checks for every training loss, on tiny models.
//!
//! Weights are scaled ×3 from init so deep-layer gradients sit well above
//! finite-difference noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bertscore::{LogRegModel, ParaphraseModel, SentencePair};
use crate::corpus::{Span, TokenId, TokenSequence};
use crate::encoder::{Encoder, EncoderConfig, Mode, MIN_POSITIONS};
use crate::error::Result;
use crate::labels::SparseSpanLabels;
use crate::numerics::{grad_check, ParamStore};
use crate::prompts::ner::{random_output, NerModel, TagSet, TaggedSentence};
use crate::student::{batch_loss, LossKind, StudentModel, TrainBatch};
use crate::teacher::{teacher_loss, TeacherExample, TeacherModel};

pub const BOUND: f64 = 1e-4;
pub const EPSILON: f64 = 1e-3;
const SCALE: f64 = 3.0;
const VOCAB: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckResult {
    pub loss: String,
    pub seed: u64,
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub passed: bool,
}

fn tiny() -> EncoderConfig {
    EncoderConfig { d_model: 8, n_layers: 2, n_heads: 2, ffn_width: 12, max_positions: MIN_POSITIONS, dropout: 0.0, vocab_size: VOCAB }
}

fn seq(ids: &[u32]) -> TokenSequence {
    TokenSequence::from_body(ids.iter().map(|&i| TokenId(i)))
}

fn result(loss: &str, seed: u64, r: crate::numerics::GradientReport) -> GradCheckResult {
    GradCheckResult {
        loss: loss.into(),
        seed,
        passed: r.passes(BOUND),
        max_relative_error: r.max_relative_error,
        worst_parameter: r.worst_parameter,
    }
}

pub fn check_teacher(seed: u64) -> Result<GradCheckResult> {
    let mut m = TeacherModel::new(&tiny(), seed)?;
    m.store.scale_all(SCALE);
    let ex = TeacherExample::new(&seq(&[5, 6, 7]), &seq(&[8]), Some(Span { start: 1, end: 2 }), MIN_POSITIONS)?;
    let r = grad_check(|t, v| teacher_loss(&m, t, v, &ex, &mut Mode::Eval), &m.store, EPSILON)?;
    Ok(result("teacher", seed, r))
}

pub fn check_distill(seed: u64, loss: LossKind) -> Result<GradCheckResult> {
    let mut m = StudentModel::new(&tiny(), seed)?;
    m.store.scale_all(SCALE);
    let labels = SparseSpanLabels { qid: "q".into(), start: vec![(1, 0.7), (2, 0.3)], end: vec![(0, 0.2), (2, 0.8)] };
    let batch = TrainBatch { passage: seq(&[5, 6]), questions: vec![(seq(&[8]), labels)] };
    let r = grad_check(|t, v| batch_loss(&m, t, v, &batch, loss, &mut Mode::Eval), &m.store, EPSILON)?;
    let name = match loss {
        LossKind::Soft => "distill-soft",
        LossKind::Hard => "distill-hard",
    };
    Ok(result(name, seed, r))
}

pub fn check_ner(seed: u64) -> Result<GradCheckResult> {
    let tags = TagSet::from_types(&["person", "location"]);
    let student = StudentModel::new(&tiny(), seed)?;
    let mut ner = NerModel::new(&student, random_output(&tags, 8, seed), tags.clone())?;
    ner.store.scale_all(SCALE);
    let b = tags.index("B-person").unwrap_or(1);
    let i = tags.index("I-person").unwrap_or(2);
    let s = TaggedSentence { tokens: seq(&[5, 6, 7]), tags: vec![b, i, 0] };
    let r = grad_check(|t, v| ner.loss(t, v, &s, &mut Mode::Eval), &ner.store, EPSILON)?;
    Ok(result("ner", seed, r))
}

pub fn check_fine_tune(seed: u64) -> Result<GradCheckResult> {
    let mut store = ParamStore::new();
    let e = Encoder::init(&tiny(), &mut store, "encoder.", &mut ChaCha8Rng::seed_from_u64(seed))?;
    let init = LogRegModel { weights: vec![0.7, -0.4, 1.1], bias: 0.2, l2_lambda: 1.0 };
    let mut model = ParaphraseModel::new(&e, &store, &init)?;
    model.store.scale_all(SCALE);
    let pair = SentencePair { s1: seq(&[5, 6, 7]), s2: seq(&[7, 6, 9]), label: Some(1), judgment: None };
    let r = grad_check(|t, v| model.loss(t, v, &pair, &mut Mode::Eval), &model.store, EPSILON)?;
    Ok(result("fine-tune", seed, r))
}

/// Every loss at every seed.
pub fn run_grad_checks(seeds: &[u64]) -> Result<Vec<GradCheckResult>> {
    let mut out = Vec::new();
    for &seed in seeds {
        out.push(check_teacher(seed)?);
        out.push(check_distill(seed, LossKind::Soft)?);
        out.push(check_distill(seed, LossKind::Hard)?);
        out.push(check_ner(seed)?);
        out.push(check_fine_tune(seed)?);
    }
    Ok(out)
}
