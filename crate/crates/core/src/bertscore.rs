//! Greedy-matching similarity between token representation sets, layer
//! selection against judgments, and the few-shot paraphrase classifiers.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::dataset::{parse_jsonl, write_jsonl};
use crate::corpus::{tokenize_words, TokenSequence, Vocabulary};
use crate::encoder::{Encoder, Mode};
use crate::error::{Error, Result};
use crate::numerics::{pearson, Adam, AdamConfig, Matrix, ParamId, ParamStore, ParamVars, Tape, Var};
use crate::synth::PairRecord;

/// Number of trailing layers used as classifier features.
pub const FEATURE_LAYERS: usize = 8;

fn unit_rows(m: &Matrix) -> Result<Vec<Vec<f64>>> {
    (1..m.rows())
        .map(|i| {
            let r = m.row(i);
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::degenerate(format!("token {i} has an all-zero representation")));
            }
            Ok(r.iter().map(|x| x / n).collect())
        })
        .collect()
}

/// Mean over the non-`[BOS]` rows of `x1` of the best cosine similarity to
/// any non-`[BOS]` row of `x2`.
pub fn greedy_match(x1: &Matrix, x2: &Matrix) -> Result<f64> {
    if x1.rows() < 2 || x2.rows() < 2 {
        return Err(Error::invalid("greedy matching needs at least one token after [BOS] on both sides"));
    }
    if x1.cols() != x2.cols() {
        return Err(Error::invalid("representation widths differ"));
    }
    let a = unit_rows(x1)?;
    let b = unit_rows(x2)?;
    let total: f64 = a
        .iter()
        .map(|u| b.iter().map(|v| u.iter().zip(v).map(|(p, q)| p * q).sum::<f64>()).fold(f64::NEG_INFINITY, f64::max))
        .sum();
    Ok(total / a.len() as f64)
}

fn harmonic(b12: f64, b21: f64) -> f64 {
    if b12 + b21 <= 0.0 {
        0.0
    } else {
        2.0 * b12 * b21 / (b12 + b21)
    }
}

/// F_BERT of two representation matrices at one layer.
pub fn f_bert_reps(x1: &Matrix, x2: &Matrix) -> Result<f64> {
    Ok(harmonic(greedy_match(x1, x2)?, greedy_match(x2, x1)?))
}

/// F_BERT of two token sequences at `layer`, encoded in eval mode.
pub fn f_bert(encoder: &Encoder, store: &ParamStore, x1: &TokenSequence, x2: &TokenSequence, layer: usize) -> Result<f64> {
    let n = encoder.config().n_layers + 1;
    if layer >= n {
        return Err(Error::invalid(format!("layer {layer} out of range for {n} layers")));
    }
    let r1 = encoder.represent(store, &x1.indices())?;
    let r2 = encoder.represent(store, &x2.indices())?;
    f_bert_reps(&r1.layers[layer], &r2.layers[layer])
}

/// Tokenized pair with its optional label and judgment.
#[derive(Clone, Debug, PartialEq)]
pub struct SentencePair {
    pub s1: TokenSequence,
    pub s2: TokenSequence,
    pub label: Option<u8>,
    pub judgment: Option<f64>,
}

impl SentencePair {
    pub fn from_record(r: &PairRecord, vocab: &Vocabulary) -> Self {
        Self { s1: tokenize_words(&r.s1, vocab), s2: tokenize_words(&r.s2, vocab), label: r.label, judgment: r.judgment }
    }
}

pub fn validate_pairs(records: &[PairRecord]) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        if r.s1.is_empty() || r.s2.is_empty() {
            return Err(Error::Validation(format!("pair {}: empty sentence", i + 1)));
        }
        if r.label.is_some_and(|l| l > 1) {
            return Err(Error::Validation(format!("pair {}: label must be 0 or 1", i + 1)));
        }
        if r.judgment.is_some_and(|j| !j.is_finite()) {
            return Err(Error::Validation(format!("pair {}: judgment is not finite", i + 1)));
        }
    }
    Ok(())
}

pub fn parse_pairs(text: &str) -> Result<Vec<PairRecord>> {
    let records = parse_jsonl(text)?;
    validate_pairs(&records)?;
    Ok(records)
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairRecord>> {
    parse_pairs(&std::fs::read_to_string(path)?)
}

pub fn write_pairs(path: &Path, records: &[PairRecord]) -> Result<()> {
    write_jsonl(path, records)
}

/// Per-layer correlation with judgments and the chosen layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub best_layer: usize,
    /// Pearson r per layer; `None` where the layer's scores have no variance.
    pub pearson: Vec<Option<f64>>,
}

/// Picks the layer whose F_BERT correlates best with the judgments
/// (ties go to the deeper layer).
pub fn select_layer_from_scores(per_layer: &[Vec<f64>], judgments: &[f64]) -> Result<LayerSelection> {
    if judgments.len() < 3 {
        return Err(Error::invalid("layer selection needs at least 3 judged pairs"));
    }
    let mean = judgments.iter().sum::<f64>() / judgments.len() as f64;
    if judgments.iter().all(|&j| j == mean) {
        return Err(Error::degenerate("judgments have zero variance"));
    }
    let mut table = Vec::with_capacity(per_layer.len());
    for scores in per_layer {
        table.push(match pearson(scores, judgments) {
            Ok(r) => Some(r),
            Err(Error::DegenerateInput(_)) => None,
            Err(e) => return Err(e),
        });
    }
    let mut best: Option<(usize, f64)> = None;
    for (layer, r) in table.iter().enumerate() {
        if let Some(r) = *r {
            if best.is_none_or(|(_, b)| r >= b) {
                best = Some((layer, r));
            }
        }
    }
    let (best_layer, _) = best.ok_or_else(|| Error::degenerate("no layer has score variance"))?;
    Ok(LayerSelection { best_layer, pearson: table })
}

/// F_BERT of every pair at every layer, indexed `[layer][pair]`.
pub fn layer_scores(encoder: &Encoder, store: &ParamStore, pairs: &[SentencePair]) -> Result<Vec<Vec<f64>>> {
    let n = encoder.config().n_layers + 1;
    let mut out = vec![Vec::with_capacity(pairs.len()); n];
    for p in pairs {
        let r1 = encoder.represent(store, &p.s1.indices())?;
        let r2 = encoder.represent(store, &p.s2.indices())?;
        for (layer, col) in out.iter_mut().enumerate() {
            col.push(f_bert_reps(&r1.layers[layer], &r2.layers[layer])?);
        }
    }
    Ok(out)
}

pub fn select_layer(encoder: &Encoder, store: &ParamStore, pairs: &[SentencePair]) -> Result<LayerSelection> {
    let judgments = pairs
        .iter()
        .map(|p| p.judgment.ok_or_else(|| Error::invalid("pair has no judgment")))
        .collect::<Result<Vec<_>>>()?;
    if judgments.len() < 3 {
        return Err(Error::invalid("layer selection needs at least 3 judged pairs"));
    }
    select_layer_from_scores(&layer_scores(encoder, store, pairs)?, &judgments)
}

/// Indices of the trailing `min(8, n_layers + 1)` layers, shallow to deep.
pub fn feature_layers(n_layers: usize) -> Vec<usize> {
    let total = n_layers + 1;
    (total.saturating_sub(FEATURE_LAYERS)..total).collect()
}

pub fn extract_features(encoder: &Encoder, store: &ParamStore, pair: &SentencePair) -> Result<Vec<f64>> {
    let r1 = encoder.represent(store, &pair.s1.indices())?;
    let r2 = encoder.represent(store, &pair.s2.indices())?;
    feature_layers(encoder.config().n_layers)
        .into_iter()
        .map(|l| f_bert_reps(&r1.layers[l], &r2.layers[l]))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRegModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub l2_lambda: f64,
}

pub(crate) fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LogRegModel {
    pub fn logit(&self, x: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    pub fn probability(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(x))
    }

    /// Decision at threshold 0.5.
    pub fn predict(&self, x: &[f64]) -> u8 {
        u8::from(self.probability(x) > 0.5)
    }

    /// `Σ softplus(z) − y z + (λ/2)‖w‖²`; the bias is unregularized.
    pub fn objective(&self, features: &[Vec<f64>], labels: &[u8]) -> f64 {
        let data: f64 = features.iter().zip(labels).map(|(x, &y)| {
            let z = self.logit(x);
            softplus(z) - f64::from(y) * z
        }).sum();
        data + 0.5 * self.l2_lambda * self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

fn check_classes(features: &[Vec<f64>], labels: &[u8]) -> Result<usize> {
    if features.len() != labels.len() {
        return Err(Error::invalid("features and labels differ in length"));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    if !(labels.contains(&0) && labels.contains(&1)) {
        return Err(Error::invalid("need at least one example of each class"));
    }
    let k = features[0].len();
    if features.iter().any(|x| x.len() != k || x.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid("features must be finite and equally sized"));
    }
    Ok(k)
}

/// Solves `a x = b` for symmetric positive definite `a` (Cholesky).
fn solve_spd(a: &[Vec<f64>], b: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if i == j {
                if s <= 0.0 {
                    return Err(Error::degenerate("Hessian is not positive definite"));
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    Ok(x)
}

/// L2-regularized logistic regression by damped Newton iterations, run
/// until the gradient norm falls below 1e-8.
pub fn train_logreg(features: &[Vec<f64>], labels: &[u8], l2_lambda: f64) -> Result<LogRegModel> {
    if !(l2_lambda > 0.0 && l2_lambda.is_finite()) {
        return Err(Error::invalid("l2_lambda must be positive"));
    }
    let k = check_classes(features, labels)?;
    let n = k + 1;
    let mut model = LogRegModel { weights: vec![0.0; k], bias: 0.0, l2_lambda };
    for _ in 0..200 {
        let mut grad = vec![0.0; n];
        let mut hess = vec![vec![0.0; n]; n];
        for (x, &y) in features.iter().zip(labels) {
            let p = sigmoid(model.logit(x));
            let r = p - f64::from(y);
            let w = p * (1.0 - p);
            let xb: Vec<f64> = x.iter().copied().chain(std::iter::once(1.0)).collect();
            for i in 0..n {
                grad[i] += r * xb[i];
                for j in 0..n {
                    hess[i][j] += w * xb[i] * xb[j];
                }
            }
        }
        for i in 0..k {
            grad[i] += l2_lambda * model.weights[i];
            hess[i][i] += l2_lambda;
        }
        // keeps the bias direction invertible when every p saturates
        hess[k][k] += 1e-12;
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < 1e-8 {
            return Ok(model);
        }
        let step = solve_spd(&hess, &grad)?;
        let f0 = model.objective(features, labels);
        let mut t = 1.0;
        loop {
            let cand = LogRegModel {
                weights: model.weights.iter().zip(&step).map(|(w, s)| w - t * s).collect(),
                bias: model.bias - t * step[k],
                l2_lambda,
            };
            if cand.objective(features, labels) <= f0 || t < 1e-10 {
                model = cand;
                break;
            }
            t *= 0.5;
        }
    }
    Err(Error::Evaluation("logistic regression did not converge".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

/// Positive-class precision, recall and F1 plus accuracy.
pub fn binary_scores(pred: &[u8], gold: &[u8]) -> BinaryScores {
    let tp = pred.iter().zip(gold).filter(|&(&p, &g)| p == 1 && g == 1).count() as f64;
    let pp = pred.iter().filter(|&&p| p == 1).count() as f64;
    let gp = gold.iter().filter(|&&g| g == 1).count() as f64;
    let correct = pred.iter().zip(gold).filter(|(p, g)| p == g).count() as f64;
    let precision = if pp > 0.0 { tp / pp } else { 0.0 };
    let recall = if gp > 0.0 { tp / gp } else { 0.0 };
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    BinaryScores { precision, recall, f1, accuracy: if gold.is_empty() { 0.0 } else { correct / gold.len() as f64 } }
}

/// Differentiable F_BERT between two representation nodes.
pub fn f_bert_var(tape: &Tape<'_>, r1: Var, r2: Var) -> Var {
    let (l1, _) = tape.shape(r1);
    let (l2, _) = tape.shape(r2);
    let a = tape.row_normalize(tape.slice_rows(r1, 1, l1 - 1));
    let b = tape.row_normalize(tape.slice_rows(r2, 1, l2 - 1));
    let sim = tape.matmul_t(a, false, b, true);
    let b12 = tape.mean(tape.max_rows(sim));
    let b21 = tape.mean(tape.max_rows(tape.transpose(sim)));
    if tape.scalar(b12) + tape.scalar(b21) <= 0.0 {
        return tape.constant(Matrix::zeros(1, 1));
    }
    tape.scale(tape.div(tape.mul(b12, b21), tape.add(b12, b21)), 2.0)
}

/// Encoder plus a logistic output layer over per-layer F_BERT features.
#[derive(Clone, Debug, PartialEq)]
pub struct ParaphraseModel {
    pub encoder: Encoder,
    pub store: ParamStore,
    pub weights: ParamId,
    pub bias: ParamId,
    pub layers: Vec<usize>,
}

impl ParaphraseModel {
    /// Copies the encoder's parameters and adds the output layer, seeded
    /// from `init`.
    pub fn new(encoder: &Encoder, store: &ParamStore, init: &LogRegModel) -> Result<Self> {
        let layers = feature_layers(encoder.config().n_layers);
        if init.weights.len() != layers.len() {
            return Err(Error::invalid("initial weights do not match the feature count"));
        }
        let mut own = ParamStore::new();
        for id in store.ids() {
            let name = store.name(id);
            if name.starts_with("encoder.") {
                own.add(name, store.get(id).clone());
            }
        }
        let weights = own.add("paraphrase.w", Matrix::from_vec(layers.len(), 1, init.weights.clone()));
        let bias = own.add("paraphrase.b", Matrix::from_vec(1, 1, vec![init.bias]));
        let encoder = Encoder::bind(encoder.config(), &own, "encoder.")?;
        Ok(Self { encoder, store: own, weights, bias, layers })
    }

    /// Logit node for one pair.
    pub fn logit(&self, tape: &Tape<'_>, vars: &ParamVars, pair: &SentencePair, mode: &mut Mode<'_>) -> Result<Var> {
        let r1 = self.encoder.forward(tape, vars, &pair.s1.indices(), mode)?;
        let r2 = self.encoder.forward(tape, vars, &pair.s2.indices(), mode)?;
        if pair.s1.len() < 2 || pair.s2.len() < 2 {
            return Err(Error::invalid("pair sentences must have at least one token"));
        }
        let feats: Vec<Var> = self.layers.iter().map(|&l| f_bert_var(tape, r1[l], r2[l])).collect();
        let f = tape.concat_cols(&feats);
        Ok(tape.add(tape.matmul(f, vars.var(self.weights)), vars.var(self.bias)))
    }

    /// Logistic loss node for one labeled pair.
    pub fn loss(&self, tape: &Tape<'_>, vars: &ParamVars, pair: &SentencePair, mode: &mut Mode<'_>) -> Result<Var> {
        let y = pair.label.ok_or_else(|| Error::invalid("pair has no label"))?;
        let z = self.logit(tape, vars, pair, mode)?;
        Ok(tape.add(tape.softplus(z), tape.scale(z, -f64::from(y))))
    }

    pub fn probability(&self, pair: &SentencePair) -> Result<f64> {
        let tape = Tape::new();
        let vars = self.store.register(&tape);
        let z = self.logit(&tape, &vars, pair, &mut Mode::Eval)?;
        let v = tape.scalar(z);
        Ok(sigmoid(v))
    }

    pub fn predict(&self, pair: &SentencePair) -> Result<u8> {
        Ok(u8::from(self.probability(pair)? > 0.5))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneHyper {
    pub epochs: usize,
    pub lr: f64,
    /// Output-layer learning-rate multiplier.
    pub output_lr_factor: f64,
    pub l2_lambda: f64,
    /// Pairs per optimizer step; the loss is the batch mean.
    pub batch_size: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for FineTuneHyper {
    fn default() -> Self {
        Self { epochs: 20, lr: 1e-5, output_lr_factor: 1e3, l2_lambda: 1.0, batch_size: 8, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneReport {
    pub epoch_mean_loss: Vec<f64>,
    /// Effective output-layer LR divided by the encoder LR.
    pub lr_ratio: f64,
}

/// Training mode used by fine-tuning: dropout is always off.
pub fn fine_tune_mode(rng: &mut dyn rand::RngCore) -> Mode<'_> {
    Mode::Train { rng, dropout: 0.0 }
}

/// Fine-tunes encoder and output layer together on labeled pairs. The output
/// layer starts from frozen-feature logistic regression.
pub fn fine_tune_paraphrase(
    encoder: &Encoder,
    store: &ParamStore,
    pairs: &[SentencePair],
    hp: &FineTuneHyper,
) -> Result<(ParaphraseModel, FineTuneReport)> {
    let labels = pairs
        .iter()
        .map(|p| p.label.ok_or_else(|| Error::invalid("pair has no label")))
        .collect::<Result<Vec<_>>>()?;
    let feats = pairs.iter().map(|p| extract_features(encoder, store, p)).collect::<Result<Vec<_>>>()?;
    check_classes(&feats, &labels)?;
    if hp.epochs == 0 || hp.batch_size == 0 {
        return Err(Error::config("fine-tune epochs and batch_size must be positive"));
    }
    let init = train_logreg(&feats, &labels, hp.l2_lambda)?;
    let mut model = ParaphraseModel::new(encoder, store, &init)?;
    let mut opt = Adam::new(&model.store, AdamConfig { lr: hp.lr, ..AdamConfig::default() });
    opt.set_lr_scale(model.weights, hp.output_lr_factor);
    opt.set_lr_scale(model.bias, hp.output_lr_factor);
    let enc_id = model.encoder.token_embedding_id();
    let lr_ratio = opt.lr_for(model.weights) / opt.lr_for(enc_id);
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut report = FineTuneReport { epoch_mean_loss: Vec::new(), lr_ratio };
    for _ in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(hp.batch_size) {
            let grads = {
                let tape = Tape::new();
                let vars = model.store.register(&tape);
                let mut mode = fine_tune_mode(&mut rng);
                let mut losses = Vec::with_capacity(batch.len());
                for &i in batch {
                    losses.push(model.loss(&tape, &vars, &pairs[i], &mut mode)?);
                }
                let sum = losses[1..].iter().fold(losses[0], |acc, &l| tape.add(acc, l));
                total += tape.scalar(sum);
                let mean = tape.scale(sum, 1.0 / batch.len() as f64);
                vars.gradients(&model.store, tape.backward(mean))
            };
            if !grads.is_finite() {
                return Err(Error::Evaluation("non-finite fine-tuning gradient".into()));
            }
            opt.step(&mut model.store, &grads);
        }
        report.epoch_mean_loss.push(total / pairs.len() as f64);
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TokenId;
    use crate::encoder::{EncoderConfig, MIN_POSITIONS};
    use crate::numerics::grad_check;
    use proptest::prelude::*;
    use rand::Rng;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    fn brute(x1: &Matrix, x2: &Matrix) -> f64 {
        let mut total = 0.0;
        for i in 1..x1.rows() {
            let mut best = f64::NEG_INFINITY;
            for j in 1..x2.rows() {
                let (mut d, mut na, mut nb) = (0.0, 0.0, 0.0);
                for k in 0..x1.cols() {
                    d += x1.get(i, k) * x2.get(j, k);
                    na += x1.get(i, k) * x1.get(i, k);
                    nb += x2.get(j, k) * x2.get(j, k);
                }
                best = best.max(d / (na.sqrt() * nb.sqrt()));
            }
            total += best;
        }
        total / (x1.rows() - 1) as f64
    }

    #[test]
    fn greedy_match_examples() {
        let x = m(&[&[9.0, 9.0], &[1.0, 2.0], &[3.0, -1.0]]);
        assert!((greedy_match(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        let one = m(&[&[0.0, 1.0], &[1.0, 2.0]]);
        let two = m(&[&[5.0, 5.0], &[1.0, 2.0], &[-4.0, 0.5]]);
        assert!((greedy_match(&one, &two).unwrap() - 1.0).abs() < 1e-12);
        let zero = m(&[&[1.0, 1.0], &[0.0, 0.0]]);
        assert!(matches!(greedy_match(&zero, &two), Err(Error::DegenerateInput(_))));
        assert!(greedy_match(&m(&[&[1.0, 1.0]]), &two).is_err());
    }

    #[test]
    fn greedy_match_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let l1 = rng.random_range(2..7);
            let l2 = rng.random_range(2..7);
            let d = rng.random_range(1..6);
            let a = Matrix::random_normal(l1, d, 1.0, &mut rng);
            let b = Matrix::random_normal(l2, d, 1.0, &mut rng);
            assert!((greedy_match(&a, &b).unwrap() - brute(&a, &b)).abs() <= 1e-12);
        }
    }

    #[test]
    fn f_bert_examples() {
        assert_eq!(harmonic(0.5, 0.5), 0.5);
        assert_eq!(harmonic(-0.5, 0.2), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = Matrix::random_normal(4, 3, 1.0, &mut rng);
            let b = Matrix::random_normal(6, 3, 1.0, &mut rng);
            let f = f_bert_reps(&a, &b).unwrap();
            assert_eq!(f, f_bert_reps(&b, &a).unwrap());
            assert!((-1.0..=1.0).contains(&f));
        }
    }

    #[test]
    fn layer_selection() {
        let layers = vec![vec![0.1, 0.5, 0.2, 0.9], vec![0.3, 0.1, 0.7, 0.2], vec![0.2, 0.4, 0.6, 0.8]];
        let sel = select_layer_from_scores(&layers, &layers[1]).unwrap();
        assert_eq!(sel.best_layer, 1);
        let neg: Vec<f64> = layers[2].iter().map(|x| -x).collect();
        assert_ne!(select_layer_from_scores(&layers, &neg).unwrap().best_layer, 2);
        let tied = vec![layers[0].clone(), layers[0].clone()];
        assert_eq!(select_layer_from_scores(&tied, &layers[0]).unwrap().best_layer, 1);
        assert!(select_layer_from_scores(&layers, &[1.0, 2.0]).is_err());
        assert!(matches!(select_layer_from_scores(&layers, &[1.0; 4]), Err(Error::DegenerateInput(_))));
    }

    fn tiny() -> EncoderConfig {
        EncoderConfig { d_model: 8, n_layers: 2, n_heads: 2, ffn_width: 12, max_positions: MIN_POSITIONS, dropout: 0.0, vocab_size: 12 }
    }

    fn seq(ids: &[u32]) -> TokenSequence {
        TokenSequence::from_body(ids.iter().map(|&i| TokenId(i)))
    }

    fn encoder(config: &EncoderConfig, seed: u64) -> (Encoder, ParamStore) {
        let mut store = ParamStore::new();
        let e = Encoder::init(config, &mut store, "encoder.", &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (e, store)
    }

    #[test]
    fn features_clamp_to_available_layers() {
        assert_eq!(feature_layers(4), vec![0, 1, 2, 3, 4]);
        assert_eq!(feature_layers(10), (3..11).collect::<Vec<_>>());
        let (e, s) = encoder(&EncoderConfig { n_layers: 4, ..tiny() }, 1);
        let p = SentencePair { s1: seq(&[5, 6]), s2: seq(&[5, 6]), label: None, judgment: None };
        let f = extract_features(&e, &s, &p).unwrap();
        assert_eq!(f.len(), 5);
        assert!(f.iter().all(|x| (x - 1.0).abs() < 1e-9));
        assert_eq!(f, extract_features(&e, &s, &p).unwrap());
    }

    fn gd_oracle(x: &[Vec<f64>], y: &[u8], lambda: f64) -> f64 {
        let k = x[0].len();
        let mut w = vec![0.0; k + 1];
        let obj = |w: &[f64]| {
            let mut s = 0.0;
            for (xi, &yi) in x.iter().zip(y) {
                let z = w[k] + (0..k).map(|j| w[j] * xi[j]).sum::<f64>();
                s += (1.0 + z.exp()).ln() - f64::from(yi) * z;
            }
            s + 0.5 * lambda * (0..k).map(|j| w[j] * w[j]).sum::<f64>()
        };
        for _ in 0..200_000 {
            let mut g = vec![0.0; k + 1];
            for (xi, &yi) in x.iter().zip(y) {
                let z = w[k] + (0..k).map(|j| w[j] * xi[j]).sum::<f64>();
                let r = 1.0 / (1.0 + (-z).exp()) - f64::from(yi);
                for j in 0..k {
                    g[j] += r * xi[j];
                }
                g[k] += r;
            }
            for j in 0..k {
                g[j] += lambda * w[j];
            }
            if g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-10 {
                break;
            }
            for j in 0..=k {
                w[j] -= 0.01 * g[j];
            }
        }
        obj(&w)
    }

    #[test]
    fn logreg_matches_gradient_descent_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..3 {
            let x: Vec<Vec<f64>> = (0..32).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let y: Vec<u8> = x.iter().map(|v| u8::from(v[0] + 0.5 * v[1] + rng.random_range(-0.5..0.5) > 0.0)).collect();
            let model = train_logreg(&x, &y, 1.0).unwrap();
            assert!((model.objective(&x, &y) - gd_oracle(&x, &y, 1.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn logreg_limits() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 - 4.5]).collect();
        let y: Vec<u8> = (0..10).map(|i| u8::from(i >= 5)).collect();
        let m = train_logreg(&x, &y, 1e-3).unwrap();
        assert!(x.iter().zip(&y).all(|(v, &t)| m.predict(v) == t));
        let y2: Vec<u8> = (0..10).map(|i| u8::from(i >= 7)).collect();
        let big = train_logreg(&x, &y2, 1e9).unwrap();
        assert!(big.weights[0].abs() < 1e-6);
        assert!((big.probability(&x[0]) - 0.3).abs() < 1e-6);
        assert!(train_logreg(&x, &[1; 10], 1.0).is_err());
    }

    #[test]
    fn binary_scores_example() {
        let s = binary_scores(&[1, 1, 0, 0], &[1, 0, 1, 0]);
        assert_eq!((s.precision, s.recall, s.f1, s.accuracy), (0.5, 0.5, 0.5, 0.5));
    }

    fn pairs() -> Vec<SentencePair> {
        let p = |a: &[u32], b: &[u32], y| SentencePair { s1: seq(a), s2: seq(b), label: Some(y), judgment: None };
        vec![p(&[5, 6, 7], &[7, 6, 5], 1), p(&[5, 6], &[9, 10, 11], 0), p(&[8, 9], &[9, 8], 1), p(&[10, 11], &[5, 8], 0)]
    }

    #[test]
    fn fine_tune_loss_passes_grad_check() {
        let ps = pairs();
        for seed in 0..3 {
            let (e, s) = encoder(&tiny(), seed);
            let init = LogRegModel { weights: vec![0.7, -0.4, 1.1], bias: 0.2, l2_lambda: 1.0 };
            let mut model = ParaphraseModel::new(&e, &s, &init).unwrap();
            model.store.scale_all(3.0);
            let r = grad_check(|t, v| model.loss(t, v, &ps[(seed as usize) % 4], &mut Mode::Eval), &model.store, 1e-3).unwrap();
            assert!(r.passes(1e-4), "{r:?}");
        }
    }

    #[test]
    fn fine_tuning_runs_without_dropout() {
        let (e, s) = encoder(&EncoderConfig { dropout: 0.5, ..tiny() }, 2);
        let ps = pairs();
        let (model, report) = fine_tune_paraphrase(&e, &s, &ps, &FineTuneHyper { epochs: 5, lr: 1e-3, ..Default::default() }).unwrap();
        assert_eq!(report.lr_ratio, 1000.0);
        assert!(report.epoch_mean_loss.last().unwrap() < &report.epoch_mean_loss[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let run = |rng: &mut ChaCha8Rng| {
            let tape = Tape::new();
            let vars = model.store.register(&tape);
            let z = model.logit(&tape, &vars, &ps[0], &mut fine_tune_mode(rng)).unwrap();
            tape.scalar(z)
        };
        assert_eq!(run(&mut rng), run(&mut rng));
        let one_class: Vec<_> = ps.iter().filter(|p| p.label == Some(1)).cloned().collect();
        assert!(fine_tune_paraphrase(&e, &s, &one_class, &FineTuneHyper::default()).is_err());
    }

    #[test]
    fn pair_jsonl() {
        let text = "{\"s1\":[\"a\"],\"s2\":[\"b\"],\"label\":1,\"judgment\":0.5}\n{\"s1\":[\"a\"],\"s2\":[\"b\"],\"label\":null,\"judgment\":null}\n";
        assert_eq!(parse_pairs(text).unwrap().len(), 2);
        assert!(matches!(parse_pairs("{\"s1\":[\"a\"],\"s2\":[\"b\"],\"label\":2,\"judgment\":null}"), Err(Error::Validation(_))));
        assert!(matches!(parse_pairs("{"), Err(Error::Parse { line: 1, .. })));
    }

    proptest! {
        #[test]
        fn auroc_is_monotone_invariant(scores in proptest::collection::vec(-5.0f64..5.0, 4..20), seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut labels: Vec<bool> = scores.iter().map(|_| rng.random()).collect();
            labels[0] = true;
            labels[1] = false;
            let a = crate::numerics::auroc(&scores, &labels).unwrap();
            let t: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
            prop_assert!((a - crate::numerics::auroc(&t, &labels).unwrap()).abs() < 1e-12);
        }
    }
}
