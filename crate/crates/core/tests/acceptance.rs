//! Acceptance criteria 1–9. Each test prints one `criterion N: PASS|FAIL`
//! line to stderr, then asserts. Criteria 3, 4, 6–9 share two default-config
//! runs of the full pipeline (seed 7) built once per test binary.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use qarep_core::bertscore::{greedy_match, train_logreg};
use qarep_core::corpus::{tokenize_words, Span, TokenId, TokenSequence, Vocabulary};
use qarep_core::encoder::{EncoderConfig, MIN_POSITIONS};
use qarep_core::harness::{run_grad_checks, run_pipeline, LabelSource, MetricsReport, RunConfig, Stage};
use qarep_core::labels::{densify, sparsify_topk, SparseSpanLabels, SpanDistributionPair};
use qarep_core::numerics::{auroc, cross_entropy_to_target, entropy, log_softmax, pearson, softmax, Matrix, ProbabilityVector};
use qarep_core::prompts::ner::{
    direct_question_tags, init_output_from_prompts, read_ner, split_tag, train_ner, NerHyper, NerModel, TagSet,
    TaggedSentence, OUTSIDE,
};
use qarep_core::prompts::sentiment::{
    best_span, compute_calibration, decide, evaluate_sentiment, extract_rationale, read_sentiment_data, sentiment_score,
};
use qarep_core::prompts::{bundled_conll_prompts, bundled_sentiment_prompts, CALIBRATION_WORDS};
use qarep_core::seed::derive_seed;
use qarep_core::student::{
    decode_span, encode_passage, question_embed, train_distill, DistillHyper, LossKind, StudentModel, TrainBatch,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const SEED: u64 = 7;

struct Checks {
    id: u8,
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Checks {
    fn new(id: u8) -> Self {
        Self { id, failures: Vec::new(), notes: Vec::new() }
    }

    fn check(&mut self, ok: bool, what: impl Into<String>) {
        let what = what.into();
        if ok {
            self.notes.push(what);
        } else {
            self.failures.push(what);
        }
    }

    fn finish(self) {
        let status = if self.failures.is_empty() { "PASS" } else { "FAIL" };
        let detail = if self.failures.is_empty() { self.notes.join("; ") } else { self.failures.join("; ") };
        let _ = writeln!(std::io::stderr(), "criterion {}: {status} ({detail})", self.id);
        assert!(self.failures.is_empty(), "criterion {} failed: {}", self.id, self.failures.join("; "));
    }
}

struct Run {
    out: PathBuf,
    report: MetricsReport,
}

struct Fixture {
    a: Run,
    b: Run,
}

fn fresh_dir(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    if dir.exists() {
        fs::remove_dir_all(&dir).unwrap();
    }
    dir
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let run = |name: &str| {
            let out = fresh_dir(name);
            let report = run_pipeline(&RunConfig::with_seed(SEED), &out).expect("default pipeline runs");
            Run { out, report }
        };
        Fixture { a: run("run-a"), b: run("run-b") }
    })
}

fn load_vocab(out: &Path) -> Vocabulary {
    let tokens: Vec<String> = serde_json::from_slice(&fs::read(out.join("synth/vocab.json")).unwrap()).unwrap();
    Vocabulary::from_tokens(tokens).unwrap()
}

fn load_student(out: &Path, vocab: &Vocabulary) -> StudentModel {
    StudentModel::load(&out.join("distill/student.ckpt"), vocab.len()).unwrap()
}

fn tiny(vocab: usize) -> EncoderConfig {
    EncoderConfig { d_model: 8, n_layers: 2, n_heads: 2, ffn_width: 12, max_positions: MIN_POSITIONS, dropout: 0.0, vocab_size: vocab }
}

fn random_seq(rng: &mut ChaCha8Rng, vocab: u32, len: usize) -> TokenSequence {
    TokenSequence::from_body((0..len).map(|_| TokenId(rng.random_range(4..vocab))))
}

fn random_logits(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Distribution over `n` slots with small integer weights, so spans tie.
fn quantized(rng: &mut ChaCha8Rng, n: usize) -> ProbabilityVector {
    let mut w: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..4u8))).collect();
    if w.iter().all(|&x| x == 0.0) {
        w[rng.random_range(0..n)] = 1.0;
    }
    let total: f64 = w.iter().sum();
    ProbabilityVector::new(w.into_iter().map(|x| x / total).collect()).unwrap()
}

#[test]
fn criterion_1_numerical_core() {
    let mut c = Checks::new(1);
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_sum, mut worst_shift, mut worst_kl_neg, mut worst_self) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        let z = random_logits(&mut rng, n, 30.0);
        let p = softmax(&z).unwrap();
        worst_sum = worst_sum.max((p.as_slice().iter().sum::<f64>() - 1.0).abs());
        let shift = rng.random_range(-50.0..50.0);
        let shifted: Vec<f64> = z.iter().map(|x| x + shift).collect();
        let ps = softmax(&shifted).unwrap();
        for (a, b) in p.as_slice().iter().zip(ps.as_slice()) {
            worst_shift = worst_shift.max((a - b).abs());
        }
        let q = random_logits(&mut rng, n, 10.0);
        let kl = cross_entropy_to_target(&p, &log_softmax(&q).unwrap()).unwrap() - entropy(&p);
        worst_kl_neg = worst_kl_neg.max(-kl);
        let kl_self = cross_entropy_to_target(&p, &log_softmax(&z).unwrap()).unwrap() - entropy(&p);
        worst_self = worst_self.max(kl_self.abs());
    }
    c.check(worst_sum <= 1e-9, format!("softmax sum error {worst_sum:.1e}"));
    c.check(worst_shift <= 1e-12, format!("shift error {worst_shift:.1e}"));
    c.check(worst_kl_neg <= 1e-12, format!("most negative KL {:.1e}", -worst_kl_neg));
    c.check(worst_self <= 1e-12, format!("max |KL(p,p)| {worst_self:.1e}"));
    let results = run_grad_checks(&[0, 1, 2]).unwrap();
    let losses: BTreeSet<&str> = results.iter().map(|r| r.loss.as_str()).collect();
    let worst = results.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
    c.check(results.len() == 15 && losses.len() == 5, format!("{} gradient checks over {} losses", results.len(), losses.len()));
    for r in results.iter().filter(|r| !r.passed || r.max_relative_error >= 1e-4) {
        c.check(false, format!("{} seed {} rel error {:.2e} at {}", r.loss, r.seed, r.max_relative_error, r.worst_parameter));
    }
    c.check(worst < 1e-4, format!("worst grad rel error {worst:.2e}"));
    let secs = t0.elapsed().as_secs_f64();
    c.check(secs < 120.0, format!("{secs:.1}s"));
    c.finish();
}

fn oracle_decode(ps: &[f64], pe: &[f64], max_len: usize) -> Option<Span> {
    let ln = |p: f64| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY };
    let mut all = Vec::new();
    for i in 1..ps.len() {
        for j in i..ps.len() {
            if j - i < max_len {
                all.push((ln(ps[i]) + ln(pe[j]), i, j));
            }
        }
    }
    // best score first; ties by smaller start, then smaller end
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (v, i, j) = all[0];
    let null = ln(ps[0]) + ln(pe[0]);
    if null > v {
        None
    } else {
        Some(Span { start: i, end: j })
    }
}

fn oracle_best_span(start: &[f64], end: &[f64], max_tokens: usize) -> Span {
    let mut all = Vec::new();
    for i in 1..start.len() {
        for j in i..start.len() {
            if j - i < max_tokens {
                all.push((start[i] + end[j], i, j));
            }
        }
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    Span { start: all[0].1, end: all[0].2 }
}

fn oracle_greedy(x1: &Matrix, x2: &Matrix) -> f64 {
    let mut total = 0.0;
    for i in 1..x1.rows() {
        let mut best = f64::NEG_INFINITY;
        for j in 1..x2.rows() {
            let (u, v) = (x1.row(i), x2.row(j));
            let mut uv = 0.0;
            let mut uu = 0.0;
            let mut vv = 0.0;
            for k in 0..u.len() {
                uv += u[k] * v[k];
                uu += u[k] * u[k];
                vv += v[k] * v[k];
            }
            best = best.max(uv / (uu.sqrt() * vv.sqrt()));
        }
        total += best;
    }
    total / (x1.rows() - 1) as f64
}

fn oracle_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `Σ softplus(z) − y z + λ/2 ‖w‖²`, bias unregularized; `theta = [w.., b]`.
fn logreg_objective(theta: &[f64], xs: &[Vec<f64>], ys: &[u8], lambda: f64) -> f64 {
    let k = theta.len() - 1;
    let mut total = 0.5 * lambda * theta[..k].iter().map(|w| w * w).sum::<f64>();
    for (x, &y) in xs.iter().zip(ys) {
        let z = theta[k] + x.iter().zip(theta).map(|(a, w)| a * w).sum::<f64>();
        total += softplus(z) - f64::from(y) * z;
    }
    total
}

/// Gradient descent with step 1/L, L bounding the Hessian.
fn logreg_oracle(xs: &[Vec<f64>], ys: &[u8], lambda: f64) -> Vec<f64> {
    let k = xs[0].len();
    let lip = 0.25 * xs.iter().map(|x| 1.0 + x.iter().map(|a| a * a).sum::<f64>()).sum::<f64>() + lambda;
    let mut theta = vec![0.0; k + 1];
    for _ in 0..200_000 {
        let mut g = vec![0.0; k + 1];
        for (w, gw) in theta[..k].iter().zip(&mut g) {
            *gw = lambda * w;
        }
        for (x, &y) in xs.iter().zip(ys) {
            let z = theta[k] + x.iter().zip(&theta).map(|(a, w)| a * w).sum::<f64>();
            let r = 1.0 / (1.0 + (-z).exp()) - f64::from(y);
            for (gi, a) in g.iter_mut().zip(x) {
                *gi += r * a;
            }
            g[k] += r;
        }
        if g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-11 {
            break;
        }
        for (t, gi) in theta.iter_mut().zip(&g) {
            *t -= gi / lip;
        }
    }
    theta
}

#[test]
fn criterion_2_oracle_equivalence() {
    let mut c = Checks::new(2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);

    let mut mismatches = 0;
    for _ in 0..500 {
        let n = rng.random_range(2..14);
        let pred = SpanDistributionPair { start: quantized(&mut rng, n), end: quantized(&mut rng, n) };
        let max_len = rng.random_range(1..6);
        let got = decode_span(&pred, max_len).unwrap().span;
        mismatches += usize::from(got != oracle_decode(pred.start.as_slice(), pred.end.as_slice(), max_len));
    }
    c.check(mismatches == 0, format!("decode_span {mismatches}/500 mismatches"));

    let vocab = Vocabulary::build((0..26).map(|i| format!("w{i}")));
    let model = StudentModel::new(&tiny(vocab.len()), 5).unwrap();
    let v = vocab.len() as u32;
    let mut mismatches = 0;
    for k in 0..500 {
        if k % 5 == 0 {
            let (xl, ql) = (rng.random_range(1..12), rng.random_range(1..5));
            let x = random_seq(&mut rng, v, xl);
            let q = random_seq(&mut rng, v, ql);
            let reps = encode_passage(&model, &x).unwrap();
            let qe = question_embed(&model, &q).unwrap();
            let dots = |f: &[f64]| (0..reps.rows()).map(|i| reps.row(i).iter().zip(f).map(|(a, b)| a * b).sum()).collect::<Vec<f64>>();
            let expected = oracle_best_span(&dots(&qe.f_start), &dots(&qe.f_end), 5);
            mismatches += usize::from(extract_rationale(&model, &vocab, &x, &q, 5).unwrap().span != expected);
        } else {
            let n = rng.random_range(2..14);
            let start: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(-3i8..3))).collect();
            let end: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(-3i8..3))).collect();
            let max_tokens = rng.random_range(1..7);
            mismatches += usize::from(best_span(&start, &end, max_tokens).unwrap().0 != oracle_best_span(&start, &end, max_tokens));
        }
    }
    c.check(mismatches == 0, format!("extract_rationale/best_span {mismatches}/500 mismatches"));

    let mut worst = 0.0f64;
    for _ in 0..200 {
        let d = rng.random_range(1..10);
        let m1 = Matrix::random_normal(rng.random_range(2..9), d, 1.0, &mut rng);
        let m2 = Matrix::random_normal(rng.random_range(2..9), d, 1.0, &mut rng);
        worst = worst.max((greedy_match(&m1, &m2).unwrap() - oracle_greedy(&m1, &m2)).abs());
    }
    c.check(worst <= 1e-12, format!("greedy_match error {worst:.1e}"));

    let (mut worst_auc, mut worst_r) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let n = rng.random_range(4..40);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..6u8)) * 0.25).collect();
        worst_auc = worst_auc.max((auroc(&scores, &labels).unwrap() - oracle_auroc(&scores, &labels)).abs());
        let x = random_logits(&mut rng, n, 5.0);
        let y: Vec<f64> = x.iter().map(|v| 0.5 * v + rng.random_range(-2.0..2.0)).collect();
        worst_r = worst_r.max((pearson(&x, &y).unwrap() - oracle_pearson(&x, &y)).abs());
    }
    c.check(worst_auc <= 1e-9, format!("auroc error {worst_auc:.1e}"));
    c.check(worst_r <= 1e-9, format!("pearson error {worst_r:.1e}"));

    let xs: Vec<Vec<f64>> = (0..32).map(|_| random_logits(&mut rng, 5, 2.0)).collect();
    let ys: Vec<u8> = xs.iter().map(|x| u8::from(x[0] - 0.5 * x[2] + rng.random_range(-1.0..1.0) > 0.0)).collect();
    let model = train_logreg(&xs, &ys, 1.0).unwrap();
    let mut theta = model.weights.clone();
    theta.push(model.bias);
    let got = logreg_objective(&theta, &xs, &ys, 1.0);
    let best = logreg_objective(&logreg_oracle(&xs, &ys, 1.0), &xs, &ys, 1.0);
    c.check((got - best).abs() <= 1e-6, format!("logreg objective gap {:.1e}", (got - best).abs()));
    c.finish();
}

#[test]
fn criterion_3_distillation_convergence() {
    let mut c = Checks::new(3);
    let f = fixture();
    let r = &f.a.report;
    let ratio = r.metric("distill", "loss_ratio").unwrap();
    let agreement = r.metric("distill", "start_agreement").unwrap();
    c.check(r.metric("synth", "unlabeled_passages") == Some(64.0), "64 passages");
    let per_passage = r.metric("synth", "max_questions_per_passage").unwrap();
    c.check(per_passage <= 10.0, format!("at most {per_passage} questions per passage"));
    c.check(ratio <= 0.5, format!("loss ratio {ratio:.3}"));
    c.check(agreement >= 0.9, format!("start agreement {agreement:.3}"));
    let distill_secs: f64 = r.timing.stages.iter().filter(|s| s.stage == Stage::Distill.name()).map(|s| s.seconds).sum();
    c.check(distill_secs < 300.0, format!("distill {distill_secs:.1}s"));
    let total = r.timing.total_seconds;
    c.check(total < 300.0, format!("full run {total:.1}s"));
    let hash = |run: &Run| hex::encode(Sha256::digest(fs::read(run.out.join("distill/student.ckpt")).unwrap()));
    c.check(hash(&f.a) == hash(&f.b), format!("checkpoint sha256 {}.. reproduced", &hash(&f.a)[..12]));
    c.finish();
}

#[test]
fn criterion_4_per_passage_batching() {
    let mut c = Checks::new(4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for per_passage in [1, 3, 10] {
        let mut model = StudentModel::new(&tiny(20), 9).unwrap();
        let batches: Vec<TrainBatch> = (0..6)
            .map(|p| {
                let passage = random_seq(&mut rng, 20, 8);
                let questions = (0..per_passage)
                    .map(|q| {
                        let s = rng.random_range(1..9);
                        (random_seq(&mut rng, 20, 3), SparseSpanLabels::one_hot(format!("{p}-{q}"), s, s))
                    })
                    .collect();
                TrainBatch { passage, questions }
            })
            .collect();
        let before = model.passage_encodes.get();
        let hp = DistillHyper { epochs: 2, seed: 1, ..DistillHyper::default() };
        let report = train_distill(&mut model, &batches, &hp).unwrap();
        let counted = model.passage_encodes.get() - before;
        c.check(
            report.passage_encodings == vec![batches.len(); 2] && counted == 2 * batches.len(),
            format!("{per_passage} q/passage: {counted} encodes for 2x{} batches", batches.len()),
        );
    }
    let r = &fixture().a.report;
    let (enc, batches) = (r.metric("distill", "passage_encodings_per_epoch"), r.metric("distill", "batches"));
    c.check(enc.is_some() && enc == batches, format!("pipeline run: {enc:?} encodes per epoch for {batches:?} batches"));
    c.finish();
}

#[test]
fn criterion_5_sparsification() {
    let mut c = Checks::new(5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut argmax_bad, mut idem_bad, mut worst_sum) = (0, 0, 0.0f64);
    for _ in 0..1000 {
        let n = rng.random_range(1..64);
        let p = softmax(&random_logits(&mut rng, n, 6.0)).unwrap();
        let s = sparsify_topk(&p, 8, true).unwrap();
        worst_sum = worst_sum.max((s.iter().map(|e| e.1).sum::<f64>() - 1.0).abs());
        let dense = densify(&s, n).unwrap();
        argmax_bad += usize::from(dense.argmax() != p.argmax());
        let again = sparsify_topk(&dense, 8, true).unwrap();
        let same = again.len() == s.len() && again.iter().zip(&s).all(|(a, b)| a.0 == b.0 && (a.1 - b.1).abs() <= 1e-12);
        idem_bad += usize::from(!same);
    }
    c.check(argmax_bad == 0, format!("argmax changed {argmax_bad}/1000"));
    c.check(idem_bad == 0, format!("not idempotent {idem_bad}/1000"));
    c.check(worst_sum <= 1e-9, format!("sum error {worst_sum:.1e}"));
    c.finish();
}

#[test]
fn criterion_6_sentiment_mechanics() {
    let mut c = Checks::new(6);
    let out = &fixture().a.out;
    let vocab = load_vocab(out);
    let student = load_student(out, &vocab);
    let prompt = bundled_sentiment_prompts().into_iter().next().unwrap();
    let cal = compute_calibration(&student, &vocab, &prompt, &CALIBRATION_WORDS).unwrap();
    let (q0, q1) = (tokenize_words(&prompt.q0, &vocab), tokenize_words(&prompt.q1, &vocab));
    let (mut m0, mut m1) = (0.0, 0.0);
    for w in CALIBRATION_WORDS {
        let x = tokenize_words([w], &vocab);
        m0 += sentiment_score(&student, &x, &q0).unwrap() - cal.c0;
        m1 += sentiment_score(&student, &x, &q1).unwrap() - cal.c1;
    }
    let n = CALIBRATION_WORDS.len() as f64;
    let worst = (m0 / n).abs().max((m1 / n).abs());
    c.check(worst <= 1e-9, format!("calibrated mean over W {worst:.1e}"));

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let dyadic = |rng: &mut ChaCha8Rng| f64::from(rng.random_range(-100_000i32..100_000)) / 1024.0;
    let mut flips = 0;
    for _ in 0..1000 {
        let (s0, s1, c0, c1, k) = (dyadic(&mut rng), dyadic(&mut rng), dyadic(&mut rng), dyadic(&mut rng), dyadic(&mut rng));
        flips += usize::from(decide(s0 + k, s1 + k, c0, c1).label != decide(s0, s1, c0, c1).label);
    }
    c.check(flips == 0, format!("shared shift changed {flips}/1000 decisions"));

    let data = read_sentiment_data(&out.join("synth/sentiment.jsonl")).unwrap();
    c.check(data.len() == 20, format!("{} sentences", data.len()));
    match evaluate_sentiment(&student, &vocab, std::slice::from_ref(&prompt), &data, &CALIBRATION_WORDS) {
        Ok(rep) => {
            let acc: Vec<String> = rep.per_prompt.iter().map(|p| format!("{:.2}", p.accuracy)).collect();
            c.check(rep.per_prompt.len() == 1, format!("prompt pair 1 accuracy {}", acc.join(",")));
        }
        Err(e) => c.check(false, format!("evaluate_sentiment failed: {e}")),
    }
    let tables = fixture().a.report.tables.get("eval-sentiment").and_then(|t| t.get("accuracy_by_prompt"));
    c.check(tables.is_some_and(|t| !t.is_empty()), "pipeline emits per-prompt accuracies");
    c.finish();
}

#[test]
fn criterion_7_ner_prompt_init() {
    let mut c = Checks::new(7);
    let out = &fixture().a.out;
    let vocab = load_vocab(out);
    let student = load_student(out, &vocab);
    let records = read_ner(&out.join("synth/ner.jsonl")).unwrap();
    let types: BTreeSet<String> = records
        .iter()
        .flat_map(|r| r.tags.iter())
        .filter(|t| t.as_str() != OUTSIDE)
        .filter_map(|t| split_tag(t).map(|(_, kind)| kind.to_string()))
        .collect();
    let types: Vec<String> = types.into_iter().collect();
    let tags = TagSet::from_types(&types);
    let prompts = bundled_conll_prompts();
    let m = init_output_from_prompts(&student, &vocab, &tags, &prompts).unwrap();
    let worst = (0..m.rows()).map(|i| (m.row(i).iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs()).fold(0.0, f64::max);
    c.check(worst <= 1e-9, format!("row norm error {worst:.1e}"));
    let tied = types.iter().all(|t| {
        let b = tags.index(&format!("B-{t}")).unwrap();
        let i = tags.index(&format!("I-{t}")).unwrap();
        m.row(b) == m.row(i)
    });
    c.check(tied, format!("B/I rows identical for {} types", types.len()));

    let sentences: Vec<TaggedSentence> = records.iter().map(|r| TaggedSentence::from_record(r, &vocab, &tags).unwrap()).collect();
    let mut model = NerModel::new(&student, m, tags.clone()).unwrap();
    let differing = sentences
        .iter()
        .filter(|s| model.predict(&s.tokens).unwrap() != direct_question_tags(&student, &vocab, &tags, &prompts, &s.tokens).unwrap())
        .count();
    c.check(differing == 0, format!("zero-step tags differ on {differing}/{} sentences", sentences.len()));

    let hp = NerHyper { epochs: 5, seed: derive_seed(SEED, "ner"), ..NerHyper::default() };
    let report = train_ner(&mut model, &sentences[..5], &hp).unwrap();
    let curve: Vec<f64> = std::iter::once(report.initial_loss).chain(report.epoch_loss.iter().copied()).collect();
    let monotone = curve.windows(2).all(|w| w[1] < w[0]);
    let shown: Vec<String> = curve.iter().map(|l| format!("{l:.3}")).collect();
    c.check(monotone && curve.len() == 6, format!("5-shot loss {}", shown.join(" > ")));
    c.finish();
}

#[test]
fn criterion_8_ablation_plumbing() {
    let mut c = Checks::new(8);
    let out = fresh_dir("ablations");
    let variants: [(&str, LabelSource, LossKind); 4] = [
        ("teacher-soft", LabelSource::Teacher, LossKind::Soft),
        ("teacher-hard", LabelSource::Teacher, LossKind::Hard),
        ("gold", LabelSource::Gold, LossKind::Soft),
        ("generated", LabelSource::Generated, LossKind::Soft),
    ];
    let mut hashes = BTreeSet::new();
    for (name, labels, loss) in variants {
        let mut cfg = RunConfig::with_seed(SEED);
        cfg.distill.labels = labels;
        cfg.distill.loss = loss;
        match run_pipeline(&cfg, &out) {
            Ok(r) => {
                let complete = r.failed_stage.is_none()
                    && r.error.is_none()
                    && Stage::ALL.iter().all(|s| r.metrics.get(s.name()).is_some_and(|m| !m.is_empty()));
                let agreement = r.metric("distill", "start_agreement").unwrap_or(f64::NAN);
                c.check(complete, format!("{name} complete (agreement {agreement:.2})"));
                hashes.insert(r.config_hash);
            }
            Err(e) => c.check(false, format!("{name} failed: {e}")),
        }
    }
    c.check(hashes.len() == 4, format!("{} distinct config hashes", hashes.len()));
    c.finish();
}

#[test]
fn criterion_9_determinism() {
    let mut c = Checks::new(9);
    let f = fixture();
    c.check(f.a.report.body_json() == f.b.report.body_json(), "in-memory reports identical without timing");
    let body = |run: &Run| {
        let mut v: serde_json::Value = serde_json::from_slice(&fs::read(run.out.join("report.json")).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("timing");
        serde_json::to_vec(&v).unwrap()
    };
    c.check(body(&f.a) == body(&f.b), "report.json files identical without timing");
    c.finish();
}
