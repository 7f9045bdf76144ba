//! Staged experiment runner: synth → teacher → relabel → distill → evals.
//!
//! Every stage reads its inputs from upstream stage directories and writes
//! its outputs plus a `metrics.json` into its own, so cached and fresh runs
//! assemble the same report.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::cache::{self, CacheState, RunLock};
use super::config::{LabelSource, RunConfig, StudentInit};
use super::metrics::score_predictions;
use crate::bertscore::{
    binary_scores, extract_features, f_bert, fine_tune_paraphrase, read_pairs, select_layer, train_logreg, validate_pairs,
    write_pairs, SentencePair,
};
use crate::corpus::{
    read_dataset_records, tokenize_dataset, write_dataset, Dataset, DatasetLimits, PassageRecord, Vocabulary,
};
use crate::error::{Error, Result};
use crate::labels::{read_labels, write_labels, SparseSpanLabels};
use crate::numerics::{auroc, ProbabilityVector};
use crate::prompts::ner::{
    bio_decode, init_output_from_prompts, random_output, read_ner, split_tag, train_ner, write_ner, NerModel,
    TagSet, TaggedSentence, OUTSIDE,
};
use crate::prompts::sentiment::{evaluate_sentiment, read_sentiment_data, write_sentiment_data};
use crate::prompts::{
    bundled_conll_prompts, bundled_sentiment_prompts, bundled_wnut_prompts, parse_prompt_map, parse_sentiment_prompts,
    PromptMap, SentimentPrompt,
};
use crate::qgen;
use crate::seed::derive_seed;
use crate::student::{
    answer_question, decode_span, start_agreement, train_distill, StudentModel, TrainBatch,
};
use crate::synth::{self, NerRecord, PairRecord, SentimentRecord};
use crate::labels::SpanDistributionPair;
use crate::teacher::{examples_from_dataset, teacher_predict, train_teacher, TeacherHyper, TeacherModel};

pub const METRICS: &str = "metrics.json";
pub const REPORT: &str = "report.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Synth,
    Teacher,
    Relabel,
    Distill,
    EvalQa,
    EvalParaphrase,
    EvalNer,
    EvalSentiment,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Synth,
        Stage::Teacher,
        Stage::Relabel,
        Stage::Distill,
        Stage::EvalQa,
        Stage::EvalParaphrase,
        Stage::EvalNer,
        Stage::EvalSentiment,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Teacher => "teacher",
            Stage::Relabel => "relabel",
            Stage::Distill => "distill",
            Stage::EvalQa => "eval-qa",
            Stage::EvalParaphrase => "eval-paraphrase",
            Stage::EvalNer => "eval-ner",
            Stage::EvalSentiment => "eval-sentiment",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// One row of a per-layer or per-epoch table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub index: usize,
    pub value: Option<f64>,
}

/// What a stage writes to its `metrics.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub values: BTreeMap<String, f64>,
    pub tables: BTreeMap<String, Vec<TableRow>>,
    pub notes: BTreeMap<String, String>,
}

impl StageMetrics {
    /// Non-finite values become notes; JSON has no NaN.
    pub fn put(&mut self, name: &str, v: f64) {
        if v.is_finite() {
            self.values.insert(name.into(), v);
        } else {
            self.notes.insert(name.into(), format!("{v}"));
        }
    }

    pub fn note(&mut self, name: &str, v: impl Into<String>) {
        self.notes.insert(name.into(), v.into());
    }

    pub fn table(&mut self, name: &str, values: impl IntoIterator<Item = Option<f64>>) {
        let rows = values
            .into_iter()
            .enumerate()
            .map(|(index, value)| TableRow { index, value: value.filter(|v| v.is_finite()) })
            .collect();
        self.tables.insert(name.into(), rows);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRun {
    pub stage: String,
    pub cached: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stages: Vec<StageRun>,
    /// Stages executed rather than served from cache.
    pub executed: usize,
    pub total_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub config_hash: String,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    /// Stage → metric name → value.
    pub metrics: BTreeMap<String, BTreeMap<String, f64>>,
    pub tables: BTreeMap<String, BTreeMap<String, Vec<TableRow>>>,
    pub notes: BTreeMap<String, BTreeMap<String, String>>,
    /// Stage → manifest digest.
    pub artifacts: BTreeMap<String, String>,
    /// Wall-clock and cache information; excluded from the body.
    pub timing: Timing,
}

impl MetricsReport {
    pub fn run_id_for(config_hash: &str) -> String {
        format!("run-{}", &config_hash[..12])
    }

    /// The report without wall-clock fields, pretty-printed.
    pub fn body_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("report serializes");
        v.as_object_mut().expect("object").remove("timing");
        serde_json::to_string_pretty(&v).expect("value serializes")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse { line: e.line(), message: e.to_string() })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Checks that the report was produced by `config`.
    pub fn verify(&self, config: &RunConfig) -> Result<()> {
        let h = config.hash();
        if self.config_hash != h || self.run_id != Self::run_id_for(&h) {
            return Err(Error::Validation(format!(
                "report config hash {} does not match config hash {h}",
                self.config_hash
            )));
        }
        Ok(())
    }

    pub fn metric(&self, stage: &str, name: &str) -> Option<f64> {
        self.metrics.get(stage)?.get(name).copied()
    }
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_slice(&fs::read(path)?).map_err(|e| Error::Parse { line: e.line(), message: e.to_string() })
}

fn checked_rate(num: usize, den: usize) -> f64 {
    if den == 0 {
        f64::NAN
    } else {
        num as f64 / den as f64
    }
}

/// A run over one output directory. Holds the directory lock while alive.
#[derive(Debug)]
pub struct Pipeline {
    config: RunConfig,
    out: PathBuf,
    config_hash: String,
    digests: BTreeMap<Stage, String>,
    runs: Vec<StageRun>,
    _lock: RunLock,
}

impl Pipeline {
    pub fn open(config: RunConfig, out: &Path) -> Result<Self> {
        config.validate()?;
        let lock = RunLock::acquire(out)?;
        let config_hash = config.hash();
        Ok(Self { config, out: out.to_path_buf(), config_hash, digests: BTreeMap::new(), runs: Vec::new(), _lock: lock })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        cache::stage_dir(&self.out, stage.name())
    }

    pub fn runs(&self) -> &[StageRun] {
        &self.runs
    }

    pub fn executed(&self) -> usize {
        self.runs.iter().filter(|r| !r.cached).count()
    }

    fn deps(&self, stage: Stage) -> Vec<Stage> {
        let c = &self.config;
        match stage {
            Stage::Synth => vec![],
            Stage::Teacher => vec![Stage::Synth],
            Stage::Relabel => vec![Stage::Synth, Stage::Teacher],
            Stage::Distill => {
                let mut d = vec![Stage::Synth];
                if c.distill.init == StudentInit::Teacher {
                    d.push(Stage::Teacher);
                }
                if c.distill.labels == LabelSource::Teacher {
                    d.push(Stage::Relabel);
                }
                d
            }
            Stage::EvalQa => vec![Stage::Synth, Stage::Teacher, Stage::Distill],
            Stage::EvalParaphrase | Stage::EvalNer | Stage::EvalSentiment => vec![Stage::Synth, Stage::Distill],
        }
    }

    /// The slice of the config a stage depends on.
    fn config_subset(&self, stage: Stage) -> Result<Vec<(&'static str, String)>> {
        let c = &self.config;
        Ok(match stage {
            Stage::Synth => {
                let mut parts = vec![
                    ("synth", json(&c.synth)),
                    ("generator", json(&c.generator)),
                    ("data", json(&c.data)),
                    ("ner.prompts", c.ner.prompts.clone()),
                    ("sentiment", json(&c.sentiment)),
                ];
                for (name, p) in c.data.paths() {
                    parts.push((name, cache::file_hash(p)?));
                }
                if let Some(p) = &c.sentiment.prompts {
                    parts.push(("sentiment.prompts.file", cache::file_hash(p)?));
                }
                if !matches!(c.ner.prompts.as_str(), "conll" | "wnut") {
                    parts.push(("ner.prompts.file", cache::file_hash(Path::new(&c.ner.prompts))?));
                }
                parts
            }
            Stage::Teacher => vec![("encoder", json(&c.encoder)), ("teacher", json(&c.teacher))],
            Stage::Relabel => vec![("relabel", json(&c.relabel))],
            Stage::Distill => vec![("encoder", json(&c.encoder)), ("distill", json(&c.distill))],
            Stage::EvalQa => vec![("qa", json(&c.qa))],
            Stage::EvalParaphrase => vec![("paraphrase", json(&c.paraphrase))],
            Stage::EvalNer => vec![("ner", json(&c.ner))],
            Stage::EvalSentiment => vec![("sentiment", json(&c.sentiment))],
        })
    }

    /// Runs `stage` (and anything it depends on) unless a fresh cached copy
    /// exists. Returns the stage's manifest digest.
    pub fn ensure(&mut self, stage: Stage) -> Result<String> {
        if let Some(d) = self.digests.get(&stage) {
            return Ok(d.clone());
        }
        // The seed enters every key, so changing it invalidates every stage.
        let mut parts: Vec<(&str, String)> = vec![("stage", stage.name().to_string()), ("seed", self.config.seed.to_string())];
        parts.extend(self.config_subset(stage)?);
        for dep in self.deps(stage) {
            let d = self.ensure(dep)?;
            parts.push((dep.name(), d));
        }
        let key = cache::stage_key(&parts);
        let t0 = Instant::now();
        let digest = match cache::check(&self.out, stage.name(), &key)? {
            CacheState::Fresh(m) => {
                log::info!("{}: cached", stage.name());
                self.runs.push(StageRun { stage: stage.name().into(), cached: true, seconds: t0.elapsed().as_secs_f64() });
                m.digest()
            }
            CacheState::Missing | CacheState::Outdated => {
                log::info!("{}: running", stage.name());
                let dir = cache::reset(&self.out, stage.name())?;
                let files = self
                    .execute(stage, &dir)
                    .map_err(|e| Error::Stage { stage: stage.name().into(), source: Box::new(e) })?;
                let m = cache::commit(&self.out, stage.name(), &key, &files)?;
                let seconds = t0.elapsed().as_secs_f64();
                log::info!("{}: done in {seconds:.1}s", stage.name());
                self.runs.push(StageRun { stage: stage.name().into(), cached: false, seconds });
                m.digest()
            }
        };
        self.digests.insert(stage, digest.clone());
        Ok(digest)
    }

    pub fn stage_metrics(&self, stage: Stage) -> Result<StageMetrics> {
        read_json(&self.stage_dir(stage).join(METRICS))
    }

    /// Report over the stages ensured so far.
    pub fn report(&self, failure: Option<(&str, &Error)>) -> Result<MetricsReport> {
        let mut report = MetricsReport {
            run_id: MetricsReport::run_id_for(&self.config_hash),
            config_hash: self.config_hash.clone(),
            failed_stage: failure.map(|(s, _)| s.to_string()),
            error: failure.map(|(_, e)| e.to_string()),
            metrics: BTreeMap::new(),
            tables: BTreeMap::new(),
            notes: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            timing: Timing {
                executed: self.executed(),
                total_seconds: self.runs.iter().map(|r| r.seconds).sum(),
                stages: self.runs.clone(),
            },
        };
        for (stage, digest) in &self.digests {
            let m = self.stage_metrics(*stage)?;
            let name = stage.name().to_string();
            report.artifacts.insert(name.clone(), digest.clone());
            if !m.values.is_empty() {
                report.metrics.insert(name.clone(), m.values);
            }
            if !m.tables.is_empty() {
                report.tables.insert(name.clone(), m.tables);
            }
            if !m.notes.is_empty() {
                report.notes.insert(name, m.notes);
            }
        }
        Ok(report)
    }

    // ----- artifact loading -----

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let tokens: Vec<String> = read_json(&self.stage_dir(Stage::Synth).join("vocab.json"))?;
        Vocabulary::from_tokens(tokens)
    }

    fn dataset(&self, file: &str, vocab: &Vocabulary) -> Result<Dataset> {
        let recs = read_dataset_records(&self.stage_dir(Stage::Synth).join(file), &DatasetLimits::default())?;
        Ok(tokenize_dataset(&recs, vocab))
    }

    pub fn teacher(&self, vocab: &Vocabulary) -> Result<TeacherModel> {
        TeacherModel::load(&self.stage_dir(Stage::Teacher).join("teacher.ckpt"), vocab.len())
    }

    pub fn student(&self, vocab: &Vocabulary) -> Result<StudentModel> {
        StudentModel::load(&self.stage_dir(Stage::Distill).join("student.ckpt"), vocab.len())
    }

    fn sentiment_prompts(&self) -> Result<Vec<SentimentPrompt>> {
        let s = &self.config.sentiment;
        let prompts = match &s.prompts {
            Some(p) => parse_sentiment_prompts(&fs::read_to_string(p)?)?,
            None => bundled_sentiment_prompts(),
        };
        Ok(if s.domain.is_empty() { prompts } else { prompts.iter().map(|p| p.substitute("movie", &s.domain)).collect() })
    }

    fn ner_prompts(&self) -> Result<PromptMap> {
        match self.config.ner.prompts.as_str() {
            "conll" => Ok(bundled_conll_prompts()),
            "wnut" => Ok(bundled_wnut_prompts()),
            path => parse_prompt_map(&fs::read_to_string(path)?),
        }
    }

    fn seed(&self, label: &str) -> u64 {
        derive_seed(self.config.seed, label)
    }

    fn execute(&self, stage: Stage, dir: &Path) -> Result<Vec<&'static str>> {
        match stage {
            Stage::Synth => self.run_synth(dir),
            Stage::Teacher => self.run_teacher(dir),
            Stage::Relabel => self.run_relabel(dir),
            Stage::Distill => self.run_distill(dir),
            Stage::EvalQa => self.run_eval_qa(dir),
            Stage::EvalParaphrase => self.run_eval_paraphrase(dir),
            Stage::EvalNer => self.run_eval_ner(dir),
            Stage::EvalSentiment => self.run_eval_sentiment(dir),
        }
    }

    // ----- stages -----

    fn run_synth(&self, dir: &Path) -> Result<Vec<&'static str>> {
        let c = &self.config;
        let d = &c.data;
        let limits = DatasetLimits::default();
        let corpus = synth::generate(&c.synth, self.seed("synth"))?;
        let labeled = match &d.labeled {
            Some(p) => read_dataset_records(p, &limits)?,
            None => corpus.labeled,
        };
        let dev = match &d.dev {
            Some(p) => read_dataset_records(p, &limits)?,
            None => corpus.dev,
        };
        let unlabeled: Vec<PassageRecord> = match &d.unlabeled {
            Some(p) => read_dataset_records(p, &limits)?.into_iter().map(|r| PassageRecord { qas: vec![], ..r }).collect(),
            None => corpus.unlabeled,
        };
        let pairs: Vec<PairRecord> = match &d.pairs {
            Some(p) => read_pairs(p)?,
            None => corpus.paraphrase,
        };
        validate_pairs(&pairs)?;
        let ner: Vec<NerRecord> = match &d.ner {
            Some(p) => read_ner(p)?,
            None => corpus.ner,
        };
        let sentiment: Vec<SentimentRecord> = match &d.sentiment {
            Some(p) => read_sentiment_data(p)?,
            None => corpus.sentiment,
        };

        let mut words = synth::world_words();
        let passage_words = |recs: &[PassageRecord], w: &mut Vec<String>| {
            for r in recs {
                w.extend(r.context.iter().cloned());
                for q in &r.qas {
                    w.extend(q.question.iter().cloned());
                }
            }
        };
        passage_words(&labeled, &mut words);
        passage_words(&dev, &mut words);
        passage_words(&unlabeled, &mut words);
        for p in &pairs {
            words.extend(p.s1.iter().chain(&p.s2).cloned());
        }
        for r in &ner {
            words.extend(r.tokens.iter().cloned());
        }
        for r in &sentiment {
            words.extend(r.tokens.iter().cloned());
        }
        for p in self.sentiment_prompts()? {
            words.extend(p.q0.into_iter().chain(p.q1));
        }
        for q in self.ner_prompts()?.into_values() {
            words.extend(q);
        }
        words.extend(c.sentiment.calibration_words.iter().cloned());
        let vocab = Vocabulary::build(words);

        let gcfg = c.generator.params(self.seed("qgen"));
        let mut generated = Vec::with_capacity(unlabeled.len());
        let (mut n_questions, mut n_spans, mut max_per_passage) = (0usize, 0usize, 0usize);
        for (passage, _) in tokenize_dataset(&unlabeled, &vocab) {
            let qas = qgen::generate(c.generator.kind, &passage, &gcfg)?;
            n_questions += qas.len();
            n_spans += qas.iter().filter(|q| q.answer_span.is_some()).count();
            max_per_passage = max_per_passage.max(qas.len());
            generated.push(qgen::to_record(&passage, &qas));
        }

        write_json(&dir.join("vocab.json"), &vocab.tokens())?;
        write_dataset(&dir.join("labeled.jsonl"), &labeled)?;
        write_dataset(&dir.join("dev.jsonl"), &dev)?;
        write_dataset(&dir.join("generated.jsonl"), &generated)?;
        write_pairs(&dir.join("pairs.jsonl"), &pairs)?;
        write_ner(&dir.join("ner.jsonl"), &ner)?;
        write_sentiment_data(&dir.join("sentiment.jsonl"), &sentiment)?;

        let mut m = StageMetrics::default();
        m.put("vocab_size", vocab.len() as f64);
        m.put("labeled_passages", labeled.len() as f64);
        m.put("labeled_questions", labeled.iter().map(|r| r.qas.len()).sum::<usize>() as f64);
        m.put("dev_questions", dev.iter().map(|r| r.qas.len()).sum::<usize>() as f64);
        m.put("unlabeled_passages", unlabeled.len() as f64);
        m.put("generated_questions", n_questions as f64);
        m.put("generated_with_span", n_spans as f64);
        m.put("max_questions_per_passage", max_per_passage as f64);
        m.put("paraphrase_pairs", pairs.len() as f64);
        m.put("ner_sentences", ner.len() as f64);
        m.put("sentiment_sentences", sentiment.len() as f64);
        write_json(&dir.join(METRICS), &m)?;
        Ok(vec!["vocab.json", "labeled.jsonl", "dev.jsonl", "generated.jsonl", "pairs.jsonl", "ner.jsonl", "sentiment.jsonl", METRICS])
    }

    fn run_teacher(&self, dir: &Path) -> Result<Vec<&'static str>> {
        let c = &self.config;
        let vocab = self.vocabulary()?;
        let enc = c.encoder.with_vocab(vocab.len());
        let train = examples_from_dataset(&self.dataset("labeled.jsonl", &vocab)?, enc.max_positions)?;
        let heldout = examples_from_dataset(&self.dataset("dev.jsonl", &vocab)?, enc.max_positions)?;
        let mut model = TeacherModel::new(&enc, self.seed("teacher-init"))?;
        let hp = TeacherHyper { seed: self.seed("teacher"), ..c.teacher.clone() };
        let report = train_teacher(&mut model, &train, &heldout, &hp)?;
        model.save(&dir.join("teacher.ckpt"))?;

        let mut m = StageMetrics::default();
        m.put("train_examples", train.len() as f64);
        m.put("steps", report.steps as f64);
        if let Some(v) = report.initial_heldout_loss {
            m.put("initial_heldout_loss", v);
        }
        if let Some(&v) = report.epoch_train_loss.last() {
            m.put("final_train_loss", v);
        }
        if let Some(&v) = report.epoch_heldout_loss.last() {
            m.put("final_heldout_loss", v);
        }
        m.table("train_loss_by_epoch", report.epoch_train_loss.iter().map(|&v| Some(v)));
        write_json(&dir.join(METRICS), &m)?;
        Ok(vec!["teacher.ckpt", METRICS])
    }

    fn run_relabel(&self, dir: &Path) -> Result<Vec<&'static str>> {
        let r = &self.config.relabel;
        let vocab = self.vocabulary()?;
        let mut teacher = self.teacher(&vocab)?;
        teacher.temperature = r.temperature;
        let generated = self.dataset("generated.jsonl", &vocab)?;
        let labels = crate::teacher::relabel(&teacher, &generated, r.top_k, r.renormalize)?;
        write_labels(&dir.join("labels.jsonl"), &labels)?;

        let (mut agree, mut spanned, mut null) = (0usize, 0usize, 0usize);
        let qas = generated.iter().flat_map(|(_, q)| q);
        for (qa, l) in qas.zip(&labels) {
            if let Some(s) = qa.answer_span {
                spanned += 1;
                agree += usize::from(l.start_argmax() == s.start && l.end_argmax() == s.end);
            }
            null += usize::from(l.is_unanswerable());
        }
        let mut m = StageMetrics::default();
        m.put("questions", labels.len() as f64);
        m.put("unanswerable_fraction", checked_rate(null, labels.len()));
        m.put("agreement_with_generated_spans", checked_rate(agree, spanned));
        write_json(&dir.join(METRICS), &m)?;
        Ok(vec!["labels.jsonl", METRICS])
    }

    /// Training batches for the configured label source, one per passage.
    pub fn distill_batches(&self, vocab: &Vocabulary) -> Result<Vec<TrainBatch>> {
        let source = self.config.distill.labels;
        let data = match source {
            LabelSource::Gold => self.dataset("labeled.jsonl", vocab)?,
            LabelSource::Teacher | LabelSource::Generated => self.dataset("generated.jsonl", vocab)?,
        };
        let teacher_labels = match source {
            LabelSource::Teacher => Some(read_labels(&self.stage_dir(Stage::Relabel).join("labels.jsonl"))?),
            _ => None,
        };
        let mut it = teacher_labels.iter().flatten();
        let mut batches = Vec::new();
        for (passage, qas) in &data {
            let mut questions = Vec::with_capacity(qas.len());
            for qa in qas {
                let labels = match source {
                    LabelSource::Teacher => {
                        let l = it.next().ok_or_else(|| Error::Stale("fewer teacher labels than questions".into()))?;
                        if l.qid != qa.qid {
                            return Err(Error::Stale(format!("teacher label {} does not match question {}", l.qid, qa.qid)));
                        }
                        l.validate(passage.tokens.len())?;
                        l.clone()
                    }
                    _ => match qa.answer_span {
                        Some(s) => SparseSpanLabels::one_hot(qa.qid.clone(), s.start, s.end),
                        None => SparseSpanLabels::one_hot(qa.qid.clone(), 0, 0),
                    },
                };
                questions.push((qa.question.clone(), labels));
            }
            if !questions.is_empty() {
                batches.push(TrainBatch { passage: passage.tokens.clone(), questions });
            }
        }
        if it.next().is_some() {
            return Err(Error::Stale("more teacher labels than questions".into()));
        }
        Ok(batches)
    }

    fn run_distill(&self, dir: &Path) -> Result<Vec<&'static str>> {
        let c = &self.config;
        let vocab = self.vocabulary()?;
        let enc = c.encoder.with_vocab(vocab.len());
        let batches = self.distill_batches(&vocab)?;
        let mut student = StudentModel::new(&enc, self.seed("student-init"))?;
        if c.distill.init == StudentInit::Teacher {
            let teacher = self.teacher(&vocab)?;
            student.copy_encoder_from(&teacher.store, &teacher.encoder)?;
        }
        let hp = c.distill.hyper(self.seed("distill"));
        let before = start_agreement(&student, &batches)?;
        let report = train_distill(&mut student, &batches, &hp)?;
        let after = start_agreement(&student, &batches)?;
        let ckpt = dir.join("student.ckpt");
        student.save(&ckpt)?;

        let mut m = StageMetrics::default();
        m.put("batches", report.batches_per_epoch as f64);
        m.put("questions", batches.iter().map(|b| b.questions.len()).sum::<usize>() as f64);
        m.put("steps", report.steps as f64);
        m.put("passage_encodings_per_epoch", report.passage_encodings.first().copied().unwrap_or(0) as f64);
        m.put("start_agreement_before", before);
        m.put("start_agreement", after);
        let first = report.epoch_mean_loss.first().copied().unwrap_or(f64::NAN);
        let last = report.epoch_mean_loss.last().copied().unwrap_or(f64::NAN);
        m.put("first_epoch_loss", first);
        m.put("final_epoch_loss", last);
        m.put("loss_ratio", last / first);
        m.table("loss_by_epoch", report.epoch_mean_loss.iter().map(|&v| Some(v)));
        m.note("checkpoint_sha256", cache::file_hash(&ckpt)?);
        write_json(&dir.join(METRICS), &m)?;
        Ok(vec!["student.ckpt", METRICS])
    }

    fn run_eval_qa(&self, dir: &Path) -> Result<Vec<&'static str>> {
        let max_len = self.config.qa.max_answer_len;
        let vocab = self.vocabulary()?;
        let student = self.student(&vocab)?;
        let teacher = self.teacher(&vocab)?;
        let dev = self.dataset("dev.jsonl", &vocab)?;
        let mut student_items = Vec::new();
        let mut teacher_items = Vec::new();
        for (passage, qas) in &dev {
            let ctx = passage.tokens.len();
            for qa in qas {
                let golds = if qa.answers.is_empty() { vec![String::new()] } else { qa.answers.clone() };
                let (_, text) = answer_question(&student, &passage.tokens, &qa.question, &vocab, max_len)?;
                student_items.push((text, golds.clone()));
                let full = teacher_predict(&teacher, &passage.tokens, &qa.question)?;
                let pred = SpanDistributionPair {
                    start: ProbabilityVector::new(full.start.as_slice()[..ctx].to_vec())?,
                    end: ProbabilityVector::new(full.end.as_slice()[..ctx].to_vec())?,
                };
                let text = match decode_span(&pred, max_len)?.span {
                    Some(s) => crate::corpus::detokenize_ids(&passage.tokens.ids()[s.start..=s.end], &vocab),
                    None => String::new(),
                };
                teacher_items.push((text, golds));
            }
        }
        let s = score_predictions(&student_items);
        let t = score_predictions(&teacher_items);
        let mut m = StageMetrics::default();
        m.put("questions", s.count as f64);
        m.put("student_exact_match", s.exact_match);
        m.put("student_f1", s.f1);
        m.put("teacher_exact_match", t.exact_match);
        m.put("teacher_f1", t.f1);
        write_json(&dir.join(METRICS), &m)?;
        Ok(vec![METRICS])
    }

    fn run_eval_paraphrase(&self, dir: &Path) -> Result<Vec<&'static str>> {
        let p = &self.config.paraphrase;
        let vocab = self.vocabulary()?;
        let student = self.student(&vocab)?;
        let pairs: Vec<SentencePair> = read_pairs(&self.stage_dir(Stage::Synth).join("pairs.jsonl"))?
            .iter()
            .map(|r| SentencePair::from_record(r, &vocab))
            .collect();
        if pairs.len() <= p.train_pairs {
            return Err(Error::Validation(format!(
                "{} paraphrase pairs leave no test split after {} training pairs",
                pairs.len(),
                p.train_pairs
            )));
        }
        let (train, test) = pairs.split_at(p.train_pairs);
        let judged: Vec<SentencePair> = train.iter().filter(|x| x.judgment.is_some()).cloned().collect();
        let sel = select_layer(&student.encoder, &student.store, &judged)?;
        let mut m = StageMetrics::default();
        m.put("best_layer", sel.best_layer as f64);
        m.table("pearson_by_layer", sel.pearson.iter().copied());

        let labeled_test: Vec<&SentencePair> = test.iter().filter(|x| x.label.is_some()).collect();
        let gold: Vec<u8> = labeled_test.iter().map(|x| x.label.unwrap_or(0)).collect();
        let gold_bool: Vec<bool> = gold.iter().map(|&y| y == 1).collect();
        let zero_shot = |model: &StudentModel, layer: usize| -> Result<f64> {
            let scores = labeled_test
                .iter()
                .map(|x| f_bert(&model.encoder, &model.store, &x.s1, &x.s2, layer))
                .collect::<Result<Vec<_>>>()?;
            auroc(&scores, &gold_bool)
        };
        m.put("zero_shot_auroc", zero_shot(&student, sel.best_layer)?);
        m.put("zero_shot_auroc_last_layer", zero_shot(&student, student.config().n_layers)?);
        let untrained = StudentModel::new(student.config(), self.seed("paraphrase-baseline"))?;
        m.put("untrained_auroc", zero_shot(&untrained, sel.best_layer)?);

        let labeled_train: Vec<SentencePair> = train.iter().filter(|x| x.label.is_some()).cloned().collect();
        let y: Vec<u8> = labeled_train.iter().map(|x| x.label.unwrap_or(0)).collect();
        let feats = labeled_train
            .iter()
            .map(|x| extract_features(&student.encoder, &student.store, x))
            .collect::<Result<Vec<_>>>()?;
        let logreg = train_logreg(&feats, &y, p.l2_lambda)?;
        let pred = labeled_test
            .iter()
            .map(|x| Ok(logreg.predict(&extract_features(&student.encoder, &student.store, x)?)))
            .collect::<Result<Vec<_>>>()?;
        let frozen = binary_scores(&pred, &gold);
        m.put("frozen_f1", frozen.f1);
        m.put("frozen_accuracy", frozen.accuracy);
        if p.fine_tune {
            let hp = p.hyper(self.seed("paraphrase-finetune"));
            let (model, report) = fine_tune_paraphrase(&student.encoder, &student.store, &labeled_train, &hp)?;
            let pred = labeled_test.iter().map(|x| model.predict(x)).collect::<Result<Vec<_>>>()?;
            let tuned = binary_scores(&pred, &gold);
            m.put("fine_tuned_f1", tuned.f1);
            m.put("fine_tuned_accuracy", tuned.accuracy);
            m.put("fine_tune_lr_ratio", report.lr_ratio);
            m.table("fine_tune_loss_by_epoch", report.epoch_mean_loss.iter().map(|&v| Some(v)));
        }
        write_json(&dir.join(METRICS), &m)?;
        Ok(vec![METRICS])
    }

    fn run_eval_ner(&self, dir: &Path) -> Result<Vec<&'static str>> {
        let n = &self.config.ner;
        let vocab = self.vocabulary()?;
        let student = self.student(&vocab)?;
        let records = read_ner(&self.stage_dir(Stage::Synth).join("ner.jsonl"))?;
        let mut types: Vec<String> = records
            .iter()
            .flat_map(|r| r.tags.iter())
            .filter(|t| t.as_str() != OUTSIDE)
            .filter_map(|t| split_tag(t).map(|(_, kind)| kind.to_string()))
            .collect();
        types.sort();
        types.dedup();
        let tags = TagSet::from_types(&types);
        let sentences = records
            .iter()
            .map(|r| TaggedSentence::from_record(r, &vocab, &tags))
            .collect::<Result<Vec<_>>>()?;
        if sentences.len() <= n.shots {
            return Err(Error::Validation(format!("{} NER sentences leave no test split after {} shots", sentences.len(), n.shots)));
        }
        let (train, test) = sentences.split_at(n.shots);
        let prompts = self.ner_prompts()?;
        let hp = n.hyper(self.seed("ner"));
        let mut m = StageMetrics::default();
        m.put("entity_types", types.len() as f64);
        m.put("train_sentences", train.len() as f64);
        m.put("test_sentences", test.len() as f64);
        let gold_entities: usize = test.iter().map(|s| bio_decode(&s.tags.iter().map(|&t| tags.tags()[t].clone()).collect::<Vec<_>>()).len()).sum();
        m.put("test_entities", gold_entities as f64);
        let inits = [
            ("prompt", init_output_from_prompts(&student, &vocab, &tags, &prompts)?),
            ("random", random_output(&tags, student.config().d_model, self.seed("ner-random"))),
        ];
        for (name, output) in inits {
            let mut model = NerModel::new(&student, output, tags.clone())?;
            m.put(&format!("{name}_zero_shot_f1"), model.evaluate(test)?.f1);
            let report = train_ner(&mut model, train, &hp)?;
            m.put(&format!("{name}_f1"), model.evaluate(test)?.f1);
            m.put(&format!("{name}_initial_loss"), report.initial_loss);
            if let Some(&l) = report.epoch_loss.last() {
                m.put(&format!("{name}_final_loss"), l);
            }
            let curve: Vec<f64> = std::iter::once(report.initial_loss).chain(report.epoch_loss.iter().copied()).collect();
            let monotone = curve.iter().take(6).collect::<Vec<_>>().windows(2).all(|w| w[1] < w[0]);
            m.put(&format!("{name}_monotone_first_5_epochs"), f64::from(u8::from(monotone)));
            m.table(&format!("{name}_loss_by_epoch"), curve.into_iter().map(Some));
        }
        write_json(&dir.join(METRICS), &m)?;
        Ok(vec![METRICS])
    }

    fn run_eval_sentiment(&self, dir: &Path) -> Result<Vec<&'static str>> {
        let s = &self.config.sentiment;
        let vocab = self.vocabulary()?;
        let student = self.student(&vocab)?;
        let data = read_sentiment_data(&self.stage_dir(Stage::Synth).join("sentiment.jsonl"))?;
        let prompts = self.sentiment_prompts()?;
        let report = evaluate_sentiment(&student, &vocab, &prompts, &data, &s.calibration_words)?;
        let mut m = StageMetrics::default();
        m.put("sentences", data.len() as f64);
        m.put("prompts", prompts.len() as f64);
        m.put("mean_accuracy", report.mean_accuracy);
        for p in &report.per_prompt {
            m.put(&format!("prompt_{}_accuracy", p.prompt + 1), p.accuracy);
        }
        m.table("accuracy_by_prompt", report.per_prompt.iter().map(|p| Some(p.accuracy)));
        if let Some(r) = &report.example_rationale {
            m.note("example_rationale", r.text.clone());
        }
        if let Some(p) = report.per_prompt.first() {
            m.note("calibration_word_list", p.calibration.word_list_id.clone());
        }
        write_json(&dir.join(METRICS), &m)?;
        write_json(&dir.join("sentiment_report.json"), &report)?;
        Ok(vec![METRICS, "sentiment_report.json"])
    }
}

/// Runs every stage in order and writes `report.json` into `out`. On failure
/// the report carries the failed stage and the error is returned.
pub fn run_pipeline(config: &RunConfig, out: &Path) -> Result<MetricsReport> {
    let mut p = Pipeline::open(config.clone(), out)?;
    run_stages(&mut p, &Stage::ALL)
}

/// Ensures `stages` in order, then writes and returns the report.
pub fn run_stages(p: &mut Pipeline, stages: &[Stage]) -> Result<MetricsReport> {
    for &stage in stages {
        if let Err(e) = p.ensure(stage) {
            let failed = match &e {
                Error::Stage { stage, .. } => stage.clone(),
                _ => stage.name().to_string(),
            };
            let report = p.report(Some((&failed, &e)))?;
            report.write(&p.out().join(REPORT))?;
            return Err(e);
        }
    }
    let report = p.report(None)?;
    report.write(&p.out().join(REPORT))?;
    Ok(report)
}
