//! Run configuration (TOML).
//!
//! Only `seed` is required; every section falls back to the defaults used by
//! the bundled synthetic corpus. Relative data paths resolve against the
//! directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bertscore::FineTuneHyper;
use crate::encoder::{EncoderConfig, MIN_POSITIONS};
use crate::error::{Error, Result};
use crate::labels::DEFAULT_TOP_K;
use crate::prompts::ner::NerHyper;
use crate::prompts::CALIBRATION_WORDS;
use crate::qgen::{GeneratorConfig, GeneratorKind};
use crate::student::{DistillHyper, LossKind, DEFAULT_MAX_ANSWER_LEN};
use crate::synth::SynthConfig;
use crate::teacher::TeacherHyper;

/// Encoder shape; the vocabulary size comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_width: usize,
    pub max_positions: usize,
    pub dropout: f64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let t = EncoderConfig::toy(0);
        Self {
            d_model: t.d_model,
            n_layers: t.n_layers,
            n_heads: t.n_heads,
            ffn_width: t.ffn_width,
            max_positions: t.max_positions,
            dropout: t.dropout,
        }
    }
}

impl EncoderSection {
    pub fn with_vocab(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_width: self.ffn_width,
            max_positions: self.max_positions,
            dropout: self.dropout,
            vocab_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub kind: GeneratorKind,
    pub questions_per_passage: usize,
    pub nucleus_p: f64,
    pub dedup_answers: bool,
    pub cloze_drop: f64,
    pub max_question_tokens: usize,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        Self {
            kind: GeneratorKind::default(),
            questions_per_passage: g.questions_per_passage,
            nucleus_p: g.nucleus_p,
            dedup_answers: g.dedup_answers,
            cloze_drop: g.cloze_drop,
            max_question_tokens: g.max_question_tokens,
        }
    }
}

impl GeneratorSection {
    pub fn params(&self, seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            questions_per_passage: self.questions_per_passage,
            nucleus_p: self.nucleus_p,
            seed,
            dedup_answers: self.dedup_answers,
            cloze_drop: self.cloze_drop,
            max_question_tokens: self.max_question_tokens,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelabelSection {
    pub top_k: usize,
    pub renormalize: bool,
    pub temperature: f64,
}

impl Default for RelabelSection {
    fn default() -> Self {
        Self { top_k: DEFAULT_TOP_K, renormalize: true, temperature: 1.0 }
    }
}

/// Where the student's training targets come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    /// Sparse teacher distributions over generated questions.
    #[default]
    Teacher,
    /// One-hot gold spans of the labeled set; no generated questions.
    Gold,
    /// One-hot generator spans, no teacher; questions without a span point at position 0.
    Generated,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudentInit {
    /// Copy the trained teacher's encoder.
    #[default]
    Teacher,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub labels: LabelSource,
    pub init: StudentInit,
    pub loss: LossKind,
    pub epochs: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub warmup_steps: usize,
}

impl Default for DistillSection {
    fn default() -> Self {
        let h = DistillHyper::default();
        Self {
            labels: LabelSource::default(),
            init: StudentInit::default(),
            loss: h.loss,
            epochs: h.epochs,
            lr: h.lr,
            clip_norm: h.clip_norm,
            warmup_steps: h.warmup_steps,
        }
    }
}

impl DistillSection {
    pub fn hyper(&self, seed: u64) -> DistillHyper {
        DistillHyper {
            epochs: self.epochs,
            lr: self.lr,
            seed,
            loss: self.loss,
            clip_norm: self.clip_norm,
            warmup_steps: self.warmup_steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QaSection {
    pub max_answer_len: usize,
}

impl Default for QaSection {
    fn default() -> Self {
        Self { max_answer_len: DEFAULT_MAX_ANSWER_LEN }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParaphraseSection {
    /// Pairs used for layer selection and classifier training; the rest are test pairs.
    pub train_pairs: usize,
    pub fine_tune: bool,
    pub epochs: usize,
    pub lr: f64,
    /// Output-layer learning-rate multiplier during fine-tuning.
    pub output_lr_factor: f64,
    pub l2_lambda: f64,
    pub batch_size: usize,
}

impl Default for ParaphraseSection {
    fn default() -> Self {
        let h = FineTuneHyper::default();
        Self {
            train_pairs: 32,
            fine_tune: true,
            epochs: h.epochs,
            lr: h.lr,
            output_lr_factor: h.output_lr_factor,
            l2_lambda: h.l2_lambda,
            batch_size: h.batch_size,
        }
    }
}

impl ParaphraseSection {
    pub fn hyper(&self, seed: u64) -> FineTuneHyper {
        FineTuneHyper {
            epochs: self.epochs,
            lr: self.lr,
            output_lr_factor: self.output_lr_factor,
            l2_lambda: self.l2_lambda,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NerSection {
    pub shots: usize,
    /// `conll`, `wnut`, or a path to a prompt-map JSON file.
    pub prompts: String,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for NerSection {
    fn default() -> Self {
        let h = NerHyper::default();
        Self { shots: 5, prompts: "conll".into(), epochs: h.epochs, lr: h.lr }
    }
}

impl NerSection {
    pub fn hyper(&self, seed: u64) -> NerHyper {
        NerHyper { epochs: self.epochs, lr: self.lr, seed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SentimentSection {
    /// Prompt-pair JSON file; the bundled table when absent.
    pub prompts: Option<PathBuf>,
    /// Replaces `movie` in every prompt; empty keeps the prompts verbatim.
    pub domain: String,
    pub calibration_words: Vec<String>,
}

impl Default for SentimentSection {
    fn default() -> Self {
        Self {
            prompts: None,
            domain: "product".into(),
            calibration_words: CALIBRATION_WORDS.iter().map(|w| w.to_string()).collect(),
        }
    }
}

/// External inputs replacing the synthetic ones.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset JSONL with gold spans (teacher training).
    pub labeled: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    /// Dataset JSONL whose passages receive generated questions; existing questions are ignored.
    pub unlabeled: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub ner: Option<PathBuf>,
    pub sentiment: Option<PathBuf>,
}

impl DataSection {
    pub fn paths(&self) -> Vec<(&'static str, &PathBuf)> {
        [
            ("labeled", &self.labeled),
            ("dev", &self.dev),
            ("unlabeled", &self.unlabeled),
            ("pairs", &self.pairs),
            ("ner", &self.ner),
            ("sentiment", &self.sentiment),
        ]
        .into_iter()
        .filter_map(|(k, p)| p.as_ref().map(|p| (k, p)))
        .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub generator: GeneratorSection,
    #[serde(default)]
    pub teacher: TeacherHyper,
    #[serde(default)]
    pub relabel: RelabelSection,
    #[serde(default)]
    pub distill: DistillSection,
    #[serde(default)]
    pub qa: QaSection,
    #[serde(default)]
    pub paraphrase: ParaphraseSection,
    #[serde(default)]
    pub ner: NerSection,
    #[serde(default)]
    pub sentiment: SentimentSection,
    #[serde(default)]
    pub data: DataSection,
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            encoder: EncoderSection::default(),
            synth: SynthConfig::default(),
            generator: GeneratorSection::default(),
            teacher: TeacherHyper::default(),
            relabel: RelabelSection::default(),
            distill: DistillSection::default(),
            qa: QaSection::default(),
            paraphrase: ParaphraseSection::default(),
            ner: NerSection::default(),
            sentiment: SentimentSection::default(),
            data: DataSection::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start.min(text.len())].lines().count().max(1)).unwrap_or(0);
            Error::Parse { line, message: e.message().to_string() }
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Parses, resolves relative paths against the file's directory, and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p.as_mut() {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        let d = &mut self.data;
        for p in [&mut d.labeled, &mut d.dev, &mut d.unlabeled, &mut d.pairs, &mut d.ner, &mut d.sentiment] {
            fix(p);
        }
        fix(&mut self.sentiment.prompts);
        if !matches!(self.ner.prompts.as_str(), "conll" | "wnut") && Path::new(&self.ner.prompts).is_relative() {
            self.ner.prompts = base.join(&self.ner.prompts).to_string_lossy().into_owned();
        }
    }

    pub fn validate(&self) -> Result<()> {
        let enc = self.encoder.with_vocab(8);
        enc.validate()?;
        if enc.max_positions < MIN_POSITIONS {
            return Err(Error::config(format!("max_positions must be at least {MIN_POSITIONS}")));
        }
        self.synth.validate()?;
        self.generator.params(0).validate()?;
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be positive, got {v}")))
            }
        };
        if self.teacher.epochs == 0 || self.teacher.batch_size == 0 {
            return Err(Error::config("teacher epochs and batch_size must be positive"));
        }
        positive("teacher.lr", self.teacher.lr)?;
        if self.relabel.top_k == 0 {
            return Err(Error::config("relabel.top_k must be at least 1"));
        }
        positive("relabel.temperature", self.relabel.temperature)?;
        if self.distill.epochs == 0 {
            return Err(Error::config("distill.epochs must be at least 1"));
        }
        positive("distill.lr", self.distill.lr)?;
        if self.qa.max_answer_len == 0 {
            return Err(Error::config("qa.max_answer_len must be at least 1"));
        }
        if self.paraphrase.train_pairs < 3 {
            return Err(Error::config("paraphrase.train_pairs must be at least 3"));
        }
        positive("paraphrase.lr", self.paraphrase.lr)?;
        positive("paraphrase.l2_lambda", self.paraphrase.l2_lambda)?;
        if self.paraphrase.epochs == 0 {
            return Err(Error::config("paraphrase.epochs must be at least 1"));
        }
        if self.ner.shots == 0 || self.ner.epochs == 0 {
            return Err(Error::config("ner.shots and ner.epochs must be positive"));
        }
        positive("ner.lr", self.ner.lr)?;
        if self.sentiment.calibration_words.is_empty() {
            return Err(Error::config("sentiment.calibration_words is empty"));
        }
        let mut paths = self.data.paths();
        if let Some(p) = &self.sentiment.prompts {
            paths.push(("sentiment.prompts", p));
        }
        let ner_prompts = PathBuf::from(&self.ner.prompts);
        if !matches!(self.ner.prompts.as_str(), "conll" | "wnut") {
            paths.push(("ner.prompts", &ner_prompts));
        }
        for (name, p) in paths {
            if !p.is_file() {
                return Err(Error::config(format!("{name} path {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

}
