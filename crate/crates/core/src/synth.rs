//! Bundled synthetic world: template passages about people, places,
//! organizations and objects, plus the paraphrase, NER and sentiment sets
//! built from the same lexicon.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize_words, Passage, PassageRecord, Vocabulary};
use crate::error::{Error, Result};
use crate::qgen::{generate_rule_based, to_record, GeneratorConfig};
use crate::seed::rng_for;

pub const FIRST_NAMES: [&str; 20] = [
    "Ada", "Bo", "Cy", "Dara", "Eli", "Fay", "Gus", "Hal", "Ivy", "Jo", "Kai", "Lea", "Max", "Nia",
    "Oto", "Pia", "Quin", "Rae", "Sol", "Tess",
];
pub const LAST_NAMES: [&str; 20] = [
    "Abel", "Brook", "Cole", "Dunn", "Ellis", "Frost", "Grant", "Hale", "Irwin", "Joyce", "Kemp",
    "Lowe", "Marsh", "Nash", "Orr", "Pike", "Quill", "Reed", "Shaw", "Todd",
];
pub const CITIES: [&str; 20] = [
    "Paris", "Rome", "Oslo", "Lima", "Cairo", "Delhi", "Tokyo", "Berlin", "Madrid", "Vienna",
    "Dublin", "Prague", "Athens", "Quito", "Seoul", "Nairobi", "Lisbon", "Warsaw", "Havana",
    "Boston",
];
pub const ORGS: [[&str; 2]; 10] = [
    ["Acme", "Corp"],
    ["Vega", "Labs"],
    ["Nova", "Bank"],
    ["Orion", "Press"],
    ["Zenith", "Motors"],
    ["Apex", "Mills"],
    ["Delta", "Foods"],
    ["Sigma", "Works"],
    ["Polar", "Air"],
    ["Titan", "Steel"],
];
pub const VERBS: [&str; 12] = [
    "found", "built", "sold", "painted", "repaired", "bought", "stole", "designed", "studied",
    "wrote", "lost", "discovered",
];
/// Pairs of verbs treated as paraphrases of each other.
pub const VERB_SYNONYMS: [(&str, &str); 6] = [
    ("bought", "purchased"),
    ("built", "constructed"),
    ("repaired", "fixed"),
    ("found", "located"),
    ("designed", "drafted"),
    ("studied", "examined"),
];
pub const NOUNS: [&str; 16] = [
    "ship", "bridge", "clock", "engine", "map", "statue", "violin", "lamp", "telescope", "carriage",
    "piano", "tower", "compass", "camera", "radio", "kettle",
];
pub const YEARS: std::ops::RangeInclusive<u32> = 1900..=1949;

/// The NER tag set used by the synthetic sentences.
pub const NER_TYPES: [&str; 3] = ["person", "location", "organization"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Passages with gold questions, used to train the teacher.
    pub labeled_passages: usize,
    /// Passages whose questions are generated and relabeled.
    pub unlabeled_passages: usize,
    pub dev_passages: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub paraphrase_pairs: usize,
    pub ner_sentences: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            labeled_passages: 96,
            unlabeled_passages: 64,
            dev_passages: 16,
            min_sentences: 1,
            max_sentences: 1,
            paraphrase_pairs: 64,
            ner_sentences: 45,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_sentences == 0 || self.min_sentences > self.max_sentences {
            return Err(Error::config("need 1 <= min_sentences <= max_sentences"));
        }
        if self.max_sentences > 5 {
            return Err(Error::config("at most 5 sentences per passage keep entities distinct"));
        }
        if self.unlabeled_passages == 0 {
            return Err(Error::config("unlabeled_passages must be at least 1"));
        }
        Ok(())
    }
}

/// Sentence-pair record for paraphrase experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub s1: Vec<String>,
    pub s2: Vec<String>,
    pub label: Option<u8>,
    pub judgment: Option<f64>,
}

/// BIO-tagged sentence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NerRecord {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SentimentRecord {
    pub tokens: Vec<String>,
    /// 1 positive, 0 negative.
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub labeled: Vec<PassageRecord>,
    pub unlabeled: Vec<PassageRecord>,
    pub dev: Vec<PassageRecord>,
    pub paraphrase: Vec<PairRecord>,
    pub ner: Vec<NerRecord>,
    pub sentiment: Vec<SentimentRecord>,
}

struct Picker<'a> {
    rng: &'a mut ChaCha8Rng,
    people: Vec<(usize, usize)>,
    cities: Vec<usize>,
    orgs: Vec<usize>,
    nouns: Vec<usize>,
    years: Vec<u32>,
}

impl<'a> Picker<'a> {
    /// Draws without replacement so every entity is unique in a passage.
    fn new(rng: &'a mut ChaCha8Rng) -> Self {
        let mut people: Vec<(usize, usize)> = (0..20).flat_map(|f| (0..20).map(move |l| (f, l))).collect();
        people.shuffle(rng);
        // distinct first and last names keep single-token mentions unique
        let mut seen_f = Vec::new();
        let mut seen_l = Vec::new();
        people.retain(|&(f, l)| {
            let ok = !seen_f.contains(&f) && !seen_l.contains(&l);
            if ok {
                seen_f.push(f);
                seen_l.push(l);
            }
            ok
        });
        let mut cities: Vec<usize> = (0..CITIES.len()).collect();
        cities.shuffle(rng);
        let mut orgs: Vec<usize> = (0..ORGS.len()).collect();
        orgs.shuffle(rng);
        let mut nouns: Vec<usize> = (0..NOUNS.len()).collect();
        nouns.shuffle(rng);
        let mut years: Vec<u32> = YEARS.collect();
        years.shuffle(rng);
        Self { rng, people, cities, orgs, nouns, years }
    }

    fn person(&mut self) -> Vec<String> {
        let (f, l) = self.people.pop().expect("enough people");
        vec![FIRST_NAMES[f].into(), LAST_NAMES[l].into()]
    }
    fn city(&mut self) -> String {
        CITIES[self.cities.pop().expect("enough cities")].into()
    }
    fn org(&mut self) -> Vec<String> {
        ORGS[self.orgs.pop().expect("enough orgs")].iter().map(|s| s.to_string()).collect()
    }
    fn noun(&mut self) -> String {
        NOUNS[self.nouns.pop().expect("enough nouns")].into()
    }
    fn year(&mut self) -> String {
        self.years.pop().expect("enough years").to_string()
    }
    fn verb(&mut self) -> String {
        VERBS.choose(self.rng).expect("verbs").to_string()
    }
}

fn words(parts: &[&[String]]) -> Vec<String> {
    parts.iter().flat_map(|p| p.iter().cloned()).collect()
}

fn s(w: &str) -> Vec<String> {
    w.split_whitespace().map(String::from).collect()
}

/// One template sentence. Each template carries a single capitalized
/// entity, one object noun and one year.
fn sentence(template: usize, p: &mut Picker<'_>) -> Vec<String> {
    match template {
        0 => {
            let (who, v, n, y) = (p.person(), p.verb(), p.noun(), p.year());
            words(&[&who, &[v], &s("the"), &[n], &s("in"), &[y], &s(".")])
        }
        1 => {
            let (y, who, v, n) = (p.year(), p.person(), p.verb(), p.noun());
            words(&[&s("In"), &[y], &s(","), &who, &[v], &s("a"), &[n], &s(".")])
        }
        2 => {
            let (n, c, y) = (p.noun(), p.city(), p.year());
            words(&[&s("The"), &[n], &s("was moved to"), &[c], &s("in"), &[y], &s(".")])
        }
        3 => {
            let (o, v, n, y) = (p.org(), p.verb(), p.noun(), p.year());
            words(&[&o, &[v], &s("a"), &[n], &s("in"), &[y], &s(".")])
        }
        _ => {
            let (n, o, y) = (p.noun(), p.org(), p.year());
            words(&[&s("The"), &[n], &s("was sold by"), &o, &s("in"), &[y], &s(".")])
        }
    }
}

const TEMPLATES: usize = 5;

fn passage_words(rng: &mut ChaCha8Rng, config: &SynthConfig) -> Vec<String> {
    let n = rng.random_range(config.min_sentences..=config.max_sentences);
    let mut templates: Vec<usize> = (0..TEMPLATES).collect();
    templates.shuffle(rng);
    let mut picker = Picker::new(rng);
    templates[..n].iter().flat_map(|&t| sentence(t, &mut picker)).collect()
}

fn raw_passages(prefix: &str, count: usize, seed: u64, config: &SynthConfig) -> Vec<PassageRecord> {
    let mut rng = rng_for(seed, &format!("synth:{prefix}"));
    (0..count)
        .map(|i| PassageRecord { id: format!("{prefix}{i:03}"), context: passage_words(&mut rng, config), qas: Vec::new() })
        .collect()
}

fn as_passage(rec: &PassageRecord, vocab: &Vocabulary) -> Passage {
    Passage { id: rec.id.clone(), words: rec.context.clone(), tokens: tokenize_words(&rec.context, vocab) }
}

/// Passages with rule-generated questions whose answers are unique spans.
fn with_gold(records: Vec<PassageRecord>, seed: u64) -> Result<Vec<PassageRecord>> {
    let empty = Vocabulary::build(Vec::<String>::new());
    let config = GeneratorConfig { seed, ..Default::default() };
    records
        .into_iter()
        .map(|rec| {
            let passage = as_passage(&rec, &empty);
            let qas: Vec<_> = generate_rule_based(&passage, &config)?
                .into_iter()
                .filter(|qa| qa.answer_span.is_some())
                .collect();
            let mut out = to_record(&passage, &qas);
            for qa in &mut out.qas {
                qa.qid = qa.qid.replace("-g", "-q");
            }
            Ok(out)
        })
        .collect()
}

fn paraphrase_pairs(count: usize, seed: u64) -> Vec<PairRecord> {
    let mut rng = rng_for(seed, "synth:paraphrase");
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut p = Picker::new(&mut rng);
        let who = p.person();
        let (v, n, y) = (p.verb(), p.noun(), p.year());
        let base = words(&[&who, &[v.clone()], &s("the"), &[n.clone()], &s("in"), &[y.clone()], &s(".")]);
        let kind = i % 4;
        let (other, label, judgment) = match kind {
            // reordered with a synonym where one exists
            0 => {
                let v2 = VERB_SYNONYMS.iter().find(|(a, _)| *a == v).map_or(v.clone(), |(_, b)| b.to_string());
                (words(&[&s("In"), &[y], &s(","), &who, &[v2], &s("the"), &[n], &s(".")]), 1, 0.9)
            }
            1 => (words(&[&s("In"), &[y], &s(","), &who, &[v], &s("the"), &[n], &s(".")]), 1, 0.8),
            // a different person did it
            2 => {
                let other = p.person();
                (words(&[&other, &[v], &s("the"), &[n], &s("in"), &[y], &s(".")]), 0, 0.4)
            }
            _ => {
                let (o, n2, y2) = (p.org(), p.noun(), p.year());
                (words(&[&o, &s("sold a"), &[n2], &s("in"), &[y2], &s(".")]), 0, 0.1)
            }
        };
        let noise: f64 = rng.random_range(-0.05..0.05);
        let (s1, s2) = if rng.random::<bool>() { (base, other) } else { (other, base) };
        out.push(PairRecord { s1, s2, label: Some(label), judgment: Some(judgment + noise) });
    }
    out
}

fn tagged(parts: &[(Vec<String>, Option<&str>)]) -> NerRecord {
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    for (ws, ty) in parts {
        for (k, w) in ws.iter().enumerate() {
            tokens.push(w.clone());
            tags.push(match ty {
                None => "O".to_string(),
                Some(t) if k == 0 => format!("B-{t}"),
                Some(t) => format!("I-{t}"),
            });
        }
    }
    NerRecord { tokens, tags }
}

fn ner_sentences(count: usize, seed: u64) -> Vec<NerRecord> {
    let mut rng = rng_for(seed, "synth:ner");
    (0..count)
        .map(|i| {
            let mut p = Picker::new(&mut rng);
            match i % 3 {
                0 => tagged(&[
                    (p.person(), Some("person")),
                    (s("joined"), None),
                    (p.org(), Some("organization")),
                    (s("in"), None),
                    (vec![p.city()], Some("location")),
                    (s("."), None),
                ]),
                1 => {
                    let who = p.person();
                    let city = p.city();
                    let year = p.year();
                    tagged(&[
                        (who, Some("person")),
                        (s("was born in"), None),
                        (vec![city], Some("location")),
                        (vec!["in".into(), year, ".".into()], None),
                    ])
                }
                _ => tagged(&[
                    (p.org(), Some("organization")),
                    (s("hired"), None),
                    (p.person(), Some("person")),
                    (s("in"), None),
                    (vec![p.city()], Some("location")),
                    (s("."), None),
                ]),
            }
        })
        .collect()
}

const POSITIVE: [&str; 10] = [
    "the product is great and i love it .",
    "this product works perfectly and looks wonderful .",
    "an excellent product with a fantastic design .",
    "i am happy with this product , it is good .",
    "the sound is amazing and the price is nice .",
    "a wonderful product that never fails .",
    "great battery and an excellent screen .",
    "i love the design , it is perfect .",
    "the product is good and works well .",
    "fantastic value , i would buy it again .",
];
const NEGATIVE: [&str; 10] = [
    "the product is terrible and i hate it .",
    "this product broke after a day , awful .",
    "a bad product with a poor design .",
    "i am disappointed with this product , it is useless .",
    "the sound is horrible and the price is bad .",
    "the worst product i have ever used .",
    "terrible battery and a broken screen .",
    "i hate the design , it is awful .",
    "the product is poor and works badly .",
    "useless value , i would never buy it again .",
];

fn sentiment_set() -> Vec<SentimentRecord> {
    POSITIVE
        .iter()
        .map(|t| (t, 1))
        .chain(NEGATIVE.iter().map(|t| (t, 0)))
        .map(|(t, label)| SentimentRecord { tokens: s(t), label })
        .collect()
}

pub fn generate(config: &SynthConfig, seed: u64) -> Result<SynthCorpus> {
    config.validate()?;
    let labeled = with_gold(raw_passages("L", config.labeled_passages, seed, config), seed)?;
    let dev = with_gold(raw_passages("D", config.dev_passages, seed, config), seed)?;
    let unlabeled = raw_passages("U", config.unlabeled_passages, seed, config);
    Ok(SynthCorpus {
        labeled,
        unlabeled,
        dev,
        paraphrase: paraphrase_pairs(config.paraphrase_pairs, seed),
        ner: ner_sentences(config.ner_sentences, seed),
        sentiment: sentiment_set(),
    })
}

/// Every word a model trained on the synthetic world can see: the lexicon,
/// question templates, prompts and calibration words.
pub fn world_words() -> Vec<String> {
    let mut w: Vec<String> = Vec::new();
    let mut add = |x: &str| w.extend(x.split_whitespace().map(str::to_lowercase));
    for x in FIRST_NAMES.iter().chain(&LAST_NAMES).chain(&CITIES).chain(&VERBS).chain(&NOUNS) {
        add(x);
    }
    for o in ORGS {
        add(&o.join(" "));
    }
    for (a, b) in VERB_SYNONYMS {
        add(a);
        add(b);
    }
    for y in YEARS {
        add(&y.to_string());
    }
    add("the a an in , . ? ! was moved to sold by who what when joined born hired");
    for t in POSITIVE.iter().chain(&NEGATIVE) {
        add(t);
    }
    add(crate::prompts::CALIBRATION_WORDS.join(" ").as_str());
    w.extend(crate::prompts::bundled_prompt_words());
    w
}

pub fn world_vocabulary() -> Vocabulary {
    Vocabulary::build(world_words())
}
