//! Replays the fuzz corpus, plus random mutations of every seed, through the
//! same decoders the fuzz targets drive. Runs on stable without libFuzzer.

use std::fs;
use std::path::{Path, PathBuf};

use qarep_core::bertscore::{parse_pairs, validate_pairs};
use qarep_core::corpus::dataset::{parse_dataset, validate_dataset, DatasetLimits};
use qarep_core::corpus::Vocabulary;
use qarep_core::encoder::checkpoint::{decode_checkpoint, encode_checkpoint};
use qarep_core::harness::cache::Manifest;
use qarep_core::harness::{MetricsReport, RunConfig};
use qarep_core::labels::parse_labels;
use qarep_core::prompts::data::{parse_prompt_map, parse_sentiment_prompts};
use qarep_core::prompts::ner::parse_ner;
use qarep_core::prompts::sentiment::parse_sentiment_data;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const MUTATIONS_PER_SEED: usize = 1000;

fn decode_text(target: &str, text: &str) {
    match target {
        "dataset_jsonl" => {
            let _ = parse_dataset(text).and_then(|r| validate_dataset(&r, &DatasetLimits::default()));
        }
        "labels_jsonl" => drop(parse_labels(text)),
        "pairs_jsonl" => drop(parse_pairs(text).and_then(|p| validate_pairs(&p))),
        "ner_jsonl" => drop(parse_ner(text)),
        "sentiment_jsonl" => drop(parse_sentiment_data(text)),
        "sentiment_prompts" => drop(parse_sentiment_prompts(text)),
        "prompt_map" => drop(parse_prompt_map(text)),
        "run_config" => {
            if let Ok(c) = RunConfig::from_toml(text) {
                let _ = c.validate();
                let _ = c.to_toml();
            }
        }
        "metrics_report" => {
            if let Ok(r) = MetricsReport::from_json(text) {
                assert_eq!(MetricsReport::from_json(&r.to_json()).unwrap(), r);
            }
        }
        "manifest" => drop(serde_json::from_str::<Manifest>(text).map(|m| m.digest())),
        "vocab" => {
            if let Ok(tokens) = serde_json::from_str::<Vec<String>>(text) {
                let _ = Vocabulary::from_tokens(tokens);
            }
        }
        other => panic!("no decoder for corpus directory {other}"),
    }
}

fn decode(target: &str, data: &[u8]) {
    if target == "checkpoint" {
        let _ = decode_checkpoint(data);
        let mut sealed = data.to_vec();
        sealed.extend_from_slice(&Sha256::digest(data));
        if let Ok((store, header)) = decode_checkpoint(&sealed) {
            let bytes = encode_checkpoint(&store, &header).unwrap();
            let (store2, header2) = decode_checkpoint(&bytes).unwrap();
            assert_eq!(header2, header);
            assert_eq!(encode_checkpoint(&store2, &header2).unwrap(), bytes);
        }
    } else if let Ok(text) = std::str::from_utf8(data) {
        decode_text(target, text);
    }
}

fn mutate(seed: &[u8], rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut out = seed.to_vec();
    for _ in 0..rng.random_range(1..4) {
        let len = out.len();
        match rng.random_range(0..5) {
            0 if len > 0 => out.truncate(rng.random_range(0..len)),
            1 if len > 0 => {
                let i = rng.random_range(0..len);
                out[i] ^= 1 << rng.random_range(0..8);
            }
            2 => {
                let i = rng.random_range(0..=len);
                let b = *b"{}[]\",:0-9e.\n \\".get(rng.random_range(0..15)).unwrap();
                out.insert(i, b);
            }
            3 if len > 1 => {
                let i = rng.random_range(0..len);
                out.remove(i);
            }
            _ if len > 0 => {
                let a = rng.random_range(0..len);
                let b = rng.random_range(a..len);
                let chunk = out[a..=b].to_vec();
                out.splice(a..a, chunk);
            }
            _ => out.push(rng.random()),
        }
    }
    out
}

fn sorted_entries(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).expect("fuzz corpus is checked in").map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn corpus_seeds_and_mutations_never_panic() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus");
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut targets = 0;
    for dir in sorted_entries(&root) {
        let target = dir.file_name().unwrap().to_str().unwrap().to_string();
        let mut seeds = 0;
        for file in sorted_entries(&dir) {
            let data = fs::read(file).unwrap();
            decode(&target, &data);
            for _ in 0..MUTATIONS_PER_SEED {
                decode(&target, &mutate(&data, &mut rng));
            }
            seeds += 1;
        }
        assert!(seeds > 0, "{target} has no seeds");
        targets += 1;
    }
    assert_eq!(targets, 12);
}
