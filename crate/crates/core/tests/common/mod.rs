#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use lcsb_core::harness::{split_corpus, tokenize, Corpus};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SUBJECTS: &[&str] = &[
    "the river", "a small boat", "the old miller", "my neighbour", "the council", "every child", "the storm",
    "a quiet teacher", "the market", "our garden", "the last train", "a stranger", "the lighthouse keeper",
];
const VERBS: &[&str] = &[
    "carried", "watched", "remembered", "followed", "painted", "measured", "opened", "crossed", "answered",
    "gathered", "described", "repaired", "counted",
];
const OBJECTS: &[&str] = &[
    "the morning light", "a letter from the north", "three copper coins", "the long road", "a basket of apples",
    "the broken bell", "an empty room", "the winter fields", "a map of the coast", "the evening news",
];
const TAILS: &[&str] = &[
    "before the rain came", "without a word", "while the town slept", "after the harvest", "near the bridge",
    "as the clock struck nine", "for the second time", "with great care", "in the spring", "under the stars",
];
const JOINERS: &[&str] = &["and then", "but", "so", "because", "although", "while"];

/// Deterministic English-like text of exactly `len` bytes.
pub fn synthetic_text(len: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(len + 200);
    while out.len() < len {
        let mut sentence = format!(
            "{} {} {}",
            SUBJECTS.choose(&mut rng).unwrap(),
            VERBS.choose(&mut rng).unwrap(),
            OBJECTS.choose(&mut rng).unwrap()
        );
        if rng.random_bool(0.6) {
            sentence.push(' ');
            sentence.push_str(TAILS.choose(&mut rng).unwrap());
        }
        if rng.random_bool(0.3) {
            sentence = format!(
                "{sentence}, {} {} {} {}",
                JOINERS.choose(&mut rng).unwrap(),
                SUBJECTS.choose(&mut rng).unwrap(),
                VERBS.choose(&mut rng).unwrap(),
                OBJECTS.choose(&mut rng).unwrap()
            );
        }
        let mut chars = sentence.chars();
        let first = chars.next().unwrap().to_ascii_uppercase();
        out.push(first);
        out.extend(chars);
        out.push_str(if rng.random_bool(0.15) { ".\n" } else { ". " });
    }
    out.truncate(len);
    out
}

pub const CORPUS_BYTES: usize = 256 * 1024;

/// The shared corpus file, written once per test binary.
pub fn corpus_path() -> &'static Path {
    static PATH: OnceLock<PathBuf> = OnceLock::new();
    PATH.get_or_init(|| {
        let dir = std::env::temp_dir().join(format!("lcsb-corpus-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("corpus.txt");
        std::fs::write(&path, synthetic_text(CORPUS_BYTES, 2024)).unwrap();
        path
    })
}

pub fn corpus(eval_fraction: f64, seq_len: usize) -> Corpus {
    let bytes = std::fs::read(corpus_path()).unwrap();
    split_corpus(tokenize(&bytes), eval_fraction, seq_len, corpus_path()).unwrap()
}
