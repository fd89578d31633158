use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

/// Byte-level tokens split into a training head and an eval tail.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<u32>,
    pub eval: Vec<u32>,
}

/// `(inputs, targets)` for one sequence.
pub type Sequence = (Vec<u32>, Vec<u32>);

pub fn tokenize(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32).collect()
}

pub fn load_corpus(path: &Path, eval_fraction: f64, seq_len: usize) -> Result<Corpus> {
    let bytes = std::fs::read(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    split_corpus(tokenize(&bytes), eval_fraction, seq_len, path)
}

/// The last `round(len · eval_fraction)` tokens become the eval split. Each
/// split must hold at least one window of `seq_len + 1` tokens.
pub fn split_corpus(tokens: Vec<u32>, eval_fraction: f64, seq_len: usize, origin: &Path) -> Result<Corpus> {
    let fail = |detail: String| Error::Ingestion {
        path: origin.to_path_buf(),
        detail,
    };
    if tokens.is_empty() {
        return Err(fail("corpus is empty".into()));
    }
    if tokens.len() < seq_len + 1 {
        return Err(fail(format!("{} tokens, need at least {}", tokens.len(), seq_len + 1)));
    }
    let n_eval = (tokens.len() as f64 * eval_fraction).round() as usize;
    let n_train = tokens.len() - n_eval;
    if n_train < seq_len + 1 || n_eval < seq_len + 1 {
        return Err(fail(format!(
            "split {n_train}/{n_eval} leaves a side shorter than {} tokens",
            seq_len + 1
        )));
    }
    let mut train = tokens;
    let eval = train.split_off(n_train);
    Ok(Corpus { train, eval })
}

/// `batch_size` random windows; targets are the inputs shifted by one.
pub fn next_batch(tokens: &[u32], seq_len: usize, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<Sequence>> {
    if tokens.len() < seq_len + 1 {
        return Err(Error::Input(format!("{} tokens cannot fill a window of {seq_len}", tokens.len())));
    }
    let max_offset = tokens.len() - seq_len - 1;
    Ok((0..batch_size)
        .map(|_| {
            let o = rng.random_range(0..=max_offset);
            (tokens[o..o + seq_len].to_vec(), tokens[o + 1..o + seq_len + 1].to_vec())
        })
        .collect())
}

/// Non-overlapping windows at offsets `0, L, 2L, ...`; with `max`, an evenly
/// spaced subset of them.
pub fn eval_windows(tokens: &[u32], seq_len: usize, max: Option<usize>) -> Vec<Sequence> {
    let count = if tokens.len() > seq_len { (tokens.len() - 1) / seq_len } else { 0 };
    let picks: Vec<usize> = match max {
        Some(m) if m < count => (0..m).map(|i| i * count / m).collect(),
        _ => (0..count).collect(),
    };
    picks
        .into_iter()
        .map(|w| {
            let o = w * seq_len;
            (tokens[o..o + seq_len].to_vec(), tokens[o + 1..o + seq_len + 1].to_vec())
        })
        .collect()
}
