//! Ancestral sampling of symbol sequences and synthetic flow tables.
//!
//! Sequences are generated in fixed-size chunks; chunk `c` draws from
//! `Rng::stream(seed, "sample", c)`, so the output does not depend on how
//! many threads process the chunks.

use std::path::Path;

use rayon::prelude::*;

use crate::codec::{decode, Codebook, SymbolDataset};
use crate::error::{Error, Result};
use crate::ingest::{write_csv, FlowTable};
use crate::model::Model;
use crate::rng::Rng;

/// Sequences generated per rng stream.
pub const CHUNK: usize = 256;

/// Below this temperature sampling is replaced by argmax.
pub const GREEDY_BELOW: f64 = 1e-6;

/// Next-symbol probabilities from one logit row: the start symbol `start` is
/// masked out and the remaining logits are divided by `temperature`.
pub fn next_symbol_distribution(logits: &[f32], temperature: f64, start: usize) -> Vec<f64> {
    let scaled: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if i == start {
                f64::NEG_INFINITY
            } else {
                f64::from(l) / temperature
            }
        })
        .collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / z).collect()
}

fn argmax_excluding(logits: &[f32], start: usize) -> usize {
    let mut best = usize::MAX;
    for (i, &l) in logits.iter().enumerate() {
        if i != start && (best == usize::MAX || l > logits[best]) {
            best = i;
        }
    }
    best
}

fn draw(probs: &[f64], rng: &mut Rng) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    // Rounding left the cumulative sum just below 1.
    last
}

/// Generates `n` sequences of `seq_len` symbols (start symbol first).
pub fn sample_ids(model: &Model, seq_len: usize, n: usize, temperature: f64, seed: u64) -> Result<SymbolDataset> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let vocab = model.config.vocab_size;
    let start = vocab - 1;
    if seq_len < 2 || seq_len - 1 > model.config.context_length {
        return Err(Error::InvalidArgument(format!(
            "sequence length {seq_len} does not fit the model context {}",
            model.config.context_length
        )));
    }
    let chunks: Vec<usize> = (0..n.div_ceil(CHUNK)).collect();
    let parts: Vec<Result<Vec<usize>>> = chunks
        .par_iter()
        .map(|&c| {
            let rows = CHUNK.min(n - c * CHUNK);
            let mut rng = Rng::stream(seed, "sample", c as u64);
            let mut seqs = vec![vec![start]; rows];
            for t in 1..seq_len {
                let ids: Vec<usize> = seqs.iter().flatten().copied().collect();
                let logits = model.logits(&ids, rows)?;
                let data = logits.data();
                for (r, seq) in seqs.iter_mut().enumerate() {
                    let row = &data[(r * t + t - 1) * vocab..][..vocab];
                    let next = if temperature < GREEDY_BELOW {
                        argmax_excluding(row, start)
                    } else {
                        draw(&next_symbol_distribution(row, temperature, start), &mut rng)
                    };
                    seq.push(next);
                }
            }
            Ok(seqs.concat())
        })
        .collect();
    let mut ids = Vec::with_capacity(n * seq_len);
    for p in parts {
        ids.extend(p?);
    }
    SymbolDataset::new(ids, seq_len, vocab)
}

/// [`sample_ids`] with the length and vocabulary taken from `cb`.
pub fn sample_sequences(model: &Model, cb: &Codebook, n: usize, temperature: f64, seed: u64) -> Result<SymbolDataset> {
    if model.config.vocab_size != cb.vocab_size() {
        return Err(Error::InvalidArgument(format!(
            "model vocabulary {} does not match the codebook's {}",
            model.config.vocab_size,
            cb.vocab_size()
        )));
    }
    sample_ids(model, cb.sequence_length(), n, temperature, seed)
}

/// Samples `n` sequences, decodes them and optionally writes the CSV.
pub fn generate_flows(
    model: &Model,
    cb: &Codebook,
    n: usize,
    temperature: f64,
    seed: u64,
    out: Option<&Path>,
) -> Result<FlowTable> {
    let ds = sample_sequences(model, cb, n, temperature, seed)?;
    let decoded = decode(ds.iter(), cb)?;
    assert!(decoded.skipped.is_empty(), "masked sampling produced malformed sequences");
    if let Some(path) = out {
        write_csv(&decoded.table, path)?;
    }
    Ok(decoded.table)
}
