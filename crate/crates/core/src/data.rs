//! Byte-level tokenization, contiguous train/validation splits, and seeded
//! next-token batching.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

/// Small bundled text sample used by tests and as the default corpus.
pub const SAMPLE_CORPUS: &[u8] = include_bytes!("../data/sample.txt");

pub const BYTE_VOCAB: usize = 256;

pub const TOKEN_CACHE_MAGIC: &[u8; 4] = b"ACTK";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("stream of {len} tokens is too short: {needed} required")]
    TooShort { len: usize, needed: usize },
    #[error("invalid data argument: {0}")]
    Invalid(String),
    #[error("token {id} out of range for vocabulary {vocab_size}")]
    TokenRange { id: usize, vocab_size: usize },
    #[error("end of data")]
    EndOfData,
    #[error("token cache: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Full,
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub source: String,
    pub byte_count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    ids: Vec<usize>,
    vocab_size: usize,
    pub provenance: Provenance,
    pub split: Split,
}

impl TokenStream {
    pub fn new(ids: Vec<usize>, vocab_size: usize, provenance: Provenance) -> Result<Self, DataError> {
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(DataError::TokenRange { id, vocab_size });
        }
        Ok(Self { ids, vocab_size, provenance, split: Split::Full })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Number of `sequence_length` windows with a following target token.
    pub fn window_count(&self, sequence_length: usize) -> usize {
        self.ids.len().saturating_sub(sequence_length)
    }
}

/// Identity byte → id mapping with a 256-entry vocabulary.
pub fn tokenize_bytes(text: &[u8]) -> TokenStream {
    TokenStream {
        ids: text.iter().map(|&b| b as usize).collect(),
        vocab_size: BYTE_VOCAB,
        provenance: Provenance { source: "<memory>".into(), byte_count: text.len() as u64 },
        split: Split::Full,
    }
}

pub fn detokenize(stream: &TokenStream) -> Result<Vec<u8>, DataError> {
    stream
        .ids
        .iter()
        .map(|&id| u8::try_from(id).map_err(|_| DataError::TokenRange { id, vocab_size: BYTE_VOCAB }))
        .collect()
}

pub fn read_corpus(path: &Path) -> Result<TokenStream, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    let mut stream = tokenize_bytes(&bytes);
    stream.provenance.source = path.display().to_string();
    Ok(stream)
}

/// Splits off the contiguous tail as validation data. Both parts must hold
/// at least one window of `sequence_length` inputs plus a target.
pub fn split(
    stream: &TokenStream,
    validation_fraction: f64,
    sequence_length: usize,
) -> Result<(TokenStream, TokenStream), DataError> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(DataError::Invalid(format!("validation fraction must be in (0, 1), got {validation_fraction}")));
    }
    let needed = 2 * (sequence_length + 1);
    if stream.len() < needed {
        return Err(DataError::TooShort { len: stream.len(), needed });
    }
    let n_val = ((stream.len() as f64) * validation_fraction).round() as usize;
    let n_train = stream.len() - n_val;
    if n_val < sequence_length + 1 || n_train < sequence_length + 1 {
        return Err(DataError::TooShort { len: stream.len(), needed });
    }
    let part = |ids: &[usize], split| TokenStream {
        ids: ids.to_vec(),
        vocab_size: stream.vocab_size,
        provenance: stream.provenance.clone(),
        split,
    };
    Ok((part(&stream.ids[..n_train], Split::Train), part(&stream.ids[n_train..], Split::Validation)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub offset: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

/// The window starting at `offset`: inputs `[o, o+L)`, targets shifted by one.
pub fn window(stream: &TokenStream, offset: usize, sequence_length: usize) -> Result<Batch, DataError> {
    let end = offset + sequence_length + 1;
    if end > stream.len() || sequence_length == 0 {
        return Err(DataError::TooShort { len: stream.len(), needed: end });
    }
    Ok(Batch { offset, inputs: stream.ids[offset..end - 1].to_vec(), targets: stream.ids[offset + 1..end].to_vec() })
}

/// Seeded epoch-wise shuffle over every valid window offset.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub sequence_length: usize,
    pub seed: u64,
    pub cycle: bool,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
}

impl BatchPlan {
    pub fn new(sequence_length: usize, seed: u64) -> Self {
        Self { sequence_length, seed, cycle: true, epoch: 0, cursor: 0, order: Vec::new() }
    }

    /// Stop with [`DataError::EndOfData`] after one epoch.
    pub fn single_epoch(mut self) -> Self {
        self.cycle = false;
        self
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    fn shuffle(&mut self, windows: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(self.epoch));
        self.order = (0..windows).collect();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }
}

pub fn next_batch(stream: &TokenStream, plan: &mut BatchPlan) -> Result<Batch, DataError> {
    let windows = stream.window_count(plan.sequence_length);
    if windows == 0 || plan.sequence_length == 0 {
        return Err(DataError::TooShort { len: stream.len(), needed: plan.sequence_length + 1 });
    }
    if plan.order.len() != windows {
        plan.shuffle(windows);
    }
    if plan.cursor == plan.order.len() {
        if !plan.cycle {
            return Err(DataError::EndOfData);
        }
        plan.epoch += 1;
        plan.shuffle(windows);
    }
    let offset = plan.order[plan.cursor];
    plan.cursor += 1;
    window(stream, offset, plan.sequence_length)
}

/// Writes the `ACTK` sidecar: magic, vocab size u32, count u64, ids as u16.
pub fn write_token_cache(stream: &TokenStream, path: &Path) -> Result<(), DataError> {
    if stream.vocab_size > u16::MAX as usize + 1 {
        return Err(DataError::Cache(format!("vocabulary {} does not fit u16 ids", stream.vocab_size)));
    }
    let io = |source| DataError::Io { path: path.display().to_string(), source };
    let mut buf = Vec::with_capacity(16 + 2 * stream.len());
    buf.extend_from_slice(TOKEN_CACHE_MAGIC);
    buf.extend_from_slice(&(stream.vocab_size as u32).to_le_bytes());
    buf.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    for &id in &stream.ids {
        buf.extend_from_slice(&(id as u16).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&buf).map_err(io)
}

pub fn read_token_cache(path: &Path) -> Result<TokenStream, DataError> {
    let io = |source| DataError::Io { path: path.display().to_string(), source };
    let mut bytes = Vec::new();
    fs::File::open(path).map_err(io)?.read_to_end(&mut bytes).map_err(io)?;
    if bytes.len() < 16 || &bytes[..4] != TOKEN_CACHE_MAGIC {
        return Err(DataError::Cache("missing ACTK header".into()));
    }
    let vocab_size = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + 2 * count {
        return Err(DataError::Cache(format!("header declares {count} tokens but file holds {} bytes", bytes.len())));
    }
    let ids = bytes[16..].chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as usize).collect();
    TokenStream::new(ids, vocab_size, Provenance { source: path.display().to_string(), byte_count: bytes.len() as u64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_and_empty() {
        assert_eq!(tokenize_bytes(b"abc").ids(), &[97, 98, 99]);
        assert!(tokenize_bytes(b"").is_empty());
    }

    #[test]
    fn split_sizes() {
        let s = tokenize_bytes(&[7u8; 1000]);
        let (tr, va) = split(&s, 0.1, 8).unwrap();
        assert_eq!((tr.len(), va.len()), (900, 100));
        assert_eq!((tr.split, va.split), (Split::Train, Split::Validation));
        let (tr, va) = split(&s, 0.5, 8).unwrap();
        assert_eq!(tr.len(), va.len());
        assert!(split(&s, 0.0, 8).is_err());
        assert!(matches!(split(&tokenize_bytes(&[1u8; 10]), 0.5, 8), Err(DataError::TooShort { .. })));
    }

    #[test]
    fn shift_by_one() {
        let s = TokenStream::new(vec![1, 2, 3, 4, 5], 6, Provenance { source: "t".into(), byte_count: 5 }).unwrap();
        let b = window(&s, 0, 2).unwrap();
        assert_eq!((b.inputs, b.targets), (vec![1, 2], vec![2, 3]));
        assert!(window(&s, 3, 2).is_err());
    }

    #[test]
    fn single_epoch_ends() {
        let s = tokenize_bytes(b"abcdef");
        let mut plan = BatchPlan::new(2, 1).single_epoch();
        for _ in 0..4 {
            next_batch(&s, &mut plan).unwrap();
        }
        assert!(matches!(next_batch(&s, &mut plan), Err(DataError::EndOfData)));
    }

    #[test]
    fn out_of_range_ids_rejected() {
        assert!(TokenStream::new(vec![0, 9], 9, Provenance { source: "t".into(), byte_count: 0 }).is_err());
    }
}
