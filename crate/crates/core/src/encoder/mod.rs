//! Sentence encoders producing the fixed-size context and response vectors.
//!
//! The reference encoder embeds tokens, runs one bidirectional GRU layer with
//! `d/2` units per direction and reduces the per-position states to the state
//! at position 0 (the BOS slot). Alternative encoders plug in through
//! [`SentenceEncoder`].

mod vocab;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gru::{self, GruCell, TapeGru};
use crate::numerics::{Real, Tape, Var};
use crate::params::{Bound, ParamSet};

pub use vocab::{Vocabulary, BOS, EOT, EOT_TOKEN, PAD, UNK};

pub const EMBEDDING: &str = "enc.embedding";
pub const FORWARD: &str = "enc.fwd";
pub const BACKWARD: &str = "enc.bwd";
pub const PREFIX: &str = "enc.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embedding_dim: usize,
    /// Output vector size `d`; each GRU direction has `d/2` units.
    pub hidden_dim: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize, embedding_dim: usize, hidden_dim: usize) -> Self {
        EncoderConfig {
            embedding_dim,
            hidden_dim,
            max_seq_len: 64,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.hidden_dim == 0 || self.max_seq_len == 0 || self.vocab_size == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.hidden_dim % 2 != 0 {
            return Err(Error::Config(format!("hidden_dim must be even, got {}", self.hidden_dim)));
        }
        Ok(())
    }

    pub fn half(&self) -> usize {
        self.hidden_dim / 2
    }

    pub fn init_params<T: Real, R: Rng>(&self, params: &mut ParamSet<T>, rng: &mut R) {
        params.init_uniform(EMBEDDING, &[self.vocab_size, self.embedding_dim], self.embedding_dim, rng);
        gru::init(params, FORWARD, self.embedding_dim, self.half(), rng);
        gru::init(params, BACKWARD, self.embedding_dim, self.half(), rng);
    }
}

/// Anything that maps a token-id sequence to a vector of fixed size.
pub trait SentenceEncoder: Send + Sync {
    fn dim(&self) -> usize;

    fn encode(&self, ids: &[u32]) -> Result<Vec<f32>>;

    /// Number of `encode` calls served so far.
    fn encode_calls(&self) -> u64;
}

fn embedding_row<'a, T: Real>(emb: &'a [T], dim: usize, vocab: usize, id: u32) -> Result<&'a [T]> {
    let i = id as usize;
    if i >= vocab {
        return Err(Error::UnknownId(id as u64));
    }
    Ok(&emb[i * dim..(i + 1) * dim])
}

/// Per-position states `[forward_t ; backward_t]` for `ids`.
pub fn hidden_states<T: Real>(config: &EncoderConfig, params: &ParamSet<T>, ids: &[u32]) -> Result<Vec<Vec<T>>> {
    if ids.is_empty() {
        return Err(Error::Empty("encode"));
    }
    let emb = params.get(EMBEDDING)?.data();
    let fwd = GruCell::from_params(params, FORWARD)?;
    let bwd = GruCell::from_params(params, BACKWARD)?;
    let (e, v, h) = (config.embedding_dim, config.vocab_size, config.half());
    let mut forward = Vec::with_capacity(ids.len());
    let mut state = vec![T::zero(); h];
    for &id in ids {
        state = fwd.step(embedding_row(emb, e, v, id)?, &state)?;
        forward.push(state.clone());
    }
    let mut backward = vec![Vec::new(); ids.len()];
    let mut state = vec![T::zero(); h];
    for (t, &id) in ids.iter().enumerate().rev() {
        state = bwd.step(embedding_row(emb, e, v, id)?, &state)?;
        backward[t] = state.clone();
    }
    Ok(forward
        .into_iter()
        .zip(backward)
        .map(|(mut f, b)| {
            f.extend(b);
            f
        })
        .collect())
}

/// Reduced sentence vector: the BiGRU state at position 0.
///
/// Only the work that position 0 depends on is done: one forward step and
/// the full backward sweep.
pub fn encode_with<T: Real>(config: &EncoderConfig, params: &ParamSet<T>, ids: &[u32]) -> Result<Vec<T>> {
    if ids.is_empty() {
        return Err(Error::Empty("encode"));
    }
    let emb = params.get(EMBEDDING)?.data();
    let fwd = GruCell::from_params(params, FORWARD)?;
    let bwd = GruCell::from_params(params, BACKWARD)?;
    let (e, v, h) = (config.embedding_dim, config.vocab_size, config.half());
    let zero = vec![T::zero(); h];
    let mut out = fwd.step(embedding_row(emb, e, v, ids[0])?, &zero)?;
    let mut state = zero;
    for &id in ids.iter().rev() {
        state = bwd.step(embedding_row(emb, e, v, id)?, &state)?;
    }
    out.extend(state);
    Ok(out)
}

/// Batched tape version of [`encode_with`]; returns a B×d node.
pub fn encode_batch_tape<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    config: &EncoderConfig,
    seqs: &[Vec<u32>],
) -> Result<Var> {
    if seqs.is_empty() || seqs.iter().any(Vec::is_empty) {
        return Err(Error::Empty("encode"));
    }
    if let Some(bad) = seqs.iter().flatten().find(|&&id| id as usize >= config.vocab_size) {
        return Err(Error::UnknownId(*bad as u64));
    }
    let b = seqs.len();
    let h = config.half();
    let emb = bound.var(EMBEDDING)?;
    let fwd = TapeGru::bind(tape, bound, FORWARD)?;
    let bwd = TapeGru::bind(tape, bound, BACKWARD)?;
    let zero = tape.constant(&[b, h], vec![T::zero(); b * h]);

    let first: Vec<usize> = seqs.iter().map(|s| s[0] as usize).collect();
    let x0 = tape.gather_rows(emb, &first)?;
    let forward0 = fwd.step(tape, x0, zero)?;

    // right-aligned sweep: at step s row i reads position max_len-1-s,
    // rows that have not started yet are held at the zero state
    let max_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
    let mut state = zero;
    for s in 0..max_len {
        let pos = max_len - 1 - s;
        let ids: Vec<usize> = seqs
            .iter()
            .map(|q| q.get(pos).map_or(PAD as usize, |&id| id as usize))
            .collect();
        let x = tape.gather_rows(emb, &ids)?;
        let next = bwd.step(tape, x, state)?;
        state = if seqs.iter().all(|q| q.len() > pos) {
            next
        } else {
            let mask: Vec<T> = seqs
                .iter()
                .flat_map(|q| {
                    let on = if q.len() > pos { T::one() } else { T::zero() };
                    std::iter::repeat(on).take(h)
                })
                .collect();
            let m = tape.constant(&[b, h], mask);
            tape.mul(next, m)?
        };
    }
    tape.concat_cols(&[forward0, state])
}

/// The trainable reference encoder with frozen weights, for inference.
#[derive(Debug)]
pub struct ReferenceEncoder {
    config: EncoderConfig,
    params: ParamSet<f32>,
    calls: AtomicU64,
}

impl Clone for ReferenceEncoder {
    fn clone(&self) -> Self {
        ReferenceEncoder {
            config: self.config,
            params: self.params.clone(),
            calls: AtomicU64::new(0),
        }
    }
}

impl ReferenceEncoder {
    /// Takes the `enc.*` entries of `params`.
    pub fn new(config: EncoderConfig, params: &ParamSet<f32>) -> Result<Self> {
        config.validate()?;
        let mut own = ParamSet::new();
        own.extend_from(params, PREFIX);
        let emb = own.get(EMBEDDING)?;
        if emb.shape() != [config.vocab_size, config.embedding_dim] {
            return Err(Error::shape(
                "encoder embedding",
                emb.shape(),
                &[config.vocab_size, config.embedding_dim],
            ));
        }
        Ok(ReferenceEncoder {
            config,
            params: own,
            calls: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn states(&self, ids: &[u32]) -> Result<Vec<Vec<f32>>> {
        hidden_states(&self.config, &self.params, ids)
    }
}

impl SentenceEncoder for ReferenceEncoder {
    fn dim(&self) -> usize {
        self.config.hidden_dim
    }

    fn encode(&self, ids: &[u32]) -> Result<Vec<f32>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        encode_with(&self.config, &self.params, ids)
    }

    fn encode_calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}
