//! In-batch negative training, AdamW, the two-phase schedule and
//! checkpoints.
//!
//! Phase 1 trains the encoder and the Bi-Encoder scorer. Phase 2 starts from
//! the phase-1 weights, copies the Bi-Encoder scorer into the enrichment
//! scorer and trains the enrichment head against neighbor contexts taken
//! from stores built with the phase-1 encoder.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{context_text, DialogueSample, EvalGroup};
use crate::encoder::{self, encode_batch_tape, SentenceEncoder, Vocabulary};
use crate::enrichment::{ce_logits_tape, CE_PREFIX, CE_SCORER};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalSet};
use crate::matching::{biencoder_score, Comparison, BE_PREFIX, BE_SCORER};
use crate::model::{ModelConfig, Ranker};
use crate::numerics::{log_sum_exp, Real, Tape, Tensor, Var};
use crate::params::{Bound, ParamSet};
use crate::store::{EmbeddingStore, StoreKind};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub phase1_lr: f32,
    pub phase2_lr: f32,
    pub weight_decay: f32,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub freeze_encoder_phase2: bool,
    pub k: usize,
    /// Drop a response's own context from its neighbor list.
    pub exclude_self: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            phase1_lr: 5e-5,
            phase2_lr: 1e-4,
            weight_decay: 0.01,
            max_epochs: 20,
            patience: 3,
            seed: 0,
            freeze_encoder_phase2: true,
            k: 20,
            exclude_self: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for in-batch negatives".into()));
        }
        if !(self.phase1_lr > 0.0 && self.phase2_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// A positive training pair, tokenized.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub id: u64,
    pub context: Vec<u32>,
    pub response: Vec<u32>,
}

/// Keeps label-1 samples; in-batch training draws its negatives from other
/// rows of the batch.
pub fn prepare_examples(samples: &[DialogueSample], vocab: &Vocabulary, max_seq_len: usize) -> Vec<Example> {
    samples
        .iter()
        .filter(|s| s.label == 1)
        .map(|s| Example {
            id: s.id,
            context: vocab.tokenize(&context_text(&s.context), max_seq_len),
            response: vocab.tokenize(&s.response, max_seq_len),
        })
        .collect()
}

/// Vocabulary over every context and response of the training samples.
pub fn build_vocabulary(samples: &[DialogueSample]) -> Vocabulary {
    Vocabulary::build(
        samples
            .iter()
            .flat_map(|s| s.context.iter().map(String::as_str).chain([s.response.as_str()])),
    )
}

/// `logits[i][j]` = Bi-Encoder score of context `i` with response `j`.
pub fn in_batch_logits<T: Real>(
    contexts: &[Vec<T>],
    responses: &[Vec<T>],
    params: &ParamSet<T>,
    variant: Comparison,
) -> Result<Vec<Vec<T>>> {
    if contexts.len() < 2 {
        return Err(Error::Config("in-batch logits need a batch of at least 2".into()));
    }
    if contexts.len() != responses.len() {
        return Err(Error::shape("in_batch_logits", &[contexts.len()], &[responses.len()]));
    }
    contexts
        .iter()
        .map(|c| responses.iter().map(|r| biencoder_score(c, r, params, variant)).collect())
        .collect()
}

/// Mean over rows of `-log softmax(row)[row]`, in f64.
pub fn cross_entropy_in_batch<T: Real>(logits: &[Vec<T>]) -> Result<f64> {
    let b = logits.len();
    if b == 0 {
        return Err(Error::Empty("cross_entropy_in_batch"));
    }
    if let Some(row) = logits.iter().find(|r| r.len() != b) {
        return Err(Error::shape("cross_entropy_in_batch", &[b, b], &[b, row.len()]));
    }
    let mut total = 0.0;
    for (i, row) in logits.iter().enumerate() {
        let xs: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logit row {i}")));
        }
        total += log_sum_exp(&xs) - xs[i];
    }
    Ok(total / b as f64)
}

/// Tape logits for every (context i, response j) pair of a batch, B×B.
///
/// `neighbors[t]` is B×d; its row j is the rank-t neighbor of response j.
pub fn pair_logits_tape<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    contexts: Var,
    responses: Var,
    neighbors: &[Var],
    model: &ModelConfig,
) -> Result<Var> {
    let b = tape.shape(contexts)[0];
    let ci: Vec<usize> = (0..b * b).map(|p| p / b).collect();
    let rj: Vec<usize> = (0..b * b).map(|p| p % b).collect();
    let c = tape.gather_rows(contexts, &ci)?;
    let r = tape.gather_rows(responses, &rj)?;
    let n: Vec<Var> = neighbors
        .iter()
        .map(|v| tape.gather_rows(*v, &rj))
        .collect::<Result<_>>()?;
    let s = ce_logits_tape(tape, bound, c, r, &n, model.comparison, model.head)?;
    tape.reshape(s, &[b, b])
}

/// Adam with decoupled weight decay and bias correction.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    steps: i32,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    pub fn new(lr: f32, weight_decay: f32) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// Updates every parameter selected by `trainable` from its accumulated
    /// gradient (missing gradients count as zero).
    pub fn step(&mut self, params: &mut ParamSet<f32>, trainable: impl Fn(&str) -> bool) -> Result<()> {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for (name, t) in params.iter_mut() {
            if !trainable(name) {
                continue;
            }
            let n = t.len();
            let grad = t.grad().map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            if m.len() != n {
                return Err(Error::shape("optimizer_step", &[m.len()], &[n]));
            }
            let decay = 1.0 - self.lr * self.weight_decay;
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *p = *p * decay - self.lr * update;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub batch_losses: Vec<f64>,
    pub mean_loss: f64,
    pub dev_r1: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights at the best dev epoch (the last epoch without dev data).
    pub params: ParamSet<f32>,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_dev_r1: Option<f64>,
}

/// Development data used for early stopping.
#[derive(Clone, Copy, Debug)]
pub struct Dev<'a> {
    pub vocab: &'a Vocabulary,
    pub groups: &'a [EvalGroup],
}

fn batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

fn constant_rows(tape: &mut Tape<f32>, store: &EmbeddingStore, rows: impl Iterator<Item = usize>) -> Var {
    let d = store.dim();
    let mut data = Vec::new();
    let mut n = 0;
    for i in rows {
        data.extend_from_slice(store.row(i));
        n += 1;
    }
    tape.constant(&[n, d], data)
}

struct Stopper {
    patience: usize,
    best: Option<(f64, usize)>,
}

impl Stopper {
    /// Records an epoch; true when it is the new best.
    fn record(&mut self, epoch: usize, score: f64) -> bool {
        match self.best {
            Some((b, _)) if score <= b => false,
            _ => {
                self.best = Some((score, epoch));
                true
            }
        }
    }

    fn should_stop(&self, epoch: usize) -> bool {
        self.best.is_some_and(|(_, e)| epoch - e >= self.patience)
    }
}

fn is_phase1(name: &str) -> bool {
    name.starts_with(encoder::PREFIX) || name.starts_with(BE_PREFIX)
}

fn check_batch(train: &[Example], tc: &TrainConfig) -> Result<()> {
    tc.validate()?;
    if train.len() < tc.batch_size {
        return Err(Error::Config(format!(
            "{} training pairs cannot fill one batch of {}",
            train.len(),
            tc.batch_size
        )));
    }
    Ok(())
}

/// Trains encoder and Bi-Encoder scorer with in-batch negatives and
/// AdamW, early-stopping on dev R10@1.
pub fn train_phase1(
    model: &ModelConfig,
    init: ParamSet<f32>,
    train: &[Example],
    dev: Option<Dev<'_>>,
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    model.validate()?;
    check_batch(train, tc)?;
    let mut params = init;
    let mut opt = AdamW::new(tc.phase1_lr, tc.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut stopper = Stopper {
        patience: tc.patience,
        best: None,
    };
    let mut history = Vec::new();
    let mut best = params.clone();
    for epoch in 0..tc.max_epochs {
        let mut losses = Vec::new();
        for batch in batches(train.len(), tc.batch_size, &mut rng) {
            let ctx: Vec<Vec<u32>> = batch.iter().map(|&i| train[i].context.clone()).collect();
            let rsp: Vec<Vec<u32>> = batch.iter().map(|&i| train[i].response.clone()).collect();
            let mut tape = Tape::new();
            let bound = Bound::new(&mut tape, &params, is_phase1);
            let c = encode_batch_tape(&mut tape, &bound, &model.encoder, &ctx)?;
            let r = encode_batch_tape(&mut tape, &bound, &model.encoder, &rsp)?;
            let logits = pair_logits_tape(&mut tape, &bound, c, r, &[], model)?;
            let targets: Vec<usize> = (0..batch.len()).collect();
            let loss = tape.cross_entropy_rows(logits, &targets)?;
            tape.backward(loss)?;
            params.zero_grad();
            bound.collect_grads(&tape, &mut params)?;
            opt.step(&mut params, is_phase1)?;
            losses.push(tape.scalar(loss) as f64);
        }
        let dev_r1 = match dev {
            Some(d) if !d.groups.is_empty() => Some(dev_recall(model, &params, d, None, 0)?),
            _ => None,
        };
        let log = epoch_log(epoch, losses, dev_r1);
        info!("phase 1 epoch {epoch}: loss {:.4} dev R10@1 {:?}", log.mean_loss, dev_r1);
        history.push(log);
        if stopper.record(epoch, dev_r1.unwrap_or(0.0)) || dev_r1.is_none() {
            best = params.clone();
        }
        if dev_r1.is_some() && stopper.should_stop(epoch) {
            break;
        }
    }
    Ok(outcome(best, history, stopper))
}

fn epoch_log(epoch: usize, batch_losses: Vec<f64>, dev_r1: Option<f64>) -> EpochLog {
    let mean_loss = if batch_losses.is_empty() {
        0.0
    } else {
        batch_losses.iter().sum::<f64>() / batch_losses.len() as f64
    };
    EpochLog {
        epoch,
        batch_losses,
        mean_loss,
        dev_r1,
    }
}

fn outcome(params: ParamSet<f32>, history: Vec<EpochLog>, stopper: Stopper) -> TrainOutcome {
    let has_dev = history.iter().any(|h| h.dev_r1.is_some());
    let (best_dev_r1, best_epoch) = match stopper.best {
        Some((s, e)) if has_dev => (Some(s), e),
        _ => (None, history.len().saturating_sub(1)),
    };
    TrainOutcome {
        params,
        history,
        best_epoch,
        best_dev_r1,
    }
}

fn dev_recall(model: &ModelConfig, params: &ParamSet<f32>, dev: Dev<'_>, contexts: Option<&EmbeddingStore>, k: usize) -> Result<f64> {
    let ranker = Ranker::new(*model, params.clone())?;
    let contexts = match contexts {
        Some(c) => c.clone(),
        None => EmbeddingStore::from_vectors(StoreKind::Context, model.dim(), Vec::new())?,
    };
    let set = EvalSet::build(&ranker, dev.vocab, dev.groups, contexts, k)?;
    Ok(evaluate(&ranker, &set, k, "dev", 0)?.recall(1))
}

/// Context and response stores over the training pairs, keyed by pair id.
pub fn training_stores(encoder: &dyn SentenceEncoder, train: &[Example]) -> Result<(EmbeddingStore, EmbeddingStore)> {
    let ctx: Vec<(u64, Vec<u32>)> = train.iter().map(|e| (e.id, e.context.clone())).collect();
    let rsp: Vec<(u64, Vec<u32>)> = train.iter().map(|e| (e.id, e.response.clone())).collect();
    Ok((
        EmbeddingStore::build(encoder, StoreKind::Context, &ctx)?,
        EmbeddingStore::build(encoder, StoreKind::Response, &rsp)?,
    ))
}

/// Context-store rows of the top `k` neighbors of every training response.
fn neighbor_rows(contexts: &EmbeddingStore, responses: &EmbeddingStore, k: usize, exclude_self: bool) -> Result<Vec<Vec<usize>>> {
    (0..responses.len())
        .map(|i| {
            let id = responses.ids()[i];
            let exclude = if exclude_self { HashSet::from([id]) } else { HashSet::new() };
            let hits = contexts.top_k(responses.row(i), k, &exclude)?;
            Ok(hits
                .iter()
                .map(|h| contexts.position(h.id).expect("hit in store"))
                .collect())
        })
        .collect()
}

/// Copies every `be.scorer.*` tensor into the matching `ce.scorer.*` slot.
pub fn warm_start_ce_scorer(params: &mut ParamSet<f32>) -> Result<()> {
    let names: Vec<String> = params
        .names()
        .filter(|n| n.starts_with(BE_SCORER))
        .map(str::to_string)
        .collect();
    for name in names {
        let target = name.replacen(BE_SCORER, CE_SCORER, 1);
        let src = params.get(&name)?.clone();
        let dst = params.get_mut(&target)?;
        if dst.shape() != src.shape() {
            return Err(Error::shape("warm start", dst.shape(), src.shape()));
        }
        dst.data_mut().copy_from_slice(src.data());
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Phase2Outcome {
    pub train: TrainOutcome,
    /// Stores in use at the end of training.
    pub contexts: EmbeddingStore,
    pub responses: EmbeddingStore,
}

/// Trains the enrichment head from a phase-1 checkpoint.
///
/// With a frozen encoder the stores are built once and stay valid; else the
/// encoder is trained too and the stores are rebuilt every epoch.
pub fn train_phase2(
    model: &ModelConfig,
    phase1: &ParamSet<f32>,
    train: &[Example],
    dev: Option<Dev<'_>>,
    tc: &TrainConfig,
) -> Result<Phase2Outcome> {
    model.validate()?;
    check_batch(train, tc)?;
    let mut params = phase1.clone();
    warm_start_ce_scorer(&mut params)?;
    let freeze = tc.freeze_encoder_phase2;
    let trainable = |n: &str| n.starts_with(CE_PREFIX) || (!freeze && n.starts_with(encoder::PREFIX));
    let mut opt = AdamW::new(tc.phase2_lr, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut stopper = Stopper {
        patience: tc.patience,
        best: None,
    };
    let mut history = Vec::new();
    let mut best = params.clone();

    let mut ranker = Ranker::new(*model, params.clone())?;
    let (mut contexts, mut responses) = training_stores(ranker.encoder(), train)?;
    if contexts.dim() != model.dim() {
        return Err(Error::shape("phase 2 stores", &[contexts.dim()], &[model.dim()]));
    }
    let mut neighbors = neighbor_rows(&contexts, &responses, tc.k, tc.exclude_self)?;
    for epoch in 0..tc.max_epochs {
        if epoch > 0 && !freeze {
            ranker = Ranker::new(*model, params.clone())?;
            (contexts, responses) = training_stores(ranker.encoder(), train)?;
            neighbors = neighbor_rows(&contexts, &responses, tc.k, tc.exclude_self)?;
        }
        let mut losses = Vec::new();
        for batch in batches(train.len(), tc.batch_size, &mut rng) {
            let mut tape = Tape::new();
            let bound = Bound::new(&mut tape, &params, trainable);
            let (c, r) = if freeze {
                (
                    constant_rows(&mut tape, &contexts, batch.iter().copied()),
                    constant_rows(&mut tape, &responses, batch.iter().copied()),
                )
            } else {
                let ctx: Vec<Vec<u32>> = batch.iter().map(|&i| train[i].context.clone()).collect();
                let rsp: Vec<Vec<u32>> = batch.iter().map(|&i| train[i].response.clone()).collect();
                (
                    encode_batch_tape(&mut tape, &bound, &model.encoder, &ctx)?,
                    encode_batch_tape(&mut tape, &bound, &model.encoder, &rsp)?,
                )
            };
            // every response in the batch contributes the same number of neighbors
            let k = batch.iter().map(|&i| neighbors[i].len()).min().unwrap_or(0);
            let ns: Vec<Var> = (0..k)
                .map(|t| constant_rows(&mut tape, &contexts, batch.iter().map(|&i| neighbors[i][t])))
                .collect();
            let logits = pair_logits_tape(&mut tape, &bound, c, r, &ns, model)?;
            let targets: Vec<usize> = (0..batch.len()).collect();
            let loss = tape.cross_entropy_rows(logits, &targets)?;
            tape.backward(loss)?;
            params.zero_grad();
            bound.collect_grads(&tape, &mut params)?;
            debug!("phase 2 grad norm² {}", params.grad_norm_sq(CE_PREFIX));
            opt.step(&mut params, trainable)?;
            losses.push(tape.scalar(loss) as f64);
        }
        let dev_r1 = match dev {
            Some(d) if !d.groups.is_empty() => {
                // the dev store must come from the encoder being evaluated
                let ctx = if freeze {
                    contexts.clone()
                } else {
                    let r = Ranker::new(*model, params.clone())?;
                    training_stores(r.encoder(), train)?.0
                };
                Some(dev_recall(model, &params, d, Some(&ctx), tc.k)?)
            }
            _ => None,
        };
        let log = epoch_log(epoch, losses, dev_r1);
        info!("phase 2 epoch {epoch}: loss {:.4} dev R10@1 {:?}", log.mean_loss, dev_r1);
        history.push(log);
        if stopper.record(epoch, dev_r1.unwrap_or(0.0)) || dev_r1.is_none() {
            best = params.clone();
        }
        if dev_r1.is_some() && stopper.should_stop(epoch) {
            break;
        }
    }
    if !freeze {
        let r = Ranker::new(*model, best.clone())?;
        (contexts, responses) = training_stores(r.encoder(), train)?;
    }
    Ok(Phase2Outcome {
        train: outcome(best, history, stopper),
        contexts,
        responses,
    })
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CERANKCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub phase: u8,
    pub seed: u64,
    pub train: Option<TrainConfig>,
    pub best_dev_r1: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    vocab: Vec<String>,
    meta: CheckpointMeta,
    tensors: Vec<(String, Vec<usize>)>,
}

/// Model config, vocabulary and all named weights.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamSet<f32>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    /// Layout: magic, u32 version, u64 header length, JSON header (config,
    /// vocabulary, tensor names and shapes), then every tensor's f32 data in
    /// header order, all little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            model: self.model,
            vocab: (0..self.vocab.len() as u32)
                .map(|i| self.vocab.token(i).expect("dense").to_string())
                .collect(),
            meta: self.meta.clone(),
            tensors: self.params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in self.params.iter() {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let fail = |m: &str| Error::Format(format!("{}: {m}", path.display()));
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fail("not a checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(fail(&format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20usize.saturating_add(len)).ok_or_else(|| fail("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| fail(&e.to_string()))?;
        let mut data = &bytes[20 + len..];
        let mut params = ParamSet::new();
        for (name, shape) in header.tensors {
            let n: usize = shape.iter().product();
            if data.len() < n * 4 {
                return Err(fail("truncated tensor data"));
            }
            let values = data[..n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            data = &data[n * 4..];
            params.insert(name, Tensor::new(shape, values)?.with_grad());
        }
        if !data.is_empty() {
            return Err(fail("trailing bytes"));
        }
        let vocab = Vocabulary::from_entries(header.vocab.into_iter().enumerate().map(|(i, t)| (t, i as u32)))?;
        if vocab.len() != header.model.encoder.vocab_size {
            return Err(fail("vocabulary size does not match the encoder config"));
        }
        Ok(Checkpoint {
            model: header.model,
            vocab,
            params,
            meta: header.meta,
        })
    }

    /// Copies the tensors whose names start with `prefix` into `target`,
    /// checking shapes. Returns how many were copied.
    pub fn load_into(&self, target: &mut ParamSet<f32>, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, t) in self.params.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let dst = target.get_mut(name)?;
            if dst.shape() != t.shape() {
                return Err(Error::shape("checkpoint tensor", dst.shape(), t.shape()));
            }
            dst.data_mut().copy_from_slice(t.data());
            copied += 1;
        }
        Ok(copied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};
    use crate::encoder::EncoderConfig;
    use crate::matching::init_scorer;

    #[test]
    fn uniform_loss_is_log_b() {
        for b in [2usize, 8, 32] {
            let logits = vec![vec![0.25f32; b]; b];
            let l = cross_entropy_in_batch(&logits).unwrap();
            assert!((l - (b as f64).ln()).abs() < 1e-6);
        }
        let mut sharp = vec![vec![-30.0f64; 4]; 4];
        (0..4).for_each(|i| sharp[i][i] = 30.0);
        assert!(cross_entropy_in_batch(&sharp).unwrap() < 1e-9);
        assert!(cross_entropy_in_batch(&[vec![f64::NAN, 0.0], vec![0.0, 0.0]]).is_err());
        assert!(cross_entropy_in_batch(&[vec![0.0f64, 0.0]]).is_err());
    }

    #[test]
    fn adam_first_step_and_decay() {
        let mut p = ParamSet::<f32>::new();
        p.insert("w", Tensor::vector(vec![1.0]).with_grad());
        p.get_mut("w").unwrap().accumulate_grad(&[1.0]).unwrap();
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut p, |_| true).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 0.9).abs() < 1e-6);

        let mut p = ParamSet::<f32>::new();
        p.insert("w", Tensor::vector(vec![2.0, -1.0]).with_grad());
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut p, |_| true).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[2.0, -1.0]);

        let mut opt = AdamW::new(0.1, 0.5);
        opt.step(&mut p, |_| true).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[2.0 * 0.95, -0.95]);
    }

    #[test]
    fn in_batch_logits_compose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::<f64>::new();
        init_scorer(&mut p, BE_SCORER, 20, 8, &mut rng);
        let c = vec![vec![0.1, 0.2, -0.3, 0.4], vec![1.0, -1.0, 0.5, 0.0]];
        let r = vec![vec![0.3, 0.0, 0.1, -0.2], vec![-0.5, 0.5, 0.2, 0.9]];
        let l = in_batch_logits(&c, &r, &p, Comparison::Literal).unwrap();
        assert_eq!(l[0][1], biencoder_score(&c[0], &r[1], &p, Comparison::Literal).unwrap());
        assert!(in_batch_logits(&c[..1], &r[..1], &p, Comparison::Literal).is_err());

        let mut zero = p.clone();
        zero.iter_mut().for_each(|(_, t)| t.data_mut().fill(0.0));
        let l = in_batch_logits(&c, &r, &zero, Comparison::Literal).unwrap();
        assert!(l.iter().flatten().all(|v| *v == 0.0));
    }

    fn tiny() -> (ModelConfig, Vocabulary, Vec<Example>, Vec<EvalGroup>) {
        let data = synth_generate(&SynthConfig::new(10, 10, 80, 5)).unwrap();
        let vocab = build_vocabulary(&data.train);
        let model = ModelConfig::new(EncoderConfig::new(vocab.len(), 8, 8));
        let train = prepare_examples(&data.train, &vocab, 64);
        (model, vocab, train, data.dev)
    }

    fn quick(seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            phase1_lr: 1e-2,
            phase2_lr: 1e-2,
            max_epochs: 2,
            k: 3,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn phase1_is_deterministic_and_patience_zero_stops() {
        let (model, vocab, train, dev) = tiny();
        let tc = quick(9);
        let a = train_phase1(&model, model.init_params(1), &train, None, &tc).unwrap();
        let b = train_phase1(&model, model.init_params(1), &train, None, &tc).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params.flatten(), b.params.flatten());
        assert_eq!(a.history.len(), 2);

        let tc = TrainConfig { patience: 0, max_epochs: 5, ..tc };
        let d = Dev { vocab: &vocab, groups: &dev };
        let c = train_phase1(&model, model.init_params(1), &train, Some(d), &tc).unwrap();
        assert_eq!(c.history.len(), 1);
        assert!(c.best_dev_r1.is_some());
    }

    #[test]
    fn phase2_respects_frozen_encoder() {
        let (model, _, train, _) = tiny();
        let p1 = model.init_params(2);
        let before = training_stores(Ranker::new(model, p1.clone()).unwrap().encoder(), &train).unwrap();
        let out = train_phase2(&model, &p1, &train, None, &quick(4)).unwrap();
        assert_eq!(out.contexts.vectors(), before.0.vectors());
        assert_eq!(out.responses.vectors(), before.1.vectors());
        for (name, t) in out.train.params.iter() {
            if !name.starts_with(CE_PREFIX) {
                assert_eq!(t.data(), p1.get(name).unwrap().data(), "{name} changed");
            }
        }
        assert!(out.train.params.get("ce.scorer.w1").unwrap().data() != p1.get("ce.scorer.w1").unwrap().data());
    }

    #[test]
    fn checkpoint_round_trip() {
        let (model, vocab, _, _) = tiny();
        let ck = Checkpoint {
            model,
            vocab,
            params: model.init_params(3),
            meta: CheckpointMeta {
                phase: 1,
                seed: 3,
                train: Some(TrainConfig::default()),
                best_dev_r1: Some(0.5),
            },
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.params.flatten(), ck.params.flatten());
        assert_eq!(back.vocab, ck.vocab);
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.model, ck.model);

        let mut fresh = model.init_params(4);
        let n = back.load_into(&mut fresh, BE_PREFIX).unwrap();
        assert_eq!(n, 4);
        assert_eq!(fresh.get("be.scorer.w1").unwrap().data(), ck.params.get("be.scorer.w1").unwrap().data());

        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
