//! Command-line surface: data generation, training, store precomputation,
//! evaluation, benchmarking, k sweeps and ablations.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime failure.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use chrono::Utc;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{self, EvalFormat, SynthConfig};
use crate::encoder::{EncoderConfig, SentenceEncoder};
use crate::enrichment::HeadOptions;
use crate::error::Error;
use crate::evaluation::{self, comparison_table, evaluate, latency_bench, EvalReport, EvalSet};
use crate::matching::Comparison;
use crate::model::{ModelConfig, Ranker};
use crate::store::{EmbeddingStore, StoreKind};
use crate::training::{
    build_vocabulary, prepare_examples, train_phase1, train_phase2, training_stores, Checkpoint, CheckpointMeta, Dev,
    EpochLog, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(name = "cerank", version, about = "Context-enriched Bi-Encoder response ranking")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic topic-clustered corpus.
    Synth(SynthArgs),
    /// Train the Bi-Encoder (phase 1) and the enrichment head (phase 2).
    Train(TrainArgs),
    /// Encode training contexts and responses into stores.
    Precompute(PrecomputeArgs),
    /// Rank evaluation groups and write a report.
    Eval(EvalArgs),
    /// Time per-query inference for the Bi-Encoder and the enriched model.
    Bench(BenchArgs),
    /// Evaluate one checkpoint over several neighbor counts.
    SweepK(SweepArgs),
    /// Train and compare ablated variants.
    Ablate(AblateArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub topics: usize,
    #[arg(long, default_value_t = 50)]
    pub contexts_per_topic: usize,
    #[arg(long, default_value_t = 400)]
    pub vocab: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct ModelArgs {
    /// Sentence vector size d (even).
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 32)]
    pub embedding_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub max_seq_len: usize,
    /// Comparison function: literal, canonical or concat.
    #[arg(long, default_value_t = Comparison::Literal)]
    pub variant: Comparison,
    /// Replace attention with the mean of the GRU states.
    #[arg(long)]
    pub no_attention: bool,
    /// Use the enriched context directly instead of the gate.
    #[arg(long)]
    pub no_gate: bool,
}

impl ModelArgs {
    fn head(&self) -> HeadOptions {
        HeadOptions {
            attention: !self.no_attention,
            gate: !self.no_gate,
        }
    }

    fn config(&self, vocab_size: usize) -> ModelConfig {
        let mut enc = EncoderConfig::new(vocab_size, self.embedding_dim, self.dim);
        enc.max_seq_len = self.max_seq_len;
        let mut m = ModelConfig::new(enc);
        m.comparison = self.variant;
        m.head = self.head();
        m
    }
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct TrainFlags {
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 5e-5)]
    pub lr1: f32,
    #[arg(long, default_value_t = 1e-4)]
    pub lr2: f32,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f32,
    #[arg(long, default_value_t = 20)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 3)]
    pub patience: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep the encoder fixed in phase 2.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub freeze_encoder: bool,
    /// Exclude a training response's own context from its neighbors.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub exclude_self: bool,
    /// Neighbor contexts per candidate response.
    #[arg(long, default_value_t = 20)]
    pub k: usize,
}

impl TrainFlags {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            phase1_lr: self.lr1,
            phase2_lr: self.lr2,
            weight_decay: self.weight_decay,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
            freeze_encoder_phase2: self.freeze_encoder,
            k: self.k,
            exclude_self: self.exclude_self,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
pub enum Phase {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Phase::Both)]
    pub phase: Phase,
    /// Phase-1 checkpoint to start phase 2 from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub allow_short: bool,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args, Serialize)]
pub struct PrecomputeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct EvalInputs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluation groups file.
    #[arg(long)]
    pub data: PathBuf,
    /// Context store from `precompute`; required when k > 0.
    #[arg(long)]
    pub contexts: Option<PathBuf>,
    #[arg(long)]
    pub allow_short: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub inputs: EvalInputs,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    /// Report name; defaults to the checkpoint file stem.
    #[arg(long)]
    pub name: Option<String>,
    /// Also measure latency.
    #[arg(long)]
    pub latency: bool,
    #[arg(long, default_value_t = evaluation::DEFAULT_WARMUP)]
    pub warmup: usize,
    #[arg(long, default_value_t = evaluation::DEFAULT_REPEATS)]
    pub repeats: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    #[command(flatten)]
    pub inputs: EvalInputs,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    #[arg(long, default_value_t = evaluation::DEFAULT_WARMUP)]
    pub warmup: usize,
    #[arg(long, default_value_t = evaluation::DEFAULT_REPEATS)]
    pub repeats: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub inputs: EvalInputs,
    #[arg(long, value_delimiter = ',', default_values_t = [0usize, 2, 5, 10, 15, 20, 25])]
    pub ks: Vec<usize>,
    /// Phase-1 checkpoint evaluated as an extra Bi-Encoder row.
    #[arg(long)]
    pub biencoder: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    /// Groups the variants are compared on.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Reuse this phase-1 checkpoint instead of training one.
    #[arg(long)]
    pub phase1: Option<PathBuf>,
    #[arg(long)]
    pub allow_short: bool,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Serialize)]
struct Artifact {
    path: PathBuf,
    sha256: String,
}

/// One line of `manifest.jsonl`, appended per command run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    command: String,
    config: serde_json::Value,
    seeds: Vec<u64>,
    inputs: Vec<Artifact>,
    outputs: Vec<Artifact>,
    started_at: String,
    finished_at: String,
    version: &'static str,
}

fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn artifacts(paths: &[PathBuf]) -> anyhow::Result<Vec<Artifact>> {
    paths
        .iter()
        .map(|p| {
            Ok(Artifact {
                path: p.clone(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

struct Run {
    command: &'static str,
    config: serde_json::Value,
    seeds: Vec<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    started_at: String,
}

impl Run {
    fn start(command: &'static str, args: &impl Serialize, seeds: Vec<u64>) -> anyhow::Result<Self> {
        Ok(Run {
            command,
            config: serde_json::to_value(args)?,
            seeds,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_at: Utc::now().to_rfc3339(),
        })
    }

    fn input(&mut self, path: &Path) -> Result<(), Error> {
        if !path.is_file() {
            return Err(Error::Config(format!("input file {} does not exist", path.display())));
        }
        self.inputs.push(path.to_path_buf());
        Ok(())
    }

    fn output(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    fn write_text(&mut self, path: PathBuf, text: &str) -> anyhow::Result<()> {
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        self.output(path);
        Ok(())
    }

    /// Appends the manifest line to `dir/manifest.jsonl`.
    fn finish(self, dir: &Path) -> anyhow::Result<()> {
        let m = RunManifest {
            command: self.command.to_string(),
            config: self.config,
            seeds: self.seeds,
            inputs: artifacts(&self.inputs)?,
            outputs: artifacts(&self.outputs)?,
            started_at: self.started_at,
            finished_at: Utc::now().to_rfc3339(),
            version: env!("CARGO_PKG_VERSION"),
        };
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join("manifest.jsonl"))?;
        writeln!(f, "{}", serde_json::to_string(&m)?)?;
        Ok(())
    }
}

fn out_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn eval_format(allow_short: bool) -> EvalFormat {
    EvalFormat {
        allow_short,
        ..Default::default()
    }
}

pub fn cmd_synth(args: &SynthArgs) -> anyhow::Result<()> {
    let mut run = Run::start("synth", args, vec![args.seed])?;
    let cfg = SynthConfig::new(args.topics, args.contexts_per_topic, args.vocab, args.seed);
    let d = data::synth_generate(&cfg)?;
    out_dir(&args.out)?;
    let (train, dev, test) = (args.out.join("train.tsv"), args.out.join("dev.tsv"), args.out.join("test.tsv"));
    data::write_train(&train, &d.train)?;
    data::write_eval(&dev, &d.dev)?;
    data::write_eval(&test, &d.test)?;
    println!(
        "wrote {} training samples, {} dev groups, {} test groups to {}",
        d.train.len(),
        d.dev.len(),
        d.test.len(),
        args.out.display()
    );
    run.output(train);
    run.output(dev);
    run.output(test);
    run.finish(&args.out)
}

fn write_log(run: &mut Run, path: PathBuf, phase1: &[EpochLog], phase2: &[EpochLog]) -> anyhow::Result<()> {
    let json = serde_json::json!({ "phase1": phase1, "phase2": phase2 });
    run.write_text(path, &serde_json::to_string_pretty(&json)?)
}

pub fn cmd_train(args: &TrainArgs) -> anyhow::Result<()> {
    let mut run = Run::start("train", args, vec![args.flags.seed])?;
    run.input(&args.train)?;
    if let Some(d) = &args.dev {
        run.input(d)?;
    }
    let tc = args.flags.config();
    tc.validate()?;
    if args.phase == Phase::Two && args.init.is_none() {
        return Err(Error::Config("--phase 2 needs a phase-1 checkpoint via --init".into()).into());
    }
    let samples = data::load_train(&args.train)?;
    let dev_groups = match &args.dev {
        Some(p) => data::load_eval(p, eval_format(args.allow_short))?,
        None => Vec::new(),
    };
    out_dir(&args.out)?;

    let (model, vocab, phase1_params, log1) = match &args.init {
        Some(p) => {
            run.input(p)?;
            let ck = Checkpoint::load(p)?;
            let mut model = ck.model;
            model.head = args.model.head();
            (model, ck.vocab, ck.params, Vec::new())
        }
        None => {
            let vocab = build_vocabulary(&samples);
            let model = args.model.config(vocab.len());
            model.validate()?;
            let examples = prepare_examples(&samples, &vocab, model.encoder.max_seq_len);
            let dev = Dev {
                vocab: &vocab,
                groups: &dev_groups,
            };
            let out = train_phase1(&model, model.init_params(tc.seed), &examples, Some(dev), &tc)?;
            let path = args.out.join("phase1.ckpt");
            Checkpoint {
                model,
                vocab: vocab.clone(),
                params: out.params.clone(),
                meta: CheckpointMeta {
                    phase: 1,
                    seed: tc.seed,
                    train: Some(tc),
                    best_dev_r1: out.best_dev_r1,
                },
            }
            .save(&path)?;
            println!("phase 1: best epoch {} dev R10@1 {:?} -> {}", out.best_epoch, out.best_dev_r1, path.display());
            run.output(path);
            (model, vocab, out.params, out.history)
        }
    };
    let vocab_path = args.out.join("vocab.txt");
    vocab.save(&vocab_path)?;
    run.output(vocab_path);

    let mut log2 = Vec::new();
    if args.phase != Phase::One {
        let examples = prepare_examples(&samples, &vocab, model.encoder.max_seq_len);
        let dev = Dev {
            vocab: &vocab,
            groups: &dev_groups,
        };
        let out = train_phase2(&model, &phase1_params, &examples, Some(dev), &tc)?;
        let path = args.out.join("phase2.ckpt");
        Checkpoint {
            model,
            vocab: vocab.clone(),
            params: out.train.params.clone(),
            meta: CheckpointMeta {
                phase: 2,
                seed: tc.seed,
                train: Some(tc),
                best_dev_r1: out.train.best_dev_r1,
            },
        }
        .save(&path)?;
        println!(
            "phase 2: best epoch {} dev R10@1 {:?} -> {}",
            out.train.best_epoch,
            out.train.best_dev_r1,
            path.display()
        );
        run.output(path);
        log2 = out.train.history;
    }
    write_log(&mut run, args.out.join("train_log.json"), &log1, &log2)?;
    run.finish(&args.out)
}

pub fn cmd_precompute(args: &PrecomputeArgs) -> anyhow::Result<()> {
    let mut run = Run::start("precompute", args, Vec::new())?;
    run.input(&args.checkpoint)?;
    run.input(&args.train)?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let ranker = Ranker::new(ck.model, ck.params)?;
    let samples = data::load_train(&args.train)?;
    let examples = prepare_examples(&samples, &ck.vocab, ck.model.encoder.max_seq_len);
    let (contexts, responses) = training_stores(ranker.encoder(), &examples)?;
    out_dir(&args.out)?;
    let (cp, rp) = (args.out.join("contexts.store"), args.out.join("responses.store"));
    contexts.save(&cp)?;
    responses.save(&rp)?;
    println!(
        "encoded {} contexts and {} responses (d={}, {} encoder calls)",
        contexts.len(),
        responses.len(),
        contexts.dim(),
        ranker.encoder().encode_calls()
    );
    run.output(cp);
    run.output(rp);
    run.finish(&args.out)
}

struct Loaded {
    checkpoint: Checkpoint,
    ranker: Ranker,
    set: EvalSet,
}

fn load_eval_inputs(run: &mut Run, inputs: &EvalInputs, max_k: usize) -> anyhow::Result<Loaded> {
    run.input(&inputs.checkpoint)?;
    run.input(&inputs.data)?;
    let ck = Checkpoint::load(&inputs.checkpoint)?;
    let ranker = Ranker::new(ck.model, ck.params.clone())?;
    let d = ck.model.dim();
    let contexts = match &inputs.contexts {
        Some(p) => {
            run.input(p)?;
            let s = EmbeddingStore::load(p, Some(d))?;
            if s.kind() != StoreKind::Context {
                return Err(Error::Config(format!("{} is not a context store", p.display())).into());
            }
            s
        }
        None if max_k > 0 => {
            return Err(Error::Config("k > 0 needs a context store; pass --contexts or use --k 0".into()).into())
        }
        None => EmbeddingStore::from_vectors(StoreKind::Context, d, Vec::new())?,
    };
    let groups = data::load_eval(&inputs.data, eval_format(inputs.allow_short))?;
    if groups.is_empty() {
        return Err(Error::Config(format!("{} holds no evaluation groups", inputs.data.display())).into());
    }
    let set = EvalSet::build(&ranker, &ck.vocab, &groups, contexts, max_k)?;
    Ok(Loaded {
        checkpoint: ck,
        ranker,
        set,
    })
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

pub fn cmd_eval(args: &EvalArgs) -> anyhow::Result<()> {
    let mut run = Run::start("eval", args, Vec::new())?;
    let l = load_eval_inputs(&mut run, &args.inputs, args.k)?;
    run.seeds.push(l.checkpoint.meta.seed);
    let name = args.name.clone().unwrap_or_else(|| stem(&args.inputs.checkpoint));
    let mut report = evaluate(&l.ranker, &l.set, args.k, &name, l.checkpoint.meta.seed)?;
    if args.latency {
        report.latency = Some(latency_bench(&l.ranker, &l.set, args.k, args.warmup, args.repeats)?);
    }
    out_dir(&args.inputs.out)?;
    for p in report.write(&args.inputs.out, &name)? {
        run.output(p);
    }
    print!("{}", report.summary());
    run.finish(&args.inputs.out)
}

pub fn cmd_bench(args: &BenchArgs) -> anyhow::Result<()> {
    let mut run = Run::start("bench", args, Vec::new())?;
    let l = load_eval_inputs(&mut run, &args.inputs, args.k)?;
    let before = l.ranker.encoder().encode_calls();
    let be = latency_bench(&l.ranker, &l.set, 0, args.warmup, args.repeats)?;
    let ce = latency_bench(&l.ranker, &l.set, args.k, args.warmup, args.repeats)?;
    let calls = l.ranker.encoder().encode_calls() - before;
    let queries = 2 * (args.warmup + args.repeats) as u64;
    let text = format!(
        "sample=one context against its full candidate group\n\
         groups={}\nk={}\nwarmup={}\nrepeats={}\n\
         biencoder_mean_ms={:.6}\nbiencoder_median_ms={:.6}\nbiencoder_p95_ms={:.6}\n\
         enriched_mean_ms={:.6}\nenriched_median_ms={:.6}\nenriched_p95_ms={:.6}\n\
         ratio_mean={:.4}\nratio_median={:.4}\nencode_calls={calls}\nqueries={queries}\n",
        l.set.groups.len(),
        args.k,
        args.warmup,
        args.repeats,
        be.mean_ms,
        be.median_ms,
        be.p95_ms,
        ce.mean_ms,
        ce.median_ms,
        ce.p95_ms,
        ce.mean_ms / be.mean_ms,
        ce.median_ms / be.median_ms,
    );
    out_dir(&args.inputs.out)?;
    run.write_text(args.inputs.out.join("bench.summary"), &text)?;
    print!("{text}");
    run.finish(&args.inputs.out)
}

pub fn cmd_sweep_k(args: &SweepArgs) -> anyhow::Result<()> {
    if args.ks.is_empty() {
        return Err(Error::Config("--ks needs at least one value".into()).into());
    }
    let mut run = Run::start("sweep-k", args, Vec::new())?;
    let max_k = args.ks.iter().copied().max().unwrap_or(0);
    let l = load_eval_inputs(&mut run, &args.inputs, max_k)?;
    run.seeds.push(l.checkpoint.meta.seed);
    out_dir(&args.inputs.out)?;
    let mut reports = Vec::new();
    if let Some(p) = &args.biencoder {
        run.input(p)?;
        let ck = Checkpoint::load(p)?;
        let ranker = Ranker::new(ck.model, ck.params)?;
        let groups = data::load_eval(&args.inputs.data, eval_format(args.inputs.allow_short))?;
        let contexts = EmbeddingStore::from_vectors(StoreKind::Context, ck.model.dim(), Vec::new())?;
        let set = EvalSet::build(&ranker, &ck.vocab, &groups, contexts, 0)?;
        reports.push(("Bi-Encoder".to_string(), evaluate(&ranker, &set, 0, "biencoder", ck.meta.seed)?));
    }
    for &k in &args.ks {
        let name = format!("k{k}");
        let r = evaluate(&l.ranker, &l.set, k, &name, l.checkpoint.meta.seed)?;
        reports.push((format!("k={k}"), r));
    }
    for (_, r) in &reports {
        for p in r.write(&args.inputs.out, &r.model)? {
            run.output(p);
        }
    }
    let rows: Vec<(String, &EvalReport)> = reports.iter().map(|(l, r)| (l.clone(), r)).collect();
    let table = comparison_table("Neighbor count sweep (* p<0.05 vs first row)", &rows, 0)?;
    run.write_text(args.inputs.out.join("sweep.table"), &table)?;
    print!("{table}");
    run.finish(&args.inputs.out)
}

pub fn cmd_ablate(args: &AblateArgs) -> anyhow::Result<()> {
    let mut run = Run::start("ablate", args, vec![args.flags.seed])?;
    run.input(&args.train)?;
    run.input(&args.dev)?;
    run.input(&args.data)?;
    let tc = args.flags.config();
    tc.validate()?;
    let fmt = eval_format(args.allow_short);
    let samples = data::load_train(&args.train)?;
    let dev_groups = data::load_eval(&args.dev, fmt)?;
    let groups = data::load_eval(&args.data, fmt)?;
    out_dir(&args.out)?;

    let train_be = |model: ModelConfig, vocab: &crate::encoder::Vocabulary| -> anyhow::Result<crate::params::ParamSet> {
        let examples = prepare_examples(&samples, vocab, model.encoder.max_seq_len);
        let dev = Dev {
            vocab,
            groups: &dev_groups,
        };
        Ok(train_phase1(&model, model.init_params(tc.seed), &examples, Some(dev), &tc)?.params)
    };
    let (base, vocab, phase1) = match &args.phase1 {
        Some(p) => {
            run.input(p)?;
            let ck = Checkpoint::load(p)?;
            (ck.model, ck.vocab, ck.params)
        }
        None => {
            let vocab = build_vocabulary(&samples);
            let model = args.model.config(vocab.len());
            let params = train_be(model, &vocab)?;
            (model, vocab, params)
        }
    };
    let examples = prepare_examples(&samples, &vocab, base.encoder.max_seq_len);
    let empty = EmbeddingStore::from_vectors(StoreKind::Context, base.dim(), Vec::new())?;

    let eval_params = |model: ModelConfig, params: crate::params::ParamSet, contexts: EmbeddingStore, k: usize, name: &str| {
        let ranker = Ranker::new(model, params)?;
        let set = EvalSet::build(&ranker, &vocab, &groups, contexts, k)?;
        evaluate(&ranker, &set, k, name, tc.seed)
    };

    let mut ce_rows = Vec::new();
    for (label, attention, gate) in [("full", true, true), ("-Attention", false, true), ("-Gate", true, false)] {
        let mut model = base;
        model.head = HeadOptions { attention, gate };
        let dev = Dev {
            vocab: &vocab,
            groups: &dev_groups,
        };
        let out = train_phase2(&model, &phase1, &examples, Some(dev), &tc)?;
        let name = format!("ce{}", label.to_lowercase());
        let report = eval_params(model, out.train.params, out.contexts, tc.k, &name)?;
        ce_rows.push((label.to_string(), report));
    }

    let mut be_rows = vec![("full".to_string(), eval_params(base, phase1.clone(), empty.clone(), 0, "be-full")?)];
    let mut concat = base;
    concat.comparison = Comparison::Concat;
    let concat_params = train_be(concat, &vocab)?;
    be_rows.push(("-SubMult".to_string(), eval_params(concat, concat_params, empty, 0, "be-submult")?));

    let mut text = String::new();
    for (title, rows) in [
        ("Bi-Encoder+CE ablations (* p<0.05 vs full)", &ce_rows),
        ("Bi-Encoder ablations (* p<0.05 vs full)", &be_rows),
    ] {
        let refs: Vec<(String, &EvalReport)> = rows.iter().map(|(l, r)| (l.clone(), r)).collect();
        text.push_str(&comparison_table(title, &refs, 0)?);
        text.push('\n');
        for (_, r) in rows.iter() {
            for p in r.write(&args.out, &r.model)? {
                run.output(p);
            }
        }
    }
    run.write_text(args.out.join("ablation.table"), &text)?;
    print!("{text}");
    run.finish(&args.out)
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Precompute(a) => cmd_precompute(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::SweepK(a) => cmd_sweep_k(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

/// 1 for bad inputs or configuration, 2 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(
            Error::Config(_)
            | Error::Data { .. }
            | Error::Format(_)
            | Error::Shape { .. }
            | Error::DuplicateId(_)
            | Error::UnknownId(_)
            | Error::Empty(_),
        ) => 1,
        _ => 2,
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
