//! Dialogue datasets: file formats, validation and a synthetic generator.
//!
//! Train lines: `id<TAB>turn1 __eot__ turn2 ...<TAB>response<TAB>label`.
//! Eval lines: `group_id<TAB>context<TAB>cand1|cand2|...<TAB>positive_index`.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::EOT_TOKEN;
use crate::error::{Error, Result};

const TURN_SEPARATOR: &str = " __eot__ ";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogueSample {
    pub id: u64,
    pub context: Vec<String>,
    pub response: String,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalGroup {
    pub id: u64,
    pub context: Vec<String>,
    pub candidates: Vec<String>,
    pub positive_index: usize,
}

/// Context turns joined with the turn-separator token.
pub fn context_text(turns: &[String]) -> String {
    turns.join(TURN_SEPARATOR)
}

fn split_turns(field: &str) -> Vec<String> {
    field
        .split(EOT_TOKEN)
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn data_error(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

pub fn load_train(path: &Path) -> Result<Vec<DialogueSample>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        let ln = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(data_error(path, ln, format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        let id: u64 = fields[0]
            .trim()
            .parse()
            .map_err(|_| data_error(path, ln, format!("bad id {:?}", fields[0])))?;
        let context = split_turns(fields[1]);
        if context.is_empty() {
            return Err(data_error(path, ln, "empty context"));
        }
        let label = match fields[3].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(data_error(path, ln, format!("label must be 0 or 1, found {other:?}"))),
        };
        if !seen.insert(id) {
            return Err(data_error(path, ln, format!("duplicate id {id}")));
        }
        out.push(DialogueSample {
            id,
            context,
            response: fields[2].trim().to_string(),
            label,
        });
    }
    if out.is_empty() {
        warn!("{}: no training samples", path.display());
    }
    Ok(out)
}

pub fn write_train(path: &Path, samples: &[DialogueSample]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for s in samples {
        writeln!(w, "{}\t{}\t{}\t{}", s.id, context_text(&s.context), s.response, s.label)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct EvalFormat {
    /// Required candidates per group.
    pub group_size: usize,
    /// Accept groups with fewer candidates than `group_size`.
    pub allow_short: bool,
}

impl Default for EvalFormat {
    fn default() -> Self {
        EvalFormat {
            group_size: 10,
            allow_short: false,
        }
    }
}

/// Loads evaluation groups. The positive field may list several
/// comma-separated indices; anything but exactly one is rejected.
pub fn load_eval(path: &Path, format: EvalFormat) -> Result<Vec<EvalGroup>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        let ln = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(data_error(path, ln, format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        let id: u64 = fields[0]
            .trim()
            .parse()
            .map_err(|_| data_error(path, ln, format!("bad group id {:?}", fields[0])))?;
        let context = split_turns(fields[1]);
        if context.is_empty() {
            return Err(data_error(path, ln, "empty context"));
        }
        let candidates: Vec<String> = fields[2].split('|').map(|c| c.trim().to_string()).collect();
        let n_cand = candidates.len();
        if n_cand > format.group_size || (n_cand < format.group_size && !format.allow_short) || n_cand < 2 {
            return Err(data_error(
                path,
                ln,
                format!("group has {n_cand} candidates, expected {}", format.group_size),
            ));
        }
        let positives: Vec<usize> = fields[3]
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| data_error(path, ln, format!("bad positive index {:?}", fields[3])))?;
        if positives.len() != 1 {
            return Err(data_error(path, ln, format!("group needs exactly one positive, found {}", positives.len())));
        }
        if positives[0] >= n_cand {
            return Err(data_error(path, ln, format!("positive index {} out of range", positives[0])));
        }
        if !seen.insert(id) {
            return Err(data_error(path, ln, format!("duplicate group id {id}")));
        }
        out.push(EvalGroup {
            id,
            context,
            candidates,
            positive_index: positives[0],
        });
    }
    if out.is_empty() {
        warn!("{}: no evaluation groups", path.display());
    }
    Ok(out)
}

pub fn write_eval(path: &Path, groups: &[EvalGroup]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for g in groups {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            g.id,
            context_text(&g.context),
            g.candidates.join("|"),
            g.positive_index
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Generator settings for the topic-clustered corpus.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_topics: usize,
    pub contexts_per_topic: usize,
    pub vocab_size: usize,
    pub seed: u64,
    pub group_size: usize,
    /// Probability that a context token comes from the topic cluster.
    pub context_topic_rate: f64,
    /// Topic tokens per response, drawn uniformly from this inclusive range.
    pub response_topic_tokens: (usize, usize),
}

impl SynthConfig {
    pub fn new(num_topics: usize, contexts_per_topic: usize, vocab_size: usize, seed: u64) -> Self {
        SynthConfig {
            num_topics,
            contexts_per_topic,
            vocab_size,
            seed,
            group_size: 10,
            context_topic_rate: 0.6,
            response_topic_tokens: (1, 2),
        }
    }

    pub fn cluster_size(&self) -> usize {
        (self.vocab_size / 2 / self.num_topics).max(2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub train: Vec<DialogueSample>,
    pub dev: Vec<EvalGroup>,
    pub test: Vec<EvalGroup>,
    /// Topic of every train sample id, dev group id and test group id.
    pub topics: std::collections::BTreeMap<u64, usize>,
}

struct Dialogue {
    topic: usize,
    context: Vec<String>,
    response: String,
}

/// Deterministic topic-clustered corpus. Each topic owns a disjoint token
/// cluster; contexts mix topic and shared filler tokens, responses carry a
/// few topic tokens among shared ones, and distractors are true responses
/// of other topics.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthData> {
    if cfg.num_topics < 2 || cfg.contexts_per_topic < 3 || cfg.group_size < 2 {
        return Err(Error::Config("need ≥2 topics, ≥3 contexts per topic and groups of ≥2".into()));
    }
    if cfg.vocab_size <= cfg.num_topics * 4 {
        return Err(Error::Config(format!(
            "vocab_size {} must exceed 4 × num_topics ({})",
            cfg.vocab_size,
            cfg.num_topics * 4
        )));
    }
    if cfg.group_size > cfg.num_topics {
        return Err(Error::Config("group_size cannot exceed num_topics (distractors need distinct topics)".into()));
    }
    let cluster = cfg.cluster_size();
    let shared: Vec<String> = (cfg.num_topics * cluster..cfg.vocab_size).map(|i| format!("w{i}")).collect();
    let topic_tokens = |t: usize| -> Vec<String> { (t * cluster..(t + 1) * cluster).map(|i| format!("w{i}")).collect() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let (lo, hi) = cfg.response_topic_tokens;
    let mut dialogues: Vec<Vec<Dialogue>> = Vec::with_capacity(cfg.num_topics);
    for t in 0..cfg.num_topics {
        let own = topic_tokens(t);
        let mut list = Vec::with_capacity(cfg.contexts_per_topic);
        for _ in 0..cfg.contexts_per_topic {
            let turns = rng.gen_range(2..=4);
            let context = (0..turns)
                .map(|_| {
                    let len = rng.gen_range(3..=6);
                    (0..len)
                        .map(|_| {
                            if rng.gen_bool(cfg.context_topic_rate) {
                                own.choose(&mut rng).unwrap().clone()
                            } else {
                                shared.choose(&mut rng).unwrap().clone()
                            }
                        })
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect();
            let len = rng.gen_range(4..=7);
            let n_topic = rng.gen_range(lo..=hi.max(lo)).min(len);
            let mut words: Vec<String> = (0..len - n_topic).map(|_| shared.choose(&mut rng).unwrap().clone()).collect();
            for _ in 0..n_topic {
                let at = rng.gen_range(0..=words.len());
                words.insert(at, own.choose(&mut rng).unwrap().clone());
            }
            list.push(Dialogue {
                topic: t,
                context,
                response: words.join(" "),
            });
        }
        dialogues.push(list);
    }

    // per-topic split: 80% train, 10% dev, rest test (each at least one)
    let mut train_d = Vec::new();
    let mut dev_d = Vec::new();
    let mut test_d = Vec::new();
    for list in dialogues {
        let n = list.len();
        let n_dev = (n / 10).max(1);
        let n_test = (n / 10).max(1);
        let n_train = n - n_dev - n_test;
        for (i, d) in list.into_iter().enumerate() {
            if i < n_train {
                train_d.push(d);
            } else if i < n_train + n_dev {
                dev_d.push(d);
            } else {
                test_d.push(d);
            }
        }
    }

    let mut topics = std::collections::BTreeMap::new();
    let mut next_id = 0u64;
    let mut train = Vec::with_capacity(train_d.len() * 2);
    for d in &train_d {
        topics.insert(next_id, d.topic);
        train.push(DialogueSample {
            id: next_id,
            context: d.context.clone(),
            response: d.response.clone(),
            label: 1,
        });
        next_id += 1;
    }
    // one negative per positive, paired with another topic's response
    for d in &train_d {
        let other = loop {
            let o = &train_d[rng.gen_range(0..train_d.len())];
            if o.topic != d.topic {
                break o;
            }
        };
        topics.insert(next_id, d.topic);
        train.push(DialogueSample {
            id: next_id,
            context: d.context.clone(),
            response: other.response.clone(),
            label: 0,
        });
        next_id += 1;
    }

    let mut make_groups = |split: &[Dialogue], rng: &mut ChaCha8Rng| -> Vec<EvalGroup> {
        split
            .iter()
            .map(|d| {
                let mut used = HashSet::from([d.topic]);
                let mut candidates = Vec::with_capacity(cfg.group_size);
                while candidates.len() < cfg.group_size - 1 {
                    let o = &split[rng.gen_range(0..split.len())];
                    if used.insert(o.topic) {
                        candidates.push(o.response.clone());
                    }
                }
                let positive_index = rng.gen_range(0..cfg.group_size);
                candidates.insert(positive_index, d.response.clone());
                topics.insert(next_id, d.topic);
                let g = EvalGroup {
                    id: next_id,
                    context: d.context.clone(),
                    candidates,
                    positive_index,
                };
                next_id += 1;
                g
            })
            .collect()
    };
    let dev = make_groups(&dev_d, &mut rng);
    let test = make_groups(&test_d, &mut rng);
    Ok(SynthData { train, dev, test, topics })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn train_loader() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "t.tsv", "1\thi there __eot__ hello\tyo\t1\n2\tq\tr\t0\n");
        let s = load_train(&p).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].context, vec!["hi there", "hello"]);

        let p = write(dir.path(), "bad.tsv", "1\ta\tb\t1\n2\ta\tb\t2\n");
        let err = load_train(&p).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");

        let p = write(dir.path(), "empty.tsv", "");
        assert!(load_train(&p).unwrap().is_empty());

        let p = write(dir.path(), "dup.tsv", "1\ta\tb\t1\n1\ta\tb\t1\n");
        assert!(load_train(&p).is_err());
        let p = write(dir.path(), "short.tsv", "1\ta\tb\n");
        assert!(load_train(&p).is_err());
    }

    #[test]
    fn eval_loader() {
        let dir = tempfile::tempdir().unwrap();
        let ten = (0..10).map(|i| format!("c{i}")).collect::<Vec<_>>().join("|");
        let p = write(dir.path(), "e.tsv", &format!("5\tctx\t{ten}\t3\n"));
        let g = load_eval(&p, EvalFormat::default()).unwrap();
        assert_eq!(g[0].positive_index, 3);
        assert_eq!(g[0].candidates.len(), 10);

        let p = write(dir.path(), "two.tsv", &format!("5\tctx\t{ten}\t3,4\n"));
        assert!(load_eval(&p, EvalFormat::default()).is_err());

        let seven = (0..7).map(|i| format!("c{i}")).collect::<Vec<_>>().join("|");
        let p = write(dir.path(), "seven.tsv", &format!("5\tctx\t{seven}\t0\n"));
        assert!(load_eval(&p, EvalFormat::default()).is_err());
        let g = load_eval(
            &p,
            EvalFormat {
                allow_short: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(g[0].candidates.len(), 7);

        let p = write(dir.path(), "oob.tsv", &format!("5\tctx\t{ten}\t10\n"));
        assert!(load_eval(&p, EvalFormat::default()).is_err());
    }

    #[test]
    fn synth_is_deterministic_and_round_trips() {
        let cfg = SynthConfig::new(10, 20, 200, 7);
        let a = synth_generate(&cfg).unwrap();
        assert_eq!(a, synth_generate(&cfg).unwrap());
        assert_ne!(a, synth_generate(&SynthConfig { seed: 8, ..cfg }).unwrap());

        let dir = tempfile::tempdir().unwrap();
        let tp = dir.path().join("train.tsv");
        let ep = dir.path().join("test.tsv");
        write_train(&tp, &a.train).unwrap();
        write_eval(&ep, &a.test).unwrap();
        assert_eq!(load_train(&tp).unwrap(), a.train);
        assert_eq!(load_eval(&ep, EvalFormat::default()).unwrap(), a.test);

        let mut ids = HashSet::new();
        for id in a.train.iter().map(|s| s.id).chain(a.dev.iter().map(|g| g.id)).chain(a.test.iter().map(|g| g.id)) {
            assert!(ids.insert(id));
        }
    }

    #[test]
    fn synth_rejects_small_vocab() {
        assert!(synth_generate(&SynthConfig::new(20, 10, 80, 1)).is_err());
    }
}
