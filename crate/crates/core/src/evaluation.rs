//! Ranking metrics, paired significance tests, latency benchmarking and
//! report formatting.
//!
//! A latency sample is one live context scored against its full candidate
//! group: encode the context, fetch cached neighbors, run the head for every
//! candidate.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use log::warn;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{context_text, EvalGroup};
use crate::encoder::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Ranker, Stores};
use crate::store::{EmbeddingStore, StoreKind};

pub const DEFAULT_WARMUP: usize = 50;
pub const DEFAULT_REPEATS: usize = 500;
const MAX_GROUP: usize = 256;

/// Store id of candidate `index` of group `group_id`.
pub fn candidate_id(group_id: u64, index: usize) -> u64 {
    (group_id << 8) | index as u64
}

/// Candidate indices by descending score; ties keep ascending index.
pub fn rank_by_scores(scores: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// One-based rank of `positive` in `order`.
pub fn rank_of(order: &[usize], positive: usize) -> Option<usize> {
    order.iter().position(|&i| i == positive).map(|p| p + 1)
}

/// Fraction of queries whose positive ranks within the top `k` of `n`.
pub fn recall_at_k(ranks: &[usize], n: usize, k: usize) -> Result<f64> {
    if k == 0 || k > n {
        return Err(Error::Config(format!("recall cutoff {k} outside 1..={n}")));
    }
    if ranks.is_empty() {
        return Err(Error::Empty("recall_at_k"));
    }
    if let Some(r) = ranks.iter().find(|&&r| r == 0 || r > n) {
        return Err(Error::Config(format!("rank {r} outside 1..={n}")));
    }
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(hits as f64 / ranks.len() as f64)
}

pub fn mrr(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Empty("mrr"));
    }
    if ranks.contains(&0) {
        return Err(Error::Config("rank 0 is not valid".into()));
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

/// Two-tailed p-value of the paired t-test on `a - b`.
///
/// All-zero differences give 1.0. Constant nonzero differences have zero
/// variance; the statistic is unbounded and 0.0 is returned.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("paired_t_test", &[a.len()], &[b.len()]));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Config("paired t-test needs at least two pairs".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("paired t-test input".into()));
    }
    if diffs.iter().all(|&d| d == 0.0) {
        return Ok(1.0);
    }
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        warn!("paired t-test: zero-variance differences with mean {mean}; reporting p = 0");
        return Ok(0.0);
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::Config(e.to_string()))?;
    Ok((2.0 * dist.sf(t.abs())).min(1.0))
}

/// An evaluation group with tokenized context and store ids.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedGroup {
    pub id: u64,
    pub context: Vec<u32>,
    pub candidates: Vec<u64>,
    pub positive_index: usize,
}

/// Evaluation groups plus the stores that serve them. Candidate vectors are
/// encoded once, here.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub groups: Vec<PreparedGroup>,
    pub stores: Stores,
}

impl EvalSet {
    /// Encodes every candidate with the ranker's encoder and attaches the
    /// context store. A positive `cache_depth` precomputes neighbor lists.
    pub fn build(
        ranker: &Ranker,
        vocab: &Vocabulary,
        groups: &[EvalGroup],
        contexts: EmbeddingStore,
        cache_depth: usize,
    ) -> Result<Self> {
        let max_len = ranker.config().encoder.max_seq_len;
        let mut prepared = Vec::with_capacity(groups.len());
        let mut items = Vec::new();
        for g in groups {
            if g.candidates.len() > MAX_GROUP {
                return Err(Error::Config(format!("group {} has more than {MAX_GROUP} candidates", g.id)));
            }
            if g.id >= 1 << 56 {
                return Err(Error::Config(format!("group id {} too large", g.id)));
            }
            let mut ids = Vec::with_capacity(g.candidates.len());
            for (i, c) in g.candidates.iter().enumerate() {
                let id = candidate_id(g.id, i);
                items.push((id, vocab.tokenize(c, max_len)));
                ids.push(id);
            }
            prepared.push(PreparedGroup {
                id: g.id,
                context: vocab.tokenize(&context_text(&g.context), max_len),
                candidates: ids,
                positive_index: g.positive_index,
            });
        }
        let responses = EmbeddingStore::build(ranker.encoder(), StoreKind::Response, &items)?;
        let mut stores = Stores::new(contexts, responses)?;
        if cache_depth > 0 && !stores.contexts.is_empty() {
            stores = stores.with_neighbor_cache(cache_depth)?;
        }
        if !stores.contexts.is_empty() {
            ranker.prepare(&mut stores)?;
        }
        Ok(EvalSet { groups: prepared, stores })
    }

    pub fn max_group_size(&self) -> usize {
        self.groups.iter().map(|g| g.candidates.len()).max().unwrap_or(0)
    }
}

/// Candidate order for one group; every candidate must be in the stores.
pub fn rank_candidates(ranker: &Ranker, group: &PreparedGroup, stores: &Stores, k: usize) -> Result<Vec<usize>> {
    let scores = ranker.score_candidates(&group.context, &group.candidates, stores, k)?;
    Ok(rank_by_scores(&scores))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub repeats: usize,
}

impl LatencyStats {
    pub fn from_samples(samples_ms: &[f64]) -> Result<Self> {
        if samples_ms.is_empty() {
            return Err(Error::Empty("latency samples"));
        }
        let mut s = samples_ms.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 {
            s[n / 2]
        } else {
            (s[n / 2 - 1] + s[n / 2]) / 2.0
        };
        let p95 = s[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
        Ok(LatencyStats {
            mean_ms: s.iter().sum::<f64>() / n as f64,
            median_ms: median,
            p95_ms: p95,
            repeats: n,
        })
    }
}

/// Times the per-query path over `repeats` samples after `warmup`, cycling
/// through the groups. Stores must already be built.
pub fn latency_bench(ranker: &Ranker, set: &EvalSet, k: usize, warmup: usize, repeats: usize) -> Result<LatencyStats> {
    if set.groups.is_empty() {
        return Err(Error::Empty("latency_bench groups"));
    }
    if repeats == 0 {
        return Err(Error::Config("latency_bench needs at least one repeat".into()));
    }
    let mut groups = set.groups.iter().cycle();
    for _ in 0..warmup {
        let g = groups.next().expect("cycle");
        std::hint::black_box(rank_candidates(ranker, g, &set.stores, k)?);
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let g = groups.next().expect("cycle");
        let start = Instant::now();
        std::hint::black_box(rank_candidates(ranker, g, &set.stores, k)?);
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    LatencyStats::from_samples(&samples)
}

/// Per-group ranks and aggregate metrics for one model on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub k: usize,
    pub seed: u64,
    pub n: usize,
    pub group_ids: Vec<u64>,
    pub ranks: Vec<usize>,
    pub latency: Option<LatencyStats>,
}

impl EvalReport {
    pub fn recall(&self, k: usize) -> f64 {
        recall_at_k(&self.ranks, self.n, k.min(self.n)).unwrap_or(0.0)
    }

    pub fn mrr(&self) -> f64 {
        mrr(&self.ranks).unwrap_or(0.0)
    }

    /// 1.0 where the positive is within the top `k`.
    pub fn indicators(&self, k: usize) -> Vec<f64> {
        self.ranks.iter().map(|&r| if r <= k { 1.0 } else { 0.0 }).collect()
    }

    pub fn reciprocal_ranks(&self) -> Vec<f64> {
        self.ranks.iter().map(|&r| 1.0 / r as f64).collect()
    }

    /// Line-delimited report: a header, one line per group, a metrics line.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# model={} k={} seed={} groups={} n={} sample=one context against its full candidate group",
            self.model,
            self.k,
            self.seed,
            self.ranks.len(),
            self.n
        );
        for (id, r) in self.group_ids.iter().zip(&self.ranks) {
            let _ = writeln!(out, "group={id} rank={r}");
        }
        let _ = writeln!(
            out,
            "metrics r1={:.6} r2={:.6} r5={:.6} mrr={:.6}",
            self.recall(1),
            self.recall(2),
            self.recall(5),
            self.mrr()
        );
        if let Some(l) = &self.latency {
            let _ = writeln!(
                out,
                "latency mean_ms={:.6} median_ms={:.6} p95_ms={:.6} repeats={}",
                l.mean_ms, l.median_ms, l.p95_ms, l.repeats
            );
        }
        out
    }

    /// Machine-readable `key=value` summary.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "model={}", self.model);
        let _ = writeln!(out, "k={}", self.k);
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "groups={}", self.ranks.len());
        let _ = writeln!(out, "n={}", self.n);
        let _ = writeln!(out, "r10_at_1={:.6}", self.recall(1));
        let _ = writeln!(out, "r10_at_2={:.6}", self.recall(2));
        let _ = writeln!(out, "r10_at_5={:.6}", self.recall(5));
        let _ = writeln!(out, "mrr={:.6}", self.mrr());
        if let Some(l) = &self.latency {
            let _ = writeln!(out, "latency_mean_ms={:.6}", l.mean_ms);
            let _ = writeln!(out, "latency_median_ms={:.6}", l.median_ms);
            let _ = writeln!(out, "latency_p95_ms={:.6}", l.p95_ms);
        }
        out
    }

    /// Writes `<stem>.report` and `<stem>.summary` next to each other.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let report = dir.join(format!("{stem}.report"));
        let summary = dir.join(format!("{stem}.summary"));
        std::fs::write(&report, self.to_lines())?;
        std::fs::write(&summary, self.summary())?;
        Ok(vec![report, summary])
    }
}

/// Ranks every group. The encoder sees only the live contexts.
pub fn evaluate(ranker: &Ranker, set: &EvalSet, k: usize, model: &str, seed: u64) -> Result<EvalReport> {
    if set.groups.is_empty() {
        return Err(Error::Empty("evaluation groups"));
    }
    let mut ranks = Vec::with_capacity(set.groups.len());
    for g in &set.groups {
        let order = rank_candidates(ranker, g, &set.stores, k)?;
        ranks.push(rank_of(&order, g.positive_index).ok_or(Error::UnknownId(g.id))?);
    }
    Ok(EvalReport {
        model: model.to_string(),
        k,
        seed,
        n: set.max_group_size(),
        group_ids: set.groups.iter().map(|g| g.id).collect(),
        ranks,
        latency: None,
    })
}

pub const SIGNIFICANCE: f64 = 0.05;

fn marker(base: &[f64], other: &[f64]) -> &'static str {
    match paired_t_test(other, base) {
        Ok(p) if p < SIGNIFICANCE => "*",
        _ => " ",
    }
}

/// Text table with one row per report. A `*` marks metrics that differ from
/// the baseline row with p < 0.05 under a paired two-tailed t-test.
pub fn comparison_table(title: &str, rows: &[(String, &EvalReport)], baseline: usize) -> Result<String> {
    let base = rows
        .get(baseline)
        .ok_or_else(|| Error::Config(format!("baseline row {baseline} out of range")))?
        .1;
    let with_latency = rows.iter().any(|(_, r)| r.latency.is_some());
    let width = rows.iter().map(|(l, _)| l.chars().count()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let _ = write!(out, "{:<width$}  R10@1    R10@2    R10@5    MRR     ", "Model");
    if with_latency {
        let _ = write!(out, "  ms/sample");
    }
    out.push('\n');
    let base_ind: Vec<Vec<f64>> = [1, 2, 5].iter().map(|&k| base.indicators(k)).collect();
    let base_rr = base.reciprocal_ranks();
    for (i, (label, r)) in rows.iter().enumerate() {
        if r.ranks.len() != base.ranks.len() {
            return Err(Error::shape("comparison_table", &[base.ranks.len()], &[r.ranks.len()]));
        }
        let _ = write!(out, "{label:<width$}");
        for (j, &k) in [1, 2, 5].iter().enumerate() {
            let m = if i == baseline { " " } else { marker(&base_ind[j], &r.indicators(k)) };
            let _ = write!(out, "  {:6.2}{m}", 100.0 * r.recall(k));
        }
        let m = if i == baseline { " " } else { marker(&base_rr, &r.reciprocal_ranks()) };
        let _ = write!(out, "  {:6.2}{m}", 100.0 * r.mrr());
        if with_latency {
            match &r.latency {
                Some(l) => {
                    let _ = write!(out, "  {:9.3}", l.mean_ms);
                }
                None => out.push_str("          -"),
            }
        }
        out.push('\n');
    }
    Ok(out)
}

/// True when every report covers the same groups in the same order.
pub fn same_groups(reports: &[&EvalReport]) -> bool {
    reports.windows(2).all(|w| w[0].group_ids == w[1].group_ids)
}
