//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every criterion reports even when an
//! earlier one fails. Exits non-zero when any criterion fails.

mod common;

use std::collections::{BTreeMap, HashSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use cerank::data::{synth_generate, SynthConfig, SynthData};
use cerank::encoder::{EncoderConfig, SentenceEncoder, Vocabulary};
use cerank::evaluation::{latency_bench, mrr, paired_t_test, recall_at_k, EvalSet, DEFAULT_REPEATS, DEFAULT_WARMUP};
use cerank::model::{ModelConfig, Ranker, Stores};
use cerank::store::{EmbeddingStore, StoreKind};
use cerank::training::{
    build_vocabulary, cross_entropy_in_batch, prepare_examples, train_phase1, train_phase2, training_stores, Dev,
    Example, TrainConfig,
};
use common::{brute_force_top_k, compare_gradients, t_test_oracle, GradFixture, SIGNIFICANT};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Central-difference step. Large enough to keep f64 rounding noise near
/// 1e-11, small enough not to straddle ReLU kinks at the fixture points.
const GRAD_EPS: f64 = 1e-5;

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let (mut sig_rel, mut vec_rel, mut all_rel) = (0.0f64, 0.0f64, 0.0f64);
    let (mut coords, mut significant) = (0, usize::MAX);
    for seed in 0..20 {
        let f = GradFixture::new(seed, 4);
        let r = compare_gradients(&f.analytic(), &f.numeric(GRAD_EPS));
        sig_rel = sig_rel.max(r.max_rel_significant);
        vec_rel = vec_rel.max(r.vector_rel);
        all_rel = all_rel.max(r.max_rel);
        coords = r.coordinates;
        significant = significant.min(r.significant);
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        sig_rel < 1e-4 && vec_rel < 1e-4 && secs < 60.0,
        format!(
            "20 fixtures x {coords} parameters, eps {GRAD_EPS:e}: vector rel err {vec_rel:.2e}, per-coordinate rel err {sig_rel:.2e} over entries >= {SIGNIFICANT:e} x max (at least {significant} per fixture), unfiltered {all_rel:.2e}; {secs:.1}s"
        ),
    )
}

fn random_pair_model(seed: u64) -> (Ranker, Stores, Vec<Vec<u32>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig::new(EncoderConfig::new(50, 16, 16));
    let ranker = Ranker::new(cfg, cfg.init_params(seed)).unwrap();
    let seq = |rng: &mut ChaCha8Rng| -> Vec<u32> {
        let n = rng.gen_range(1..12);
        std::iter::once(2).chain((0..n).map(|_| rng.gen_range(3..50))).collect()
    };
    let ctx: Vec<(u64, Vec<u32>)> = (0..60).map(|i| (i, seq(&mut rng))).collect();
    let rsp: Vec<(u64, Vec<u32>)> = (0..100).map(|i| (1000 + i, seq(&mut rng))).collect();
    let contexts = EmbeddingStore::build(ranker.encoder(), StoreKind::Context, &ctx).unwrap();
    let responses = EmbeddingStore::build(ranker.encoder(), StoreKind::Response, &rsp).unwrap();
    let live = (0..100).map(|_| seq(&mut rng)).collect();
    (ranker, Stores::new(contexts, responses).unwrap(), live)
}

fn reduction_identity() -> Outcome {
    let (ranker, stores, live) = random_pair_model(7);
    let none = HashSet::new();
    let mut equal = 0;
    for (i, ctx) in live.iter().enumerate() {
        let rid = 1000 + i as u64;
        let (s, trace) = ranker.forward(ctx, rid, &stores, 0, &none).unwrap();
        let c = ranker.encoder().encode(ctx).unwrap();
        let be = ranker.biencoder_score(&c, stores.responses.get(rid).unwrap()).unwrap();
        if s.to_bits() == be.to_bits() && trace.neighbors_used() == 0 {
            equal += 1;
        }
    }
    check(equal == 100, format!("{equal}/100 pairs bit-identical to the Bi-Encoder score at k=0"))
}

fn retrieval_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut mismatches = 0;
    let mut queries = 0;
    for _ in 0..50 {
        let n = rng.gen_range(1..=1000);
        let d = rng.gen_range(1..=64);
        let mut rows: Vec<Vec<f32>> = Vec::with_capacity(n);
        for i in 0..n {
            // about a fifth of the rows copy or rescale an earlier row to force ties
            let row = if i > 0 && rng.gen_bool(0.2) {
                let src = rows[rng.gen_range(0..i)].clone();
                let s = [1.0f32, 2.0, 0.5][rng.gen_range(0..3)];
                src.iter().map(|v| v * s).collect()
            } else {
                let mut v: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                v[0] += 1e-3;
                v
            };
            rows.push(row);
        }
        let mut ids: Vec<u64> = (0..n as u64).map(|i| i * 7 + 3).collect();
        ids.reverse();
        let store = EmbeddingStore::from_vectors(
            StoreKind::Context,
            d,
            ids.iter().copied().zip(rows.iter().cloned()).collect(),
        )
        .unwrap();
        for _ in 0..4 {
            let query = if rng.gen_bool(0.5) {
                rows[rng.gen_range(0..n)].clone()
            } else {
                (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
            };
            if query.iter().all(|v| *v == 0.0) {
                continue;
            }
            let k = rng.gen_range(0..=n.min(40));
            let exclude: HashSet<u64> = ids.iter().copied().filter(|_| rng.gen_bool(0.05)).collect();
            let got: Vec<(u64, f32)> = store
                .top_k(&query, k, &exclude)
                .unwrap()
                .iter()
                .map(|h| (h.id, h.similarity))
                .collect();
            let want = brute_force_top_k(&ids, &rows, &query, k, &exclude);
            queries += 1;
            let same = got.len() == want.len()
                && got
                    .iter()
                    .zip(&want)
                    .all(|(g, w)| g.0 == w.0 && (g.1 as f64 - w.1).abs() < 1e-6);
            if !same {
                mismatches += 1;
            }
        }
    }
    check(
        mismatches == 0,
        format!("50 stores, {queries} queries, {mismatches} differ from the full-scan ranking"),
    )
}

fn cache_fidelity() -> Outcome {
    let (ranker, stores, _) = random_pair_model(11);
    let dir = tempfile::tempdir().unwrap();
    let mut problems = Vec::new();
    for (name, store) in [("contexts", &stores.contexts), ("responses", &stores.responses)] {
        let path = dir.path().join(format!("{name}.store"));
        store.save(&path).unwrap();
        let back = EmbeddingStore::load(&path, Some(store.dim())).unwrap();
        let bits = |s: &EmbeddingStore| -> Vec<u32> { s.vectors().iter().map(|v| v.to_bits()).collect() };
        let norm_bits = |s: &EmbeddingStore| -> Vec<u32> { s.norms().iter().map(|v| v.to_bits()).collect() };
        if back.ids() != store.ids() || bits(&back) != bits(store) || norm_bits(&back) != norm_bits(store) {
            problems.push(format!("{name} round trip differs"));
        }
        let again = dir.path().join(format!("{name}.again"));
        back.save(&again).unwrap();
        if std::fs::read(&path).unwrap() != std::fs::read(&again).unwrap() {
            problems.push(format!("{name} re-save bytes differ"));
        }
    }
    // the random_pair_model stores were built from these sequences with the same seed
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let seq = |rng: &mut ChaCha8Rng| -> Vec<u32> {
        let n = rng.gen_range(1..12);
        std::iter::once(2).chain((0..n).map(|_| rng.gen_range(3..50))).collect()
    };
    let ctx: Vec<Vec<u32>> = (0..60).map(|_| seq(&mut rng)).collect();
    let mut fresh_equal = 0;
    for (i, ids) in ctx.iter().enumerate() {
        let fresh = ranker.encoder().encode(ids).unwrap();
        let stored = stores.contexts.get(i as u64).unwrap();
        if fresh.iter().zip(stored).all(|(a, b)| a.to_bits() == b.to_bits()) {
            fresh_equal += 1;
        }
    }
    if fresh_equal != ctx.len() {
        problems.push(format!("{}/{} stored rows equal a fresh encode", fresh_equal, ctx.len()));
    }
    check(
        problems.is_empty(),
        if problems.is_empty() {
            format!("save/load bit-exact for both stores; {fresh_equal}/60 rows equal fresh encodes")
        } else {
            problems.join("; ")
        },
    )
}

/// The desk-scale experiment setup: 20 topics x 50 contexts, vocab 400, d=32.
struct Desk {
    data: SynthData,
    vocab: Vocabulary,
    model: ModelConfig,
    train: Vec<Example>,
}

fn desk() -> Desk {
    let data = synth_generate(&SynthConfig::new(20, 50, 400, 0)).unwrap();
    let vocab = build_vocabulary(&data.train);
    let model = ModelConfig::new(EncoderConfig::new(vocab.len(), 32, 32));
    let train = prepare_examples(&data.train, &vocab, model.encoder.max_seq_len);
    Desk {
        data,
        vocab,
        model,
        train,
    }
}

const DESK_LR1: f32 = 3e-3;
const DESK_LR2: f32 = 1e-3;

fn ce_benefit() -> Outcome {
    let start = Instant::now();
    let desk = desk();
    let dev = Dev {
        vocab: &desk.vocab,
        groups: &desk.data.dev,
    };
    let mut rows: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for seed in 0..3 {
        let tc = TrainConfig {
            phase1_lr: DESK_LR1,
            phase2_lr: DESK_LR2,
            max_epochs: 60,
            seed,
            ..Default::default()
        };
        let p1 = train_phase1(&desk.model, desk.model.init_params(seed), &desk.train, Some(dev), &tc).unwrap();
        rows.entry("be").or_default().push(p1.best_dev_r1.unwrap());
        for (name, gate) in [("ce", true), ("nogate", false)] {
            let mut m = desk.model;
            m.head.gate = gate;
            let p2 = train_phase2(&m, &p1.params, &desk.train, Some(dev), &tc).unwrap();
            rows.entry(name).or_default().push(p2.train.best_dev_r1.unwrap());
        }
    }
    let mean = |k: &str| rows[k].iter().sum::<f64>() / rows[k].len() as f64;
    let (be, ce, ng) = (mean("be"), mean("ce"), mean("nogate"));
    let secs = start.elapsed().as_secs_f64();
    check(
        ce >= be && ce >= ng && secs < 900.0,
        format!(
            "mean dev R10@1 over 3 seeds: Bi-Encoder {be:.4} {:?}, +CE {ce:.4} {:?}, -Gate {ng:.4} {:?}; {secs:.0}s",
            rows["be"], rows["ce"], rows["nogate"]
        ),
    )
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cerank"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("cerank {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn read_summary(path: &Path) -> BTreeMap<String, String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn k_sweep() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let p = |s: &str| d.join(s).to_string_lossy().into_owned();
    let steps: Vec<Vec<String>> = vec![
        vec!["synth", "--out", &p("data"), "--topics", "10", "--contexts-per-topic", "20", "--vocab", "200"],
        vec![
            "train", "--train", &p("data/train.tsv"), "--dev", &p("data/dev.tsv"), "--out", &p("run"), "--dim", "16",
            "--embedding-dim", "16", "--max-epochs", "3", "--lr1", "3e-3", "--lr2", "1e-3", "--k", "5", "--batch-size", "16",
        ],
        vec!["precompute", "--checkpoint", &p("run/phase2.ckpt"), "--train", &p("data/train.tsv"), "--out", &p("stores")],
        vec![
            "sweep-k", "--checkpoint", &p("run/phase2.ckpt"), "--data", &p("data/test.tsv"), "--contexts",
            &p("stores/contexts.store"), "--biencoder", &p("run/phase1.ckpt"), "--out", &p("sweep"),
        ],
    ]
    .into_iter()
    .map(|v| v.into_iter().map(String::from).collect())
    .collect();
    for s in &steps {
        let args: Vec<&str> = s.iter().map(String::as_str).collect();
        run_cli(&args)?;
    }
    let table = std::fs::read_to_string(d.join("sweep/sweep.table")).unwrap();
    let ks = [0, 2, 5, 10, 15, 20, 25];
    let rows_present = ks.iter().all(|k| table.lines().any(|l| l.starts_with(&format!("k={k} "))));
    let be = read_summary(&d.join("sweep/biencoder.summary"));
    let k0 = read_summary(&d.join("sweep/k0.summary"));
    let mut worst: f64 = 0.0;
    for key in ["r10_at_1", "r10_at_2", "r10_at_5", "mrr"] {
        let a: f64 = be[key].parse().unwrap();
        let b: f64 = k0[key].parse().unwrap();
        worst = worst.max((a - b).abs());
    }
    check(
        rows_present && worst <= 1e-6,
        format!(
            "rows for k in {ks:?} present: {rows_present}; max |k=0 - Bi-Encoder| over R10@1/2/5, MRR = {worst:.1e}"
        ),
    )
}

fn loss_sanity() -> Outcome {
    let mut worst: f64 = 0.0;
    for b in [2usize, 8, 32] {
        let logits = vec![vec![1.5f32; b]; b];
        let l = cross_entropy_in_batch(&logits).unwrap();
        worst = worst.max((l - (b as f64).ln()).abs());
    }
    check(worst < 1e-6, format!("max |loss - ln B| for B in {{2, 8, 32}} = {worst:.1e}"))
}

fn latency_contract() -> Outcome {
    let desk = desk();
    let ranker = Ranker::new(desk.model, desk.model.init_params(0)).unwrap();
    let (contexts, _) = training_stores(ranker.encoder(), &desk.train).unwrap();
    let set = EvalSet::build(&ranker, &desk.vocab, &desk.data.dev, contexts, 20).unwrap();
    let before = ranker.encoder().encode_calls();
    let be = latency_bench(&ranker, &set, 0, DEFAULT_WARMUP, DEFAULT_REPEATS).unwrap();
    let ce = latency_bench(&ranker, &set, 20, DEFAULT_WARMUP, DEFAULT_REPEATS).unwrap();
    let calls = ranker.encoder().encode_calls() - before;
    let queries = 2 * (DEFAULT_WARMUP + DEFAULT_REPEATS) as u64;
    let ratio = ce.mean_ms / be.mean_ms;
    check(
        ratio <= 2.5 && calls == queries,
        format!(
            "Bi-Encoder {:.4} ms (median {:.4}), +CE k=20 {:.4} ms (median {:.4}), ratio {ratio:.2} (limit 2.5); {calls} encoder calls for {queries} queries",
            be.mean_ms, be.median_ms, ce.mean_ms, ce.median_ms
        ),
    )
}

/// Frozen high-precision reference for the fixture below (50-digit
/// incomplete-beta evaluation of the Student-t tail).
const T_FIXTURE_P: f64 = 0.006_260_334_337_213_220_884;

fn metric_fixtures() -> Outcome {
    let mut problems = Vec::new();
    let exact = |name: &str, got: f64, want: f64, problems: &mut Vec<String>| {
        if got != want {
            problems.push(format!("{name}: {got} != {want}"));
        }
    };
    exact("R@1 [1,1,1]", recall_at_k(&[1, 1, 1], 10, 1).unwrap(), 1.0, &mut problems);
    exact("R@2 [3]", recall_at_k(&[3], 10, 2).unwrap(), 0.0, &mut problems);
    exact("R@5 [3]", recall_at_k(&[3], 10, 5).unwrap(), 1.0, &mut problems);
    exact("MRR [1,2]", mrr(&[1, 2]).unwrap(), 0.75, &mut problems);
    exact("MRR all 1", mrr(&[1; 5]).unwrap(), 1.0, &mut problems);
    exact("MRR [1,2,4,10]", mrr(&[1, 2, 4, 10]).unwrap(), (1.0 + 0.5 + 0.25 + 0.1) / 4.0, &mut problems);

    let a = [0.82, 0.75, 0.91, 0.64, 0.88, 0.79, 0.70, 0.95, 0.83, 0.77];
    let b = [0.78, 0.74, 0.85, 0.66, 0.80, 0.72, 0.71, 0.90, 0.79, 0.70];
    let p = paired_t_test(&a, &b).unwrap();
    let oracle = t_test_oracle(&a, &b);
    let err = (p - T_FIXTURE_P).abs().max((p - oracle).abs());
    if err > 1e-9 {
        problems.push(format!("t-test p {p} vs reference {T_FIXTURE_P} / oracle {oracle}"));
    }
    exact("t-test identical", paired_t_test(&a, &a).unwrap(), 1.0, &mut problems);
    exact("t-test constant shift", paired_t_test(&[2.0; 4], &[1.0; 4]).unwrap(), 0.0, &mut problems);
    check(
        problems.is_empty(),
        if problems.is_empty() {
            format!("recall/MRR exact; t-test p = {p:.15} (reference error {err:.1e})")
        } else {
            problems.join("; ")
        },
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient oracle", gradient_oracle),
        ("reduction identity", reduction_identity),
        ("retrieval oracle", retrieval_oracle),
        ("cache fidelity", cache_fidelity),
        ("desk-scale CE benefit", ce_benefit),
        ("k-sweep harness", k_sweep),
        ("loss sanity", loss_sanity),
        ("latency contract", latency_contract),
        ("metric fixtures", metric_fixtures),
    ];
    let only: Option<Vec<usize>> = std::env::var("CERANK_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("criterion {n} ({name}): PASS - {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL - {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
