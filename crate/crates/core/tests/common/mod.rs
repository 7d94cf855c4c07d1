#![allow(dead_code)]

use std::collections::HashSet;

use cerank::encoder::{encode_batch_tape, EncoderConfig};
use cerank::model::ModelConfig;
use cerank::numerics::{finite_difference_gradient, relative_error, Tape, Var};
use cerank::params::{Bound, ParamSet};
use cerank::training::pair_logits_tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A batch of 4 contexts and 4 responses, each response with `k`
/// neighbor contexts, all as token ids.
pub struct GradFixture {
    pub model: ModelConfig,
    pub params: ParamSet<f64>,
    pub contexts: Vec<Vec<u32>>,
    pub responses: Vec<Vec<u32>>,
    pub neighbors: Vec<Vec<u32>>,
    pub k: usize,
}

fn random_seq(rng: &mut ChaCha8Rng, vocab: usize, max_len: usize) -> Vec<u32> {
    let len = rng.gen_range(1..=max_len);
    std::iter::once(2)
        .chain((1..len).map(|_| rng.gen_range(3..vocab as u32)))
        .collect()
}

impl GradFixture {
    /// d=8, vocab 20, sequences of at most 5 ids, batch 4.
    pub fn new(seed: u64, k: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = ModelConfig::new(EncoderConfig::new(20, 8, 8));
        let mut params: ParamSet<f64> = model.init_params(seed).cast();
        // biases start uniform too so no unit sits exactly at a ReLU kink
        for (_, t) in params.iter_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.05..0.05);
            }
        }
        let b = 4;
        GradFixture {
            model,
            params,
            contexts: (0..b).map(|_| random_seq(&mut rng, 20, 5)).collect(),
            responses: (0..b).map(|_| random_seq(&mut rng, 20, 5)).collect(),
            neighbors: (0..b * k).map(|_| random_seq(&mut rng, 20, 5)).collect(),
            k,
        }
    }

    /// In-batch cross-entropy of the enriched logits plus that of the
    /// Bi-Encoder logits, with every vector produced by the encoder.
    pub fn loss(&self, tape: &mut Tape<f64>, bound: &Bound) -> Var {
        let enc = &self.model.encoder;
        let b = self.contexts.len();
        let c = encode_batch_tape(tape, bound, enc, &self.contexts).unwrap();
        let r = encode_batch_tape(tape, bound, enc, &self.responses).unwrap();
        let mut ns = Vec::new();
        if self.k > 0 {
            let all = encode_batch_tape(tape, bound, enc, &self.neighbors).unwrap();
            for t in 0..self.k {
                let idx: Vec<usize> = (0..b).map(|j| j * self.k + t).collect();
                ns.push(tape.gather_rows(all, &idx).unwrap());
            }
        }
        let targets: Vec<usize> = (0..b).collect();
        let ce = pair_logits_tape(tape, bound, c, r, &ns, &self.model).unwrap();
        let be = pair_logits_tape(tape, bound, c, r, &[], &self.model).unwrap();
        let l1 = tape.cross_entropy_rows(ce, &targets).unwrap();
        let l2 = tape.cross_entropy_rows(be, &targets).unwrap();
        tape.add(l1, l2).unwrap()
    }

    pub fn value(&self, params: &ParamSet<f64>) -> f64 {
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, params, |_| false);
        let l = self.loss(&mut tape, &bound);
        tape.scalar(l)
    }

    pub fn analytic(&self) -> Vec<f64> {
        let mut params = self.params.clone();
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &params, |_| true);
        let l = self.loss(&mut tape, &bound);
        tape.backward(l).unwrap();
        params.zero_grad();
        bound.collect_grads(&tape, &mut params).unwrap();
        params.flat_grad()
    }

    pub fn numeric(&self, eps: f64) -> Vec<f64> {
        let mut scratch = self.params.clone();
        finite_difference_gradient(
            |p| {
                scratch.unflatten(p).unwrap();
                self.value(&scratch)
            },
            &self.params.flatten(),
            eps,
        )
        .unwrap()
    }
}

pub struct GradReport {
    pub coordinates: usize,
    /// Worst per-coordinate relative error over every coordinate.
    pub max_rel: f64,
    /// Worst per-coordinate relative error over coordinates with magnitude
    /// at least `SIGNIFICANT` times the largest one.
    pub max_rel_significant: f64,
    pub significant: usize,
    /// ||analytic - numeric|| / max(||analytic||, ||numeric||).
    pub vector_rel: f64,
}

/// Below this fraction of the largest gradient entry, central-difference
/// rounding noise (about machine epsilon times |loss| / eps) dominates.
pub const SIGNIFICANT: f64 = 1e-4;

pub fn compare_gradients(analytic: &[f64], numeric: &[f64]) -> GradReport {
    let max_rel = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max);
    let top = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    let sig: Vec<f64> = analytic
        .iter()
        .zip(numeric)
        .filter(|(a, n)| a.abs().max(n.abs()) >= SIGNIFICANT * top)
        .map(|(a, n)| relative_error(*a, *n))
        .collect();
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    GradReport {
        coordinates: analytic.len(),
        max_rel,
        max_rel_significant: sig.iter().copied().fold(0.0, f64::max),
        significant: sig.len(),
        vector_rel: diff / na.max(nn).max(f64::MIN_POSITIVE),
    }
}

/// Full-scan cosine ranking: descending similarity, ties by ascending id.
pub fn brute_force_top_k(ids: &[u64], rows: &[Vec<f32>], query: &[f32], k: usize, exclude: &HashSet<u64>) -> Vec<(u64, f64)> {
    let norm = |v: &[f32]| v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let qn = norm(query);
    let mut all: Vec<(u64, f64)> = ids
        .iter()
        .zip(rows)
        .filter(|(id, _)| !exclude.contains(id))
        .map(|(id, r)| {
            let dot: f64 = r.iter().zip(query).map(|(a, b)| *a as f64 * *b as f64).sum();
            (*id, dot / (qn * norm(r)))
        })
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// ln Γ(x) for x > 0 (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = G[0];
    let t = x + 7.5;
    for (i, g) in G.iter().enumerate().skip(1) {
        a += g / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < tiny {
        d = tiny;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        d = 1.0 + aa * d;
        d = if d.abs() < tiny { tiny } else { d };
        c = 1.0 + aa / c;
        c = if c.abs() < tiny { tiny } else { c };
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
        d = 1.0 + aa * d;
        d = if d.abs() < tiny { tiny } else { d };
        c = 1.0 + aa / c;
        c = if c.abs() < tiny { tiny } else { c };
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b).
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Two-tailed paired t-test p-value, computed independently of the crate.
pub fn t_test_oracle(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let t = mean / (var / n).sqrt();
    let df = n - 1.0;
    reg_inc_beta(df / 2.0, 0.5, df / (df + t * t))
}
