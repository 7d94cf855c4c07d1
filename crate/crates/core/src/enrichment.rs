//! Context enrichment head.
//!
//! For a candidate response `R`, the `k` training contexts closest to `R`
//! are compared with the live context `C`; the comparisons run through a
//! bidirectional GRU, are pooled by additive attention into `Ĉ ∈ ℝ^{2d}`,
//! and `Ĉ` is split into an enriched context `C_e` (first `d`) and a gate
//! control `G` (last `d`). The fused context
//! `C_f = σ(G)∘C_e + (1-σ(G))∘C` is scored against `R`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gru::{self, matvec_acc, GruCell, TapeGru};
use crate::matching::{scorer_tape, submult, submult_tape, Comparison, Scorer, BE_SCORER};
use crate::numerics::{sigmoid, softmax_in_place, Real, Tape, Var};
use crate::params::{Bound, ParamSet};

pub const CE_PREFIX: &str = "ce.";
pub const GRU_FORWARD: &str = "ce.gru_fwd";
pub const GRU_BACKWARD: &str = "ce.gru_bwd";
pub const ATT_HIDDEN: &str = "ce.att.hidden";
pub const ATT_RESPONSE: &str = "ce.att.response";
pub const ATT_SCORE: &str = "ce.att.score";
pub const CE_SCORER: &str = "ce.scorer";

/// Switches for the ablated variants of the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadOptions {
    /// Off: `Ĉ` is the unweighted mean of the GRU states.
    pub attention: bool,
    /// Off: `C_f = C_e`.
    pub gate: bool,
}

impl Default for HeadOptions {
    fn default() -> Self {
        HeadOptions {
            attention: true,
            gate: true,
        }
    }
}

pub fn init_params<T: Real, R: Rng>(
    params: &mut ParamSet<T>,
    d: usize,
    comparison: Comparison,
    attention_width: usize,
    scorer_hidden: usize,
    rng: &mut R,
) {
    let width = comparison.width(d);
    gru::init(params, GRU_FORWARD, width, d, rng);
    gru::init(params, GRU_BACKWARD, width, d, rng);
    params.init_uniform(ATT_HIDDEN, &[attention_width, 2 * d], 2 * d, rng);
    params.init_uniform(ATT_RESPONSE, &[attention_width, d], d, rng);
    params.init_uniform(ATT_SCORE, &[1, attention_width], attention_width, rng);
    crate::matching::init_scorer(params, CE_SCORER, width, scorer_hidden, rng);
}

/// `submult(C, Cᵢ)` for every neighbor.
pub fn compare_contexts<T: Real>(context: &[T], neighbors: &[&[T]], variant: Comparison) -> Result<Vec<Vec<T>>> {
    if neighbors.is_empty() {
        return Err(Error::Empty("compare_contexts"));
    }
    neighbors.iter().map(|n| submult(context, n, variant)).collect()
}

/// `Hᵢ = [forward state i ; backward state i]`, each direction starting at zero.
pub fn bigru_states<T: Real>(inputs: &[Vec<T>], params: &ParamSet<T>) -> Result<Vec<Vec<T>>> {
    if inputs.is_empty() {
        return Err(Error::Empty("bigru_states"));
    }
    let fwd = GruCell::from_params(params, GRU_FORWARD)?;
    let bwd = GruCell::from_params(params, GRU_BACKWARD)?;
    let mut out: Vec<Vec<T>> = Vec::with_capacity(inputs.len());
    let mut h = vec![T::zero(); fwd.hidden];
    for x in inputs {
        h = fwd.step(x, &h)?;
        out.push(h.clone());
    }
    let mut h = vec![T::zero(); bwd.hidden];
    for (i, x) in inputs.iter().enumerate().rev() {
        h = bwd.step(x, &h)?;
        out[i].extend_from_slice(&h);
    }
    Ok(out)
}

/// Additive attention pooling. Returns `(Ĉ, weights)`.
pub fn attend<T: Real>(states: &[Vec<T>], response: &[T], params: &ParamSet<T>) -> Result<(Vec<T>, Vec<T>)> {
    let first = states.first().ok_or(Error::Empty("attend"))?;
    let w_hidden = params.get(ATT_HIDDEN)?;
    let w_response = params.get(ATT_RESPONSE)?;
    let w_score = params.get(ATT_SCORE)?;
    let a = w_hidden.rows();
    if w_hidden.cols() != first.len() || w_response.cols() != response.len() || w_score.cols() != a {
        return Err(Error::shape("attend", w_hidden.shape(), &[first.len(), response.len()]));
    }
    let mut projected_response = vec![T::zero(); a];
    matvec_acc(w_response.data(), response, &mut projected_response);
    let mut scores = Vec::with_capacity(states.len());
    for h in states {
        if h.len() != first.len() {
            return Err(Error::shape("attend", &[first.len()], &[h.len()]));
        }
        let mut u = projected_response.clone();
        matvec_acc(w_hidden.data(), h, &mut u);
        scores.push(u.iter().zip(w_score.data()).map(|(x, w)| x.tanh() * *w).sum::<T>());
    }
    softmax_in_place(&mut scores);
    Ok((weighted_sum(states, &scores), scores))
}

fn weighted_sum<T: Real>(states: &[Vec<T>], weights: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); states[0].len()];
    for (h, w) in states.iter().zip(weights) {
        for (o, v) in out.iter_mut().zip(h) {
            *o = *o + *w * *v;
        }
    }
    out
}

/// Unweighted mean of the states, used when attention is ablated.
pub fn mean_pool<T: Real>(states: &[Vec<T>]) -> Result<(Vec<T>, Vec<T>)> {
    if states.is_empty() {
        return Err(Error::Empty("mean_pool"));
    }
    let w = T::one() / T::from_usize(states.len()).unwrap();
    let weights = vec![w; states.len()];
    Ok((weighted_sum(states, &weights), weights))
}

/// `C_f = σ(G)∘C_e + (1-σ(G))∘C` with `C_e`/`G` the first/last halves of
/// `Ĉ`. Returns `(C_f, σ(G))`.
pub fn gate_fuse<T: Real>(pooled: &[T], context: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    let d = context.len();
    if pooled.len() != 2 * d {
        return Err(Error::shape("gate_fuse", &[pooled.len()], &[d]));
    }
    let (enriched, control) = pooled.split_at(d);
    let gate: Vec<T> = control.iter().map(|g| sigmoid(*g)).collect();
    let fused = (0..d)
        .map(|i| gate[i] * enriched[i] + (T::one() - gate[i]) * context[i])
        .collect();
    Ok((fused, gate))
}

/// Final logit for the fused context against the response.
pub fn ce_score<T: Real>(fused: &[T], response: &[T], params: &ParamSet<T>, variant: Comparison) -> Result<T> {
    Scorer::from_params(params, CE_SCORER)?.score(&submult(fused, response, variant)?)
}

/// Intermediate values of one enriched score.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EnrichmentTrace {
    pub neighbor_ids: Vec<u64>,
    pub similarities: Vec<f32>,
    pub attention: Vec<f32>,
    /// σ(G); empty when the gate is ablated or no neighbors were used.
    pub gate: Vec<f32>,
    /// First half of `Ĉ`.
    pub enriched: Vec<f32>,
    /// Second half of `Ĉ`.
    pub gate_control: Vec<f32>,
}

impl EnrichmentTrace {
    pub fn neighbors_used(&self) -> usize {
        self.neighbor_ids.len()
    }
}

/// Enriched logit from already-retrieved neighbor vectors. With no
/// neighbors this is exactly the Bi-Encoder score.
pub fn score_with_neighbors<T: Real>(
    context: &[T],
    response: &[T],
    neighbors: &[&[T]],
    params: &ParamSet<T>,
    variant: Comparison,
    options: HeadOptions,
) -> Result<(T, Vec<T>, Vec<T>, Vec<T>)> {
    if neighbors.is_empty() {
        let s = Scorer::from_params(params, BE_SCORER)?.score(&submult(context, response, variant)?)?;
        return Ok((s, Vec::new(), Vec::new(), Vec::new()));
    }
    let compared = compare_contexts(context, neighbors, variant)?;
    let states = bigru_states(&compared, params)?;
    let (pooled, weights) = if options.attention {
        attend(&states, response, params)?
    } else {
        mean_pool(&states)?
    };
    let d = context.len();
    let (fused, gate) = if options.gate {
        gate_fuse(&pooled, context)?
    } else {
        (pooled[..d].to_vec(), Vec::new())
    };
    let s = ce_score(&fused, response, params, variant)?;
    Ok((s, weights, gate, pooled))
}

/// Batched enriched logits on a tape.
///
/// `contexts` and `responses` are P×d; `neighbors[t]` is the P×d matrix of
/// rank-t neighbors. Returns P×1. With no neighbors the Bi-Encoder scorer
/// is used.
pub fn ce_logits_tape<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    contexts: Var,
    responses: Var,
    neighbors: &[Var],
    variant: Comparison,
    options: HeadOptions,
) -> Result<Var> {
    if neighbors.is_empty() {
        let f = submult_tape(tape, contexts, responses, variant)?;
        return scorer_tape(tape, bound, BE_SCORER, f);
    }
    let d = tape.shape(contexts)[1];
    let rows = tape.shape(contexts)[0];
    let fwd = TapeGru::bind(tape, bound, GRU_FORWARD)?;
    let bwd = TapeGru::bind(tape, bound, GRU_BACKWARD)?;
    let inputs: Vec<Var> = neighbors
        .iter()
        .map(|n| submult_tape(tape, contexts, *n, variant))
        .collect::<Result<_>>()?;

    let zero = tape.constant(&[rows, fwd.hidden], vec![T::zero(); rows * fwd.hidden]);
    let mut forward = Vec::with_capacity(inputs.len());
    let mut h = zero;
    for x in &inputs {
        h = fwd.step(tape, *x, h)?;
        forward.push(h);
    }
    let mut backward = vec![zero; inputs.len()];
    let mut h = zero;
    for (i, x) in inputs.iter().enumerate().rev() {
        h = bwd.step(tape, *x, h)?;
        backward[i] = h;
    }
    let states: Vec<Var> = forward
        .iter()
        .zip(&backward)
        .map(|(f, b)| tape.concat_cols(&[*f, *b]))
        .collect::<Result<_>>()?;

    let k = states.len();
    let weights = if options.attention {
        let w_hidden = bound.var(ATT_HIDDEN)?;
        let w_response = bound.var(ATT_RESPONSE)?;
        let w_score = bound.var(ATT_SCORE)?;
        let pr = tape.matmul_bt(responses, w_response)?;
        let mut scores = Vec::with_capacity(k);
        for h in &states {
            let u = tape.matmul_bt(*h, w_hidden)?;
            let u = tape.add(u, pr)?;
            let u = tape.tanh(u);
            scores.push(tape.matmul_bt(u, w_score)?);
        }
        let s = tape.concat_cols(&scores)?;
        tape.softmax_rows(s)?
    } else {
        let w = T::one() / T::from_usize(k).unwrap();
        tape.constant(&[rows, k], vec![w; rows * k])
    };
    let mut pooled = None;
    for (t, h) in states.iter().enumerate() {
        let a = tape.slice_cols(weights, t, t + 1)?;
        let term = tape.scale_rows(*h, a)?;
        pooled = Some(match pooled {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let pooled = pooled.expect("k >= 1");
    let enriched = tape.slice_cols(pooled, 0, d)?;
    let fused = if options.gate {
        let control = tape.slice_cols(pooled, d, 2 * d)?;
        let g = tape.sigmoid(control);
        let open = tape.mul(g, enriched)?;
        let closed = tape.one_minus(g);
        let keep = tape.mul(closed, contexts)?;
        tape.add(open, keep)?
    } else {
        enriched
    };
    let f = submult_tape(tape, fused, responses, variant)?;
    scorer_tape(tape, bound, CE_SCORER, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::{biencoder_score, init_scorer};
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn head(d: usize, seed: u64) -> ParamSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        init_scorer(&mut p, BE_SCORER, 5 * d, 2 * d, &mut rng);
        init_params(&mut p, d, Comparison::Literal, d, 2 * d, &mut rng);
        p
    }

    #[test]
    fn compare_contexts_shapes() {
        let c = [1.0, 2.0, 3.0];
        let n1 = [1.0, 2.0, 3.0];
        let n2 = [0.0, 2.0, -1.0];
        let out = compare_contexts(&c, &[&n1, &n2, &n2], Comparison::Literal).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|v| v.len() == 15));
        assert!(out[0][6..].iter().all(|v| *v == 0.0));
        assert_eq!(out[1], submult(&c, &n2, Comparison::Literal).unwrap());
        assert!(compare_contexts::<f64>(&c, &[], Comparison::Literal).is_err());
        assert!(compare_contexts(&c, &[&[1.0][..]], Comparison::Literal).is_err());
    }

    #[test]
    fn bigru_single_step_and_reversal() {
        let d = 3;
        let p = head(d, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_vec(&mut rng, 5 * d);
        let one = bigru_states(&[x.clone()], &p).unwrap();
        let fwd = GruCell::from_params(&p, GRU_FORWARD).unwrap();
        let bwd = GruCell::from_params(&p, GRU_BACKWARD).unwrap();
        let zero = vec![0.0; d];
        assert_eq!(one[0][..d], fwd.step(&x, &zero).unwrap()[..]);
        assert_eq!(one[0][d..], bwd.step(&x, &zero).unwrap()[..]);

        // swapping the two directions' weights and reversing the input
        // list reproduces the mirrored states
        let xs: Vec<Vec<f64>> = (0..4).map(|_| rand_vec(&mut rng, 5 * d)).collect();
        let hs = bigru_states(&xs, &p).unwrap();
        let mut swapped = p.clone();
        for suffix in ["w_ih", "w_hh", "b_ih", "b_hh"] {
            let f = p.get(&format!("{GRU_FORWARD}.{suffix}")).unwrap().clone();
            let b = p.get(&format!("{GRU_BACKWARD}.{suffix}")).unwrap().clone();
            swapped.insert(format!("{GRU_FORWARD}.{suffix}"), b);
            swapped.insert(format!("{GRU_BACKWARD}.{suffix}"), f);
        }
        let rev: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
        let hr = bigru_states(&rev, &swapped).unwrap();
        for i in 0..4 {
            let j = 3 - i;
            assert_eq!(hs[i][..d], hr[j][d..]);
            assert_eq!(hs[i][d..], hr[j][..d]);
        }
    }

    #[test]
    fn bigru_zero_weights() {
        let mut p = ParamSet::<f32>::new();
        for prefix in [GRU_FORWARD, GRU_BACKWARD] {
            for (n, s) in [("w_ih", vec![6, 10]), ("w_hh", vec![6, 2]), ("b_ih", vec![6]), ("b_hh", vec![6])] {
                p.insert(format!("{prefix}.{n}"), Tensor::zeros(&s));
            }
        }
        let hs = bigru_states(&[vec![1.0; 10], vec![-3.0; 10]], &p).unwrap();
        assert!(hs.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn attend_examples() {
        let d = 3;
        let p = head(d, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = rand_vec(&mut rng, d);
        let h1 = rand_vec(&mut rng, 2 * d);
        let (pooled, w) = attend(&[h1.clone()], &r, &p).unwrap();
        assert_eq!(w, vec![1.0]);
        assert_eq!(pooled, h1);

        let (pooled, w) = attend(&[h1.clone(), h1.clone(), h1.clone()], &r, &p).unwrap();
        assert!(w.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-12));
        for (a, b) in pooled.iter().zip(&h1) {
            assert!((a - b).abs() < 1e-12);
        }

        // direct evaluation with an explicit softmax
        let hs: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng, 2 * d)).collect();
        let (pooled, w) = attend(&hs, &r, &p).unwrap();
        let w11 = p.get(ATT_HIDDEN).unwrap();
        let w12 = p.get(ATT_RESPONSE).unwrap();
        let w13 = p.get(ATT_SCORE).unwrap().data();
        let raw: Vec<f64> = hs
            .iter()
            .map(|h| {
                (0..w11.rows())
                    .map(|j| {
                        let pre: f64 = w11.row(j).iter().zip(h).map(|(a, b)| a * b).sum::<f64>()
                            + w12.row(j).iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();
                        w13[j] * pre.tanh()
                    })
                    .sum()
            })
            .collect();
        let z: f64 = raw.iter().map(|s| s.exp()).sum();
        for i in 0..3 {
            assert!((w[i] - raw[i].exp() / z).abs() < 1e-12);
        }
        for c in 0..2 * d {
            let expect: f64 = (0..3).map(|i| raw[i].exp() / z * hs[i][c]).sum();
            assert!((pooled[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_examples() {
        let (f, g) = gate_fuse(&[4.0, -2.0, 0.0, 0.0], &[2.0, 6.0]).unwrap();
        assert_eq!(g, vec![0.5, 0.5]);
        assert_eq!(f, vec![3.0, 2.0]);
        let (f, _) = gate_fuse(&[9.0f64, 9.0, -100.0, -100.0], &[1.0, -1.0]).unwrap();
        assert!((f[0] - 1.0).abs() < 1e-6 && (f[1] + 1.0).abs() < 1e-6);
        let (f, _) = gate_fuse(&[3.0f64, 0.0], &[1.0]).unwrap();
        assert_eq!(f, vec![2.0]);
        assert!(gate_fuse(&[1.0, 2.0, 3.0], &[1.0]).is_err());
    }

    #[test]
    fn ce_score_shares_structure_with_biencoder() {
        let d = 4;
        let mut p = head(d, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let c = rand_vec(&mut rng, d);
        let r = rand_vec(&mut rng, d);
        for n in ["w1", "b1", "w2", "b2"] {
            let t = p.get(&format!("{BE_SCORER}.{n}")).unwrap().clone();
            p.insert(format!("{CE_SCORER}.{n}"), t);
        }
        assert_eq!(
            ce_score(&c, &r, &p, Comparison::Literal).unwrap(),
            biencoder_score(&c, &r, &p, Comparison::Literal).unwrap()
        );
        let mut z = p.clone();
        for (name, t) in z.iter_mut() {
            if name.starts_with(CE_SCORER) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        assert_eq!(ce_score(&c, &r, &z, Comparison::Literal).unwrap(), 0.0);
    }

    #[test]
    fn tape_head_matches_plain_head() {
        let d = 4;
        let p = head(d, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let rows = 3;
        let k = 4;
        let cs: Vec<Vec<f64>> = (0..rows).map(|_| rand_vec(&mut rng, d)).collect();
        let rs: Vec<Vec<f64>> = (0..rows).map(|_| rand_vec(&mut rng, d)).collect();
        let ns: Vec<Vec<Vec<f64>>> = (0..rows)
            .map(|_| (0..k).map(|_| rand_vec(&mut rng, d)).collect())
            .collect();
        for options in [
            HeadOptions::default(),
            HeadOptions { attention: false, gate: true },
            HeadOptions { attention: true, gate: false },
        ] {
            for kk in [0, 1, k] {
                let mut tape = Tape::<f64>::new();
                let bound = Bound::new(&mut tape, &p, |_| true);
                let c = tape.constant(&[rows, d], cs.concat());
                let r = tape.constant(&[rows, d], rs.concat());
                let nv: Vec<Var> = (0..kk)
                    .map(|t| tape.constant(&[rows, d], ns.iter().flat_map(|n| n[t].clone()).collect()))
                    .collect();
                let out = ce_logits_tape(&mut tape, &bound, c, r, &nv, Comparison::Literal, options).unwrap();
                for i in 0..rows {
                    let refs: Vec<&[f64]> = ns[i][..kk].iter().map(|v| v.as_slice()).collect();
                    let (s, ..) =
                        score_with_neighbors(&cs[i], &rs[i], &refs, &p, Comparison::Literal, options).unwrap();
                    assert!((tape.value(out)[i] - s).abs() < 1e-12, "{options:?} k={kk}");
                }
            }
        }
    }
}
